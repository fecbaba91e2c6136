//! Evaluation protocol: retrieval, zero-shot AUC, grounding, and instruction answers.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PreparedPair};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::grounding::{region_attention_scores, RegionScoreMap, DEFAULT_MARGIN};
use crate::metrics::{auc, bleu_n, grounding_accuracy, majority_baseline, recall_at_k, rouge_l, zero_shot_scores, Direction};
use crate::model::PathFlip;
use crate::params::ParamStore;
use crate::tensor::{cosine, Matrix};
use crate::text::{Vocabulary, EOS};
use crate::train::visual_prefix_inputs;

pub const RETRIEVAL_BATCH: usize = 64;

/// Pooled slide and caption embeddings for a split, `n × d` each.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub slides: Matrix<f64>,
    pub captions: Matrix<f64>,
}

pub fn embed(model: &PathFlip, store: &ParamStore<f32>, data: &Dataset) -> Result<Embeddings> {
    let d = model.config.d;
    let mut slides = Matrix::zeros(data.len(), d);
    let mut captions = Matrix::zeros(data.len(), d);
    for (i, p) in data.pairs.iter().enumerate() {
        let mut g = Graph::new(store);
        let feats = PathFlip::feature_nodes(&mut g, &p.features);
        let v = model.visual(&mut g, &feats, false)?;
        let t = model.encode_text(&mut g, &p.caption_ids())?;
        for c in 0..d {
            slides[(i, c)] = g.value(v.pooled)[(0, c)] as f64;
            captions[(i, c)] = g.value(t)[(0, c)] as f64;
        }
    }
    Ok(Embeddings { slides, captions })
}

/// Cosine similarity, rows = slides, columns = captions.
pub fn similarity(slides: &Matrix<f64>, captions: &Matrix<f64>) -> Result<Matrix<f64>> {
    let mut s = Matrix::zeros(slides.rows(), captions.rows());
    for i in 0..slides.rows() {
        for j in 0..captions.rows() {
            s[(i, j)] = cosine(slides.row(i), captions.row(j)).ok_or(Error::ZeroNorm { which: "embedding", index: i })?;
        }
    }
    Ok(s)
}

/// Mean Recall@k over consecutive batches of `batch` pairs; a short tail batch is dropped
/// unless it is the only one.
pub fn retrieval_recall(e: &Embeddings, batch: usize, k: usize, direction: Direction) -> Result<f64> {
    let n = e.slides.rows();
    if n == 0 {
        return Err(Error::Empty("no pairs to retrieve".into()));
    }
    let b = batch.min(n);
    let chunks = n / b;
    let mut total = 0.0;
    for c in 0..chunks {
        let s = similarity(&e.slides.slice_rows(c * b, b), &e.captions.slice_rows(c * b, b))?;
        total += recall_at_k(&s, k.min(b), direction)?;
    }
    Ok(total / chunks as f64)
}

/// Score map of one `[CLS]`-prefixed text over a slide's regions.
pub fn ground_text(model: &PathFlip, store: &ParamStore<f32>, pair: &PreparedPair, ids: &[u32]) -> Result<RegionScoreMap> {
    let mut g = Graph::new(store);
    let feats = PathFlip::feature_nodes(&mut g, &pair.features);
    let v = model.visual(&mut g, &feats, true)?;
    let t = model.encode_text(&mut g, ids)?;
    let regions = g.value(v.regions.expect("regions requested")).clone();
    let text = g.value(t).clone();
    let scores = region_attention_scores(
        store,
        model.attention.as_ref(),
        &text,
        &regions,
        pair.features.len(),
        model.config.n_queries,
    )?;
    Ok(RegionScoreMap {
        slide_id: pair.slide_id.clone(),
        grid: pair.grid,
        scores,
    })
}

/// One case per planted concept: the concept's sentence against its slide.
pub fn grounding_cases(model: &PathFlip, store: &ParamStore<f32>, data: &Dataset) -> Result<Vec<(RegionScoreMap, usize)>> {
    let mut out = Vec::new();
    for p in &data.pairs {
        for ps in &p.planted {
            out.push((ground_text(model, store, p, &p.sentence_ids(ps.sentence))?, ps.region));
        }
    }
    Ok(out)
}

/// Per-concept binary AUC of `cos(v̄, concept prompt)` against presence, averaged over
/// concepts that occur in some but not all slides.
pub fn zero_shot_auc(model: &PathFlip, store: &ParamStore<f32>, data: &Dataset, e: &Embeddings) -> Result<f64> {
    let d = model.config.d;
    let mut prompts = Matrix::zeros(data.concept_prompts.len(), d);
    for (c, ids) in data.concept_prompts.iter().enumerate() {
        let mut g = Graph::new(store);
        let t = model.encode_text(&mut g, ids)?;
        for j in 0..d {
            prompts[(c, j)] = g.value(t)[(0, j)] as f64;
        }
    }
    let scores = zero_shot_scores(&e.slides, &prompts)?;
    let mut sum = 0.0;
    let mut count = 0;
    for c in 0..prompts.rows() {
        let labels: Vec<bool> = data.pairs.iter().map(|p| p.planted.iter().any(|ps| ps.concept as usize == c)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        let col: Vec<f64> = (0..scores.rows()).map(|i| scores[(i, c)]).collect();
        sum += auc(&col, &labels)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("no concept with both classes present".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructOutcome {
    pub exact_match: f64,
    pub majority_baseline: f64,
    pub bleu: [f64; 3],
    pub rouge_l: f64,
    /// `(slide_id, generated answer)`.
    pub answers: Vec<(String, String)>,
}

/// Generated answer ids (EOS stripped) for a pair's first instruction record.
pub fn answer(model: &PathFlip, store: &ParamStore<f32>, pair: &PreparedPair, prompt: &[u32], max_len: usize) -> Result<Vec<u32>> {
    let (slide, regions) = visual_prefix_inputs(model, store, pair)?;
    let mut g = Graph::new(store);
    let (s, r) = (g.constant(slide), g.constant(regions));
    let prefix = model.head.build_prefix(&mut g, s, r)?;
    let prefix = g.value(prefix).clone();
    let mut out = model.head.generate(store, &prefix, prompt, max_len)?;
    if out.last() == Some(&EOS) {
        out.pop();
    }
    Ok(out)
}

pub fn instruct_eval(
    model: &PathFlip,
    store: &ParamStore<f32>,
    vocab: &Vocabulary,
    train: &Dataset,
    test: &Dataset,
    max_len: usize,
) -> Result<InstructOutcome> {
    let mut exact = 0usize;
    let mut bleu = [0.0; 3];
    let mut rouge = 0.0;
    let mut answers = Vec::new();
    let mut n = 0usize;
    for p in &test.pairs {
        let Some((prompt, target)) = p.instructions.first() else { continue };
        let reference = &target[..target.len() - 1];
        let got = answer(model, store, p, prompt, max_len)?;
        exact += usize::from(got == reference);
        for (o, b) in bleu.iter_mut().enumerate() {
            *b += bleu_n(&got, reference, o + 1)?;
        }
        rouge += rouge_l(&got, reference)?;
        answers.push((p.slide_id.clone(), vocab.detokenize(&got)));
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("no instruction records in test split".into()));
    }
    let train_answers: Vec<&str> = train.pairs.iter().map(|p| p.answer.as_str()).collect();
    let test_answers: Vec<&str> = test.pairs.iter().map(|p| p.answer.as_str()).collect();
    let nf = n as f64;
    Ok(InstructOutcome {
        exact_match: exact as f64 / nf,
        majority_baseline: majority_baseline(&train_answers, &test_answers),
        bleu: bleu.map(|b| b / nf),
        rouge_l: rouge / nf,
        answers,
    })
}

/// One named metric value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub metric: String,
    pub value: f64,
}

fn metric(name: &str, value: f64) -> Metric {
    Metric {
        metric: name.to_string(),
        value,
    }
}

/// Retrieval, zero-shot and grounding metrics of the pretrained model.
pub fn evaluate_alignment(model: &PathFlip, store: &ParamStore<f32>, data: &Dataset) -> Result<Vec<Metric>> {
    let e = embed(model, store, data)?;
    let mut out = Vec::new();
    for (tag, dir) in [("itr", Direction::ImageToText), ("tir", Direction::TextToImage)] {
        for k in [1, 5, 10] {
            out.push(metric(&alloc::format!("{tag}_r@{k}"), retrieval_recall(&e, RETRIEVAL_BATCH, k, dir)?));
        }
    }
    out.push(metric("zero_shot_auc", zero_shot_auc(model, store, data, &e)?));
    let cases = grounding_cases(model, store, data)?;
    out.push(metric("grounding_accuracy", grounding_accuracy(&cases, DEFAULT_MARGIN)));
    Ok(out)
}

pub fn instruct_metrics(o: &InstructOutcome) -> Vec<Metric> {
    alloc::vec![
        metric("exact_match", o.exact_match),
        metric("majority_baseline", o.majority_baseline),
        metric("bleu_1", o.bleu[0]),
        metric("bleu_2", o.bleu[1]),
        metric("bleu_3", o.bleu[2]),
        metric("rouge_l", o.rouge_l),
    ]
}

pub fn find_metric(metrics: &[Metric], name: &str) -> Option<f64> {
    metrics.iter().find(|m| m.metric == name).map(|m| m.value)
}
