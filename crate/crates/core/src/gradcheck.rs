//! Central-difference verification of every analytic gradient, in `f64`.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_corpus, CorpusConfig};
use crate::data::{build_vocabulary, prepare, Dataset, PreparedPair};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};
use crate::model::{Ablation, ModelConfig, PathFlip};
use crate::params::ParamStore;
use crate::partition::LinearTanhEncoder;
use crate::tensor::Matrix;
use crate::train::{instruct_graph, pretrain_graph, LossParams};

pub const LOSSES: [&str; 3] = ["L_region", "L_slide", "L_lm"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            seed: 0,
            ablation: Ablation::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub loss: String,
    pub group: String,
    /// Max over the group's tensors of `‖a − n‖ / (‖a‖ + ‖n‖)`.
    pub max_rel_error: f64,
    pub scalars: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&GroupReport> {
        self.groups.iter().filter(|g| !(g.max_rel_error < self.tolerance)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

/// Smallest configuration exercising every parameter group.
pub fn tiny_setup(ablation: Ablation) -> Result<(Dataset, ModelConfig)> {
    let corpus = generate_corpus(&CorpusConfig {
        num_pairs: 3,
        regions_per_slide: 2,
        patches_per_region: 3,
        raw_dim: 4,
        num_concepts: 3,
        concepts_per_slide: 1,
        noise: 0.3,
        seed: 1,
    })?;
    let vocab = build_vocabulary(&corpus);
    let data = prepare(&corpus, &vocab, &LinearTanhEncoder::random(4, 4, 2))?;
    let model = ModelConfig {
        vocab_size: vocab.len(),
        text_max_len: data.max_caption_len(),
        d: 4,
        n_queries: 2,
        qformer_blocks: 1,
        text_layers: 1,
        d_dec: 4,
        decoder_layers: 1,
        decoder_max_text: data.max_instruction_len() + 1,
        regions_per_slide: 2,
        eta_init: 1.0,
        ablation,
    };
    Ok((data, model))
}

fn evaluate(
    loss: &str,
    model: &PathFlip,
    store: &ParamStore<f64>,
    pairs: &[&PreparedPair],
    lp: &LossParams,
    seed: u64,
    want_grads: bool,
) -> Result<(f64, Option<Gradients<f64>>)> {
    let mut g = Graph::new(store);
    let node = match loss {
        "L_lm" => {
            let recs: Vec<(&PreparedPair, usize)> = pairs.iter().map(|&p| (p, 0)).collect();
            instruct_graph(model, &mut g, &recs, None)?
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nodes = pretrain_graph(model, &mut g, pairs, lp, &mut rng)?;
            match loss {
                "L_region" => nodes.region.ok_or_else(|| Error::Config("region loss disabled".into()))?,
                _ => nodes.global.expect("global loss always on").slide,
            }
        }
    };
    let v = g.value(node).item();
    Ok((v, want_grads.then(|| g.backward(node))))
}

fn norm(xs: impl Iterator<Item = f64>) -> f64 {
    num_traits::Float::sqrt(xs.map(|x| x * x).sum::<f64>())
}

/// Runs the check; `corrupt(loss, param_name, grad)` may tamper with analytic gradients.
pub fn gradcheck_with(config: &GradcheckConfig, corrupt: &dyn Fn(&str, &str, &mut Matrix<f64>)) -> Result<GradcheckReport> {
    let (data, mc) = tiny_setup(config.ablation)?;
    let (model, base) = PathFlip::init::<f64>(mc, config.seed)?;
    let pairs: Vec<&PreparedPair> = data.pairs.iter().collect();
    let lp = LossParams {
        k: 2,
        p_keep: 0.5,
        tau: 0.5,
        eta_init: 1.0,
    };
    let h = config.step;
    let mut groups: Vec<GroupReport> = Vec::new();
    for loss in LOSSES {
        if loss == "L_region" && !config.ablation.use_region_qformer {
            continue;
        }
        let (_, grads) = evaluate(loss, &model, &base, &pairs, &lp, config.seed, true)?;
        let grads = grads.expect("requested");
        for (i, entry) in base.entries().iter().enumerate() {
            let Some(analytic) = grads.params()[i].as_ref() else { continue };
            let mut analytic = analytic.clone();
            corrupt(loss, &entry.name, &mut analytic);
            let mut numeric = Vec::with_capacity(analytic.data().len());
            let mut store = base.clone();
            for j in 0..analytic.data().len() {
                let orig = base.entries()[i].value.data()[j];
                store.entries_mut()[i].value.data_mut()[j] = orig + h;
                let (plus, _) = evaluate(loss, &model, &store, &pairs, &lp, config.seed, false)?;
                store.entries_mut()[i].value.data_mut()[j] = orig - h;
                let (minus, _) = evaluate(loss, &model, &store, &pairs, &lp, config.seed, false)?;
                store.entries_mut()[i].value.data_mut()[j] = orig;
                numeric.push((plus - minus) / (2.0 * h));
            }
            let diff = norm(analytic.data().iter().zip(&numeric).map(|(a, n)| a - n));
            let scale = norm(analytic.data().iter().copied()) + norm(numeric.iter().copied());
            let rel = if scale == 0.0 { 0.0 } else { diff / scale };
            let group = entry.group().to_string();
            match groups.iter_mut().find(|g| g.loss == loss && g.group == group) {
                Some(g) => {
                    g.max_rel_error = g.max_rel_error.max(rel);
                    g.scalars += numeric.len();
                }
                None => groups.push(GroupReport {
                    loss: loss.to_string(),
                    group,
                    max_rel_error: rel,
                    scalars: numeric.len(),
                }),
            }
        }
    }
    Ok(GradcheckReport {
        tolerance: config.tolerance,
        groups,
    })
}

pub fn gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    gradcheck_with(config, &|_, _, _| {})
}
