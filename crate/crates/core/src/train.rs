//! Run configuration and the deterministic training loop for both stages.
//!
//! Randomness is keyed by `(seed, step)` for per-step sampling and by
//! `(seed, epoch)` for data order, so a run resumed from a checkpoint at
//! step `s` draws exactly what an uninterrupted run would.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{sample_negatives, total_loss, AlignmentBatch, LossBreakdown, LossNodes, ETA_INIT, TAU_DEFAULT};
use crate::corpus::CorpusConfig;
use crate::data::{Dataset, PreparedPair};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{Ablation, ModelConfig, PathFlip};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::tensor::{Matrix, Real};
use crate::text::sample_subcaptions;

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4521;
const STEP_SALT: u64 = 0x5354_4550_5f52_4e47;
const INSTRUCT_SALT: u64 = 0x494e_5354_5255_4354;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 256.0 / 340.0,
            val: 20.0 / 340.0,
            test: 64.0 / 340.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub d: usize,
    pub d_dec: usize,
    pub n_queries: usize,
    pub qformer_blocks: usize,
    pub text_layers: usize,
    pub decoder_layers: usize,
    /// Seed of the frozen random patch encoder.
    pub encoder_seed: u64,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d: 32,
            d_dec: 32,
            n_queries: 4,
            qformer_blocks: 2,
            text_layers: 1,
            decoder_layers: 1,
            encoder_seed: 11,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossParams {
    /// Subcaptions per pair.
    pub k: usize,
    pub p_keep: f64,
    pub tau: f64,
    pub eta_init: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            k: 8,
            p_keep: 0.5,
            tau: TAU_DEFAULT,
            eta_init: ETA_INIT,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub batch_size: usize,
    /// Write `step_<n>.ckpt` every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            steps: 2000,
            batch_size: 16,
            checkpoint_every: 0,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstructConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Also train the query transformer during instruction tuning.
    pub unfreeze_visual: bool,
    pub max_answer_len: usize,
}

impl Default for InstructConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: 1e-3,
            unfreeze_visual: false,
            max_answer_len: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub split: SplitConfig,
    pub model: ModelDims,
    pub loss: LossParams,
    pub optim: OptimConfig,
    pub instruct: InstructConfig,
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            split: SplitConfig::default(),
            model: ModelDims::default(),
            loss: LossParams::default(),
            optim: OptimConfig::default(),
            instruct: InstructConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl RunConfig {
    /// Query count and batch size of the full-scale setup.
    pub fn paper() -> Self {
        let mut c = Self::default();
        c.model.n_queries = 8;
        c.optim.batch_size = 64;
        c
    }

    /// Applies one `--ablate` flag.
    pub fn ablate(mut self, flag: &str) -> Result<Self> {
        self.ablation = self.ablation.disable(flag)?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        let l = &self.loss;
        if l.k == 0 || !(l.p_keep > 0.0 && l.p_keep <= 1.0) || !(l.tau > 0.0) || !l.eta_init.is_finite() {
            return Err(Error::Config(format!("invalid loss parameters {l:?}")));
        }
        let o = &self.optim;
        if o.batch_size == 0 || !(o.lr > 0.0) {
            return Err(Error::Config("batch_size and lr must be positive".into()));
        }
        if self.instruct.batch_size == 0 || !(self.instruct.lr > 0.0) || self.instruct.max_answer_len == 0 {
            return Err(Error::Config("instruct batch_size, lr and max_answer_len must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize, text_max_len: usize, decoder_max_text: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            text_max_len,
            d: self.model.d,
            n_queries: self.model.n_queries,
            qformer_blocks: self.model.qformer_blocks,
            text_layers: self.model.text_layers,
            d_dec: self.model.d_dec,
            decoder_layers: self.model.decoder_layers,
            decoder_max_text,
            regions_per_slide: self.corpus.regions_per_slide,
            eta_init: self.loss.eta_init,
            ablation: self.ablation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Pretrain,
    Instruct,
}

/// One optimization step's record, with losses measured before the update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the update.
    pub step: u64,
    pub stage: Stage,
    pub losses: LossBreakdown,
    pub l_lm: f64,
    pub lr: f64,
}

fn step_rng(seed: u64, salt: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(step);
    rng
}

/// Training-set indices used at `step`: consecutive slices of a per-epoch
/// permutation, dropping the remainder of each epoch.
pub fn batch_indices(n: usize, batch: usize, seed: u64, salt: u64, step: u64) -> Vec<usize> {
    let b = batch.min(n);
    let per_epoch = (n / b) as u64;
    let (epoch, within) = (step / per_epoch, (step % per_epoch) as usize);
    let mut rng = step_rng(seed, salt ^ SHUFFLE_SALT, epoch);
    let perm = rand::seq::index::sample(&mut rng, n, n).into_vec();
    perm[within * b..(within + 1) * b].to_vec()
}

/// Builds the pretraining objective for `pairs` on `g`.
pub fn pretrain_graph<T: Real, R: Rng + ?Sized>(
    model: &PathFlip,
    g: &mut Graph<'_, T>,
    pairs: &[&PreparedPair],
    loss: &LossParams,
    rng: &mut R,
) -> Result<LossNodes> {
    let lc = model.loss_config(loss.tau);
    let mut batch = AlignmentBatch {
        regions: Vec::new(),
        pooled: Vec::new(),
        subcaptions: Vec::new(),
        text: Vec::new(),
        negatives: Vec::new(),
    };
    for pair in pairs {
        let feats = PathFlip::feature_nodes(g, &pair.features);
        let vis = model.visual(g, &feats, false)?;
        batch.pooled.push(vis.pooled);
        batch.text.push(model.encode_text(g, &pair.caption_ids())?);
        if lc.region.is_some() {
            batch.regions.push(vis.regions.expect("region pathway is on"));
            let subs = sample_subcaptions(&pair.sentences, loss.k, loss.p_keep, rng)?;
            let mut seen: BTreeMap<Vec<usize>, NodeId> = BTreeMap::new();
            let mut rows = Vec::with_capacity(subs.len());
            for s in subs {
                let node = match seen.get(&s.indices) {
                    Some(&n) => n,
                    None => {
                        let n = model.encode_text(g, &s.tokens)?;
                        seen.insert(s.indices, n);
                        n
                    }
                };
                rows.push(node);
            }
            batch.subcaptions.push(g.concat_rows(&rows));
        }
    }
    if lc.region.is_some() {
        let counts: Vec<usize> = batch.subcaptions.iter().map(|&s| g.shape(s).0).collect();
        batch.negatives = (0..pairs.len()).map(|i| sample_negatives(i, &counts, rng)).collect();
    }
    total_loss(g, &batch, model.eta, &lc)
}

/// Frozen visual outputs feeding the instruction prefix: `(slide N_q × d, regions (N·N_q) × d)`.
pub type VisualPrefix = (Matrix<f32>, Matrix<f32>);

pub fn visual_prefix_inputs(model: &PathFlip, store: &ParamStore<f32>, pair: &PreparedPair) -> Result<VisualPrefix> {
    let mut g = Graph::new(store);
    let feats = PathFlip::feature_nodes(&mut g, &pair.features);
    let v = model.visual(&mut g, &feats, true)?;
    let regions = v.regions.expect("regions requested");
    Ok((g.value(v.slide).clone(), g.value(regions).clone()))
}

/// Mean over records of the summed answer loss.
pub fn instruct_graph<T: Real>(
    model: &PathFlip,
    g: &mut Graph<'_, T>,
    records: &[(&PreparedPair, usize)],
    frozen: Option<&[&VisualPrefix]>,
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(records.len());
    for (i, &(pair, r)) in records.iter().enumerate() {
        let (slide, regions) = match frozen {
            Some(cache) => (g.constant(cache[i].0.cast()), g.constant(cache[i].1.cast())),
            None => {
                let feats = PathFlip::feature_nodes(g, &pair.features);
                let v = model.visual(g, &feats, true)?;
                (v.slide, v.regions.expect("regions requested"))
            }
        };
        let prefix = model.head.build_prefix(g, slide, regions)?;
        let (prompt, target) = &pair.instructions[r];
        terms.push(model.head.lm_loss(g, prefix, prompt, target)?.total);
    }
    let stacked = g.concat_rows(&terms);
    Ok(g.mean(stacked))
}

/// Model, parameters, optimizer state and position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: PathFlip,
    pub store: ParamStore<f32>,
    pub optim: AdamW<f32>,
    pub stage: Stage,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: RunConfig, model_config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = PathFlip::init::<f32>(model_config, config.seed)?;
        let optim = AdamW::new(config.optim.adamw(), &store);
        Ok(Self {
            config,
            model,
            store,
            optim,
            stage: Stage::Pretrain,
            step: 0,
        })
    }

    /// Switches to instruction tuning with a fresh optimizer.
    pub fn begin_instruct(&mut self) {
        let mut a = self.config.optim.adamw();
        a.lr = self.config.instruct.lr;
        self.optim = AdamW::new(a, &self.store);
        self.stage = Stage::Instruct;
        self.step = 0;
    }

    pub fn target_steps(&self) -> u64 {
        match self.stage {
            Stage::Pretrain => self.config.optim.steps,
            Stage::Instruct => self.config.instruct.steps,
        }
    }

    pub fn trainable(&self) -> Vec<bool> {
        let unfreeze = self.config.instruct.unfreeze_visual;
        self.store
            .entries()
            .iter()
            .map(|e| {
                let head = PathFlip::is_head_param(&e.name);
                match self.stage {
                    Stage::Pretrain => !head,
                    Stage::Instruct => head || (unfreeze && e.group() == "qformer"),
                }
            })
            .collect()
    }

    fn pretrain_step(&mut self, data: &Dataset, trainable: &[bool]) -> Result<StepRecord> {
        let seed = self.config.seed;
        let idx = batch_indices(data.len(), self.config.optim.batch_size, seed, STEP_SALT, self.step);
        let pairs: Vec<&PreparedPair> = idx.iter().map(|&i| &data.pairs[i]).collect();
        let mut rng = step_rng(seed, STEP_SALT, self.step);
        let step = self.step + 1;
        let (losses, grads) = {
            let mut g = Graph::new(&self.store);
            let nodes = match pretrain_graph(&self.model, &mut g, &pairs, &self.config.loss, &mut rng) {
                Err(Error::NonFinite(_)) => return Err(Error::NonFiniteLoss { step, term: "L_region" }),
                other => other?,
            };
            let eta = self.store.get(self.model.eta).item().f64();
            let lb = nodes.breakdown(&g, eta, self.config.loss.tau);
            for (term, v) in [
                ("L_region", lb.l_region),
                ("L_i2t", lb.l_i2t),
                ("L_t2i", lb.l_t2i),
                ("L_slide", lb.l_slide),
                ("L_total", lb.l_total),
            ] {
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss { step, term });
                }
            }
            (lb, g.backward(nodes.total))
        };
        self.optim.update(&mut self.store, &grads, trainable);
        self.step = step;
        Ok(StepRecord {
            step,
            stage: Stage::Pretrain,
            losses,
            l_lm: 0.0,
            lr: self.optim.config.lr,
        })
    }

    fn instruct_records(data: &Dataset) -> Vec<(usize, usize)> {
        data.pairs
            .iter()
            .enumerate()
            .flat_map(|(i, p)| (0..p.instructions.len()).map(move |r| (i, r)))
            .collect()
    }

    fn instruct_step(&mut self, data: &Dataset, cache: Option<&[VisualPrefix]>, trainable: &[bool]) -> Result<StepRecord> {
        let records = Self::instruct_records(data);
        if records.is_empty() {
            return Err(Error::Empty("no instruction records".into()));
        }
        let idx = batch_indices(records.len(), self.config.instruct.batch_size, self.config.seed, INSTRUCT_SALT, self.step);
        let chosen: Vec<(&PreparedPair, usize)> = idx.iter().map(|&i| (&data.pairs[records[i].0], records[i].1)).collect();
        let frozen: Option<Vec<&VisualPrefix>> = cache.map(|c| idx.iter().map(|&i| &c[records[i].0]).collect());
        let step = self.step + 1;
        let (l, grads) = {
            let mut g = Graph::new(&self.store);
            let loss = instruct_graph(&self.model, &mut g, &chosen, frozen.as_deref())?;
            let l = g.value(loss).item().f64();
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { step, term: "L_lm" });
            }
            (l, g.backward(loss))
        };
        self.optim.update(&mut self.store, &grads, trainable);
        self.step = step;
        Ok(StepRecord {
            step,
            stage: Stage::Instruct,
            losses: LossBreakdown::default(),
            l_lm: l,
            lr: self.optim.config.lr,
        })
    }

    /// Runs updates until `self.step == until`, calling `on_step` after each.
    pub fn train_until<E: From<Error>>(
        &mut self,
        data: &Dataset,
        until: u64,
        mut on_step: impl FnMut(&Self, &StepRecord) -> core::result::Result<(), E>,
    ) -> core::result::Result<(), E> {
        if data.is_empty() {
            return Err(Error::Empty("training set".into()).into());
        }
        let trainable = self.trainable();
        let cache = match (self.stage, self.config.instruct.unfreeze_visual) {
            (Stage::Instruct, false) if self.step < until => Some(
                data.pairs
                    .iter()
                    .map(|p| visual_prefix_inputs(&self.model, &self.store, p))
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => None,
        };
        while self.step < until {
            let rec = match self.stage {
                Stage::Pretrain => self.pretrain_step(data, &trainable)?,
                Stage::Instruct => self.instruct_step(data, cache.as_deref(), &trainable)?,
            };
            on_step(self, &rec)?;
        }
        Ok(())
    }
}
