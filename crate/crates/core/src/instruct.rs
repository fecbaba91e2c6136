//! Small causal decoder conditioned on a projected visual prefix.
//!
//! Sequence layout: `[prompt][σ(visual prefix)][BOS, target_0 … target_{L−2}]`.
//! Position `P + V + j` predicts `target_j`. Visual rows carry their own
//! position table; prompt and answer tokens share the text table.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{Attention, FeedForward, LayerNorm, Linear};
use crate::params::{normal_matrix, ParamId, ParamStore};
use crate::tensor::{Matrix, Real};
use crate::text::{BOS, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    /// Width of visual embeddings entering `σ`.
    pub d_visual: usize,
    pub d_model: usize,
    pub layers: usize,
    /// Prompt plus answer tokens.
    pub max_text: usize,
    pub max_prefix: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstructionHead {
    pub config: DecoderConfig,
    pub sigma: Linear,
    pub token_embedding: ParamId,
    pub text_position: ParamId,
    pub prefix_position: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub ln_out: LayerNorm,
    pub out: Linear,
}

/// Summed target loss and its per-position terms (`L_t × 1`).
#[derive(Clone, Copy, Debug)]
pub struct LmLoss {
    pub total: NodeId,
    pub per_token: NodeId,
}

/// `true` marks a blocked (future) key.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|i| i % len > i / len).collect()
}

impl InstructionHead {
    pub fn register<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: DecoderConfig, rng: &mut R) -> Self {
        let d = config.d_model;
        let sigma = Linear::register(store, "sigma", config.d_visual, d, rng);
        let token_embedding = store.add("decoder.token_embedding", normal_matrix(config.vocab_size, d, 1.0, rng), false);
        let text_position = store.add("decoder.text_position", normal_matrix(config.max_text, d, 0.1, rng), false);
        let prefix_position = store.add("decoder.prefix_position", normal_matrix(config.max_prefix, d, 0.1, rng), false);
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("decoder.layer{l}");
                DecoderLayer {
                    ln_attn: LayerNorm::register(store, &format!("{p}.ln_attn"), d),
                    attn: Attention::register(store, &format!("{p}.attn"), d, rng),
                    ln_ffn: LayerNorm::register(store, &format!("{p}.ln_ffn"), d),
                    ffn: FeedForward::register(store, &format!("{p}.ffn"), d, 4 * d, rng),
                }
            })
            .collect();
        let ln_out = LayerNorm::register(store, "decoder.ln_out", d);
        let out = Linear::register(store, "decoder.out", d, config.vocab_size, rng);
        Self {
            config,
            sigma,
            token_embedding,
            text_position,
            prefix_position,
            layers,
            ln_out,
            out,
        }
    }

    /// `σ([v^i; v^i_1; …; v^i_N])`, slide block first.
    pub fn build_prefix<T: Real>(&self, g: &mut Graph<'_, T>, slide: NodeId, regions: NodeId) -> Result<NodeId> {
        let (sr, sd) = g.shape(slide);
        let (rr, rd) = g.shape(regions);
        if rr == 0 {
            return Err(Error::Empty("visual prefix needs at least one region".into()));
        }
        if sr == 0 || sd != self.config.d_visual || rd != self.config.d_visual {
            return Err(Error::Shape(format!(
                "prefix inputs {:?} and {:?}, expected width {}",
                (sr, sd),
                (rr, rd),
                self.config.d_visual
            )));
        }
        if sr + rr > self.config.max_prefix {
            return Err(Error::TooLong {
                len: sr + rr,
                max: self.config.max_prefix,
            });
        }
        let cat = g.concat_rows(&[slide, regions]);
        Ok(self.sigma.forward(g, cat))
    }

    fn check_tokens(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(t) => Err(Error::OutOfRange(format!("token id {t} outside vocabulary of {}", self.config.vocab_size))),
            None => Ok(()),
        }
    }

    /// Input embeddings of the whole sequence, `(P + V + I) × d_model`.
    pub fn embed<T: Real>(&self, g: &mut Graph<'_, T>, prefix: NodeId, prompt: &[u32], inputs: &[u32]) -> Result<NodeId> {
        self.check_tokens(prompt)?;
        self.check_tokens(inputs)?;
        let text_len = prompt.len() + inputs.len();
        if text_len > self.config.max_text {
            return Err(Error::TooLong {
                len: text_len,
                max: self.config.max_text,
            });
        }
        let v = g.shape(prefix).0;
        if v > self.config.max_prefix || g.shape(prefix).1 != self.config.d_model {
            return Err(Error::Shape(format!("prefix shape {:?}", g.shape(prefix))));
        }
        let table = g.param(self.token_embedding);
        let tpos = g.param(self.text_position);
        let ppos = g.param(self.prefix_position);
        let mut parts = Vec::with_capacity(3);
        if !prompt.is_empty() {
            let ids: Vec<usize> = prompt.iter().map(|&t| t as usize).collect();
            let e = g.gather_rows(table, &ids);
            let p = g.slice_rows(tpos, 0, prompt.len());
            parts.push(g.add(e, p));
        }
        let p = g.slice_rows(ppos, 0, v);
        parts.push(g.add(prefix, p));
        if !inputs.is_empty() {
            let ids: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
            let e = g.gather_rows(table, &ids);
            let p = g.slice_rows(tpos, prompt.len(), inputs.len());
            parts.push(g.add(e, p));
        }
        Ok(g.concat_rows(&parts))
    }

    /// Causal transformer over embedded positions, returning vocabulary logits for every position.
    pub fn forward_embedded<T: Real>(&self, g: &mut Graph<'_, T>, seq: NodeId) -> NodeId {
        let len = g.shape(seq).0;
        let mut h = seq;
        for layer in &self.layers {
            let x = layer.ln_attn.forward(g, h);
            let a = layer.attn.forward(g, x, x, Some(causal_mask(len)));
            h = g.add(h, a);
            let x = layer.ln_ffn.forward(g, h);
            let f = layer.ffn.forward(g, x);
            h = g.add(h, f);
        }
        let x = self.ln_out.forward(g, h);
        self.out.forward(g, x)
    }

    /// Logits at the positions of `inputs`, `inputs.len() × vocab`.
    pub fn logits<T: Real>(&self, g: &mut Graph<'_, T>, prefix: NodeId, prompt: &[u32], inputs: &[u32]) -> Result<NodeId> {
        let seq = self.embed(g, prefix, prompt, inputs)?;
        let all = self.forward_embedded(g, seq);
        let start = prompt.len() + g.shape(prefix).0;
        Ok(g.slice_rows(all, start, inputs.len()))
    }

    /// Teacher-forced `Σ_j −log P(target_j | target_<j, prefix, prompt)`; PAD targets are skipped.
    pub fn lm_loss<T: Real>(&self, g: &mut Graph<'_, T>, prefix: NodeId, prompt: &[u32], targets: &[u32]) -> Result<LmLoss> {
        if targets.is_empty() {
            return Err(Error::Empty("target sequence is empty".into()));
        }
        self.check_tokens(targets)?;
        let mut inputs = Vec::with_capacity(targets.len());
        inputs.push(BOS);
        inputs.extend_from_slice(&targets[..targets.len() - 1]);
        let logits = self.logits(g, prefix, prompt, &inputs)?;
        let labels = targets
            .iter()
            .map(|&t| (t != PAD).then_some(t as usize))
            .collect();
        let per_token = g.cross_entropy_rows(logits, labels);
        let total = g.sum(per_token);
        Ok(LmLoss { total, per_token })
    }

    /// Greedy decoding from a computed prefix; ties go to the lowest id. The EOS token, if produced, is included.
    /// Stops early when the text positions run out.
    pub fn generate<T: Real>(&self, store: &ParamStore<T>, prefix: &Matrix<T>, prompt: &[u32], max_len: usize) -> Result<Vec<u32>> {
        let mut inputs = alloc::vec![BOS];
        let mut out = Vec::new();
        while out.len() < max_len && prompt.len() + inputs.len() <= self.config.max_text {
            let mut g = Graph::new(store);
            let p = g.constant(prefix.clone());
            let logits = self.logits(&mut g, p, prompt, &inputs)?;
            let row = g.value(logits).row(inputs.len() - 1);
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            let tok = best as u32;
            out.push(tok);
            if tok == EOS {
                break;
            }
            inputs.push(tok);
        }
        Ok(out)
    }
}
