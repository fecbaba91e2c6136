//! Building blocks shared by the text encoder, the query transformer, and the decoder.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::graph::{Graph, NodeId};
use crate::params::{linear_weight, ParamId, ParamStore};
use crate::tensor::{Matrix, Real};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.add(&format!("{prefix}.gain"), Matrix::filled(1, d, T::one()), false),
            bias: store.add(&format!("{prefix}.bias"), Matrix::zeros(1, d), false),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, T::of(LN_EPS))
    }
}

/// Single-head scaled dot-product attention with output projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl Attention {
    pub fn register<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut R) -> Self {
        Self {
            wq: store.add(&format!("{prefix}.wq"), linear_weight(d, d, rng), true),
            wk: store.add(&format!("{prefix}.wk"), linear_weight(d, d, rng), true),
            wv: store.add(&format!("{prefix}.wv"), linear_weight(d, d, rng), true),
            wo: store.add(&format!("{prefix}.wo"), linear_weight(d, d, rng), true),
        }
    }

    /// Attention weights `softmax(q Wq (kv Wk)ᵀ / √d)`, rows = queries.
    pub fn weights<T: Real>(&self, g: &mut Graph<'_, T>, queries: NodeId, keys: NodeId, mask: Option<Vec<bool>>) -> NodeId {
        let d = g.shape(queries).1;
        let wq = g.param(self.wq);
        let wk = g.param(self.wk);
        let q = g.matmul(queries, wq);
        let k = g.matmul(keys, wk);
        let logits = g.matmul_t(q, k);
        let logits = g.scale(logits, T::one() / Float::sqrt(T::of(d as f64)));
        match mask {
            Some(m) => g.softmax_rows_masked(logits, m),
            None => g.softmax_rows(logits),
        }
    }

    /// Attention output before `Wo`: weights · (kv Wv).
    pub fn attend<T: Real>(&self, g: &mut Graph<'_, T>, queries: NodeId, keys: NodeId, mask: Option<Vec<bool>>) -> NodeId {
        let a = self.weights(g, queries, keys, mask);
        let wv = g.param(self.wv);
        let v = g.matmul(keys, wv);
        g.matmul(a, v)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, queries: NodeId, keys: NodeId, mask: Option<Vec<bool>>) -> NodeId {
        let h = self.attend(g, queries, keys, mask);
        let wo = g.param(self.wo);
        g.matmul(h, wo)
    }
}

/// `W2 · gelu(W1 x + b1) + b2` with hidden width `mult · d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w1: store.add(&format!("{prefix}.w1"), linear_weight(d, hidden, rng), true),
            b1: store.add(&format!("{prefix}.b1"), Matrix::zeros(1, hidden), false),
            w2: store.add(&format!("{prefix}.w2"), linear_weight(hidden, d, rng), true),
            b2: store.add(&format!("{prefix}.b2"), Matrix::zeros(1, d), false),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.gelu(h);
        let o = g.matmul(h, w2);
        g.add_row(o, b2)
    }
}

/// Affine map `x W + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add(&format!("{prefix}.weight"), linear_weight(d_in, d_out, rng), true),
            bias: store.add(&format!("{prefix}.bias"), Matrix::zeros(1, d_out), false),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }
}

/// Looks up a required parameter by name.
pub fn lookup<T: Real>(store: &ParamStore<T>, name: &str) -> crate::Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| crate::Error::MissingParam(name.into()))
}
