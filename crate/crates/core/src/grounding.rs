//! Text-conditioned region localization.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::alignment::{attention_weights, AttentionProjections};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::ParamStore;
use crate::tensor::{Matrix, Real};

pub const DEFAULT_MARGIN: f64 = 2.0;

/// Per-region attention mass for one text query; scores sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScoreMap {
    pub slide_id: String,
    /// `(cols, rows)` of the region grid.
    pub grid: (usize, usize),
    /// Row-major over the grid.
    pub scores: Vec<f64>,
}

impl RegionScoreMap {
    pub fn num_regions(&self) -> usize {
        self.scores.len()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

/// Attention of the `1 × d` text embedding over `v^reg`, summed per region block.
///
/// With `proj = None` (no text-region attention layer) every row gets equal weight,
/// which is how such a model reads its regions.
pub fn region_attention_scores<T: Real>(
    store: &ParamStore<T>,
    proj: Option<&AttentionProjections>,
    text: &Matrix<T>,
    regions: &Matrix<T>,
    num_regions: usize,
    num_queries: usize,
) -> Result<Vec<f64>> {
    if num_regions == 0 || num_queries == 0 || regions.rows() != num_regions * num_queries {
        return Err(Error::Shape(format!(
            "region embeddings have {} rows, expected {num_regions} x {num_queries}",
            regions.rows()
        )));
    }
    if text.rows() != 1 || text.cols() != regions.cols() {
        return Err(Error::Shape(format!(
            "text embedding shape {:?} does not match region dim {}",
            text.shape(),
            regions.cols()
        )));
    }
    let weights: Vec<T> = match proj {
        Some(p) => {
            let mut g = Graph::new(store);
            let q = g.constant(text.clone());
            let r = g.constant(regions.clone());
            let a = attention_weights(&mut g, p, q, r)?;
            g.value(a).data().to_vec()
        }
        None => alloc::vec![T::one() / T::of(regions.rows() as f64); regions.rows()],
    };
    Ok(weights
        .chunks(num_queries)
        .map(|c| c.iter().map(|w| w.f64()).sum())
        .collect())
}

/// `score(planted) ≥ margin / N`.
pub fn grounding_hit(map: &RegionScoreMap, planted: usize, margin: f64) -> bool {
    let n = map.num_regions();
    planted < n && map.scores[planted] >= margin / n as f64
}

/// 8-bit gray level for a score in `[0, 1]`, rounding half up.
pub fn score_to_gray(score: f64) -> u8 {
    let v = Float::floor(score.clamp(0.0, 1.0) * 255.0 + 0.5);
    v as u8
}
