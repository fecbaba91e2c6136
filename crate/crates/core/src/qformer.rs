//! Query transformer shared by the region and slide levels.
//!
//! A fixed set of learned query tokens self-attends, cross-attends to a bag
//! of patch features, and passes through a feed-forward layer, each sub-layer
//! pre-normed with a residual connection. Patch features carry no positional
//! encoding, so the output is invariant to the order of patch rows.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{Attention, FeedForward, LayerNorm};
use crate::params::{normal_matrix, ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QFormerConfig {
    pub d: usize,
    pub num_queries: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QFormerBlock {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

/// One parameter set (queries included) serving both region and slide inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct QFormer {
    pub config: QFormerConfig,
    pub queries: ParamId,
    pub blocks: Vec<QFormerBlock>,
    pub ln_out: LayerNorm,
}

impl QFormer {
    pub fn register<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: QFormerConfig, rng: &mut R) -> Self {
        let d = config.d;
        let queries = store.add("qformer.queries", normal_matrix(config.num_queries, d, 1.0, rng), false);
        let blocks = (0..config.blocks)
            .map(|b| {
                let p = format!("qformer.block{b}");
                QFormerBlock {
                    ln_self: LayerNorm::register(store, &format!("{p}.ln_self"), d),
                    self_attn: Attention::register(store, &format!("{p}.self_attn"), d, rng),
                    ln_cross: LayerNorm::register(store, &format!("{p}.ln_cross"), d),
                    cross_attn: Attention::register(store, &format!("{p}.cross_attn"), d, rng),
                    ln_ffn: LayerNorm::register(store, &format!("{p}.ln_ffn"), d),
                    ffn: FeedForward::register(store, &format!("{p}.ffn"), d, 4 * d, rng),
                }
            })
            .collect();
        let ln_out = LayerNorm::register(store, "qformer.ln_out", d);
        Self {
            config,
            queries,
            blocks,
            ln_out,
        }
    }

    fn check_features<T: Real>(&self, g: &Graph<'_, T>, features: NodeId) -> Result<()> {
        let (rows, cols) = g.shape(features);
        if rows == 0 {
            return Err(Error::Empty("visual feature matrix has no rows".into()));
        }
        if cols != self.config.d {
            return Err(Error::Shape(format!(
                "visual features have dim {cols}, query transformer expects {}",
                self.config.d
            )));
        }
        Ok(())
    }

    /// `N_q × d` embedding of a bag of `rows × d` patch features.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, features: NodeId) -> Result<NodeId> {
        self.check_features(g, features)?;
        let mut h = g.param(self.queries);
        for b in &self.blocks {
            let x = b.ln_self.forward(g, h);
            let a = b.self_attn.forward(g, x, x, None);
            h = g.add(h, a);
            let x = b.ln_cross.forward(g, h);
            let c = b.cross_attn.forward(g, x, features, None);
            h = g.add(h, c);
            let x = b.ln_ffn.forward(g, h);
            let f = b.ffn.forward(g, x);
            h = g.add(h, f);
        }
        Ok(self.ln_out.forward(g, h))
    }

    /// Region embeddings stacked in region order, `(N · N_q) × d`.
    pub fn region_embeddings<T: Real>(&self, g: &mut Graph<'_, T>, regions: &[NodeId]) -> Result<NodeId> {
        if regions.is_empty() {
            return Err(Error::Empty("slide has no regions".into()));
        }
        let outs = regions
            .iter()
            .map(|&r| self.forward(g, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(g.concat_rows(&outs))
    }

    /// Slide embedding from the full `MN × d` patch set, `N_q × d`.
    pub fn slide_embedding<T: Real>(&self, g: &mut Graph<'_, T>, slide: NodeId) -> Result<NodeId> {
        self.forward(g, slide)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal_matrix;
    use crate::tensor::Matrix;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(d: usize, nq: usize, blocks: usize, seed: u64) -> (ParamStore<f64>, QFormer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qf = QFormer::register(
            &mut store,
            QFormerConfig {
                d,
                num_queries: nq,
                blocks,
            },
            &mut rng,
        );
        (store, qf)
    }

    fn run(store: &ParamStore<f64>, qf: &QFormer, v: &Matrix<f64>) -> Matrix<f64> {
        let mut g = Graph::new(store);
        let v = g.constant(v.clone());
        let out = qf.forward(&mut g, v).unwrap();
        g.value(out).clone()
    }

    fn close(a: &Matrix<f64>, b: &Matrix<f64>, tol: f64) -> bool {
        a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn single_key_cross_attention_returns_projected_value() {
        let (store, qf) = build(3, 2, 1, 1);
        let mut g = Graph::new(&store);
        let v = Matrix::from_rows(&[&[0.4, -1.0, 2.0]]);
        let vn = g.constant(v.clone());
        let q = g.param(qf.queries);
        let out = qf.blocks[0].cross_attn.attend(&mut g, q, vn, None);
        let want = v.matmul(store.get(qf.blocks[0].cross_attn.wv));
        for r in 0..2 {
            for c in 0..3 {
                assert!((g.value(out)[(r, c)] - want[(0, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_rows_match_single_row() {
        let (store, qf) = build(4, 2, 2, 2);
        let v = Matrix::from_rows(&[&[0.4, -1.0, 2.0, 0.1]]);
        let dup = Matrix::concat_rows(&[&v, &v]);
        assert!(close(&run(&store, &qf, &v), &run(&store, &qf, &dup), 1e-12));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let (store, qf) = build(4, 2, 1, 2);
        let mut g = Graph::new(&store);
        let v = g.constant(Matrix::zeros(3, 5));
        assert!(qf.forward(&mut g, v).is_err());
        let e = g.constant(Matrix::zeros(0, 4));
        assert!(qf.forward(&mut g, e).is_err());
    }

    // Independent scalar re-implementation for N_q = 1, d = 2, one block.
    #[test]
    fn one_query_block_matches_scalar_oracle() {
        let (store, qf) = build(2, 1, 1, 9);
        let v = Matrix::from_rows(&[&[0.5, -0.3], &[1.2, 0.8], &[-0.7, 0.1]]);
        let got = run(&store, &qf, &v);

        let p = |id: ParamId| store.get(id).clone();
        let b = &qf.blocks[0];
        let ln = |x: [f64; 2], l: &LayerNorm| {
            let (g, bb) = (p(l.gain), p(l.bias));
            let m = (x[0] + x[1]) / 2.0;
            let var = ((x[0] - m).powi(2) + (x[1] - m).powi(2)) / 2.0;
            let s = 1.0 / (var + 1e-5).sqrt();
            [(x[0] - m) * s * g[(0, 0)] + bb[(0, 0)], (x[1] - m) * s * g[(0, 1)] + bb[(0, 1)]]
        };
        let mv = |x: [f64; 2], w: &Matrix<f64>| -> Vec<f64> {
            (0..w.cols()).map(|j| x[0] * w[(0, j)] + x[1] * w[(1, j)]).collect()
        };
        let two = |x: Vec<f64>| [x[0], x[1]];
        let q0 = p(qf.queries);
        let mut h = [q0[(0, 0)], q0[(0, 1)]];
        // self-attention over one query: weight 1 on itself
        let x = ln(h, &b.ln_self);
        let sa = two(mv(two(mv(x, &p(b.self_attn.wv))), &p(b.self_attn.wo)));
        h = [h[0] + sa[0], h[1] + sa[1]];
        // cross-attention onto the three rows
        let x = ln(h, &b.ln_cross);
        let q = mv(x, &p(b.cross_attn.wq));
        let rows: Vec<[f64; 2]> = (0..3).map(|r| [v[(r, 0)], v[(r, 1)]]).collect();
        let logits: Vec<f64> = rows
            .iter()
            .map(|&r| {
                let k = mv(r, &p(b.cross_attn.wk));
                (q[0] * k[0] + q[1] * k[1]) / 2f64.sqrt()
            })
            .collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut att = [0.0; 2];
        for (w, &r) in e.iter().zip(&rows) {
            let val = mv(r, &p(b.cross_attn.wv));
            att[0] += w / z * val[0];
            att[1] += w / z * val[1];
        }
        let ca = two(mv(att, &p(b.cross_attn.wo)));
        h = [h[0] + ca[0], h[1] + ca[1]];
        let x = ln(h, &b.ln_ffn);
        let (w1, b1, w2, b2) = (p(b.ffn.w1), p(b.ffn.b1), p(b.ffn.w2), p(b.ffn.b2));
        let hid: Vec<f64> = mv(x, &w1)
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let u = s + b1[(0, j)];
                0.5 * u * (1.0 + ((2.0 / core::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh())
            })
            .collect();
        let mut f = [b2[(0, 0)], b2[(0, 1)]];
        for (j, hv) in hid.iter().enumerate() {
            f[0] += hv * w2[(j, 0)];
            f[1] += hv * w2[(j, 1)];
        }
        h = [h[0] + f[0], h[1] + f[1]];
        let want = ln(h, &qf.ln_out);
        assert!((got[(0, 0)] - want[0]).abs() < 1e-12);
        assert!((got[(0, 1)] - want[1]).abs() < 1e-12);
    }

    #[test]
    fn region_embeddings_compose_independent_forwards() {
        let (store, qf) = build(4, 3, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Matrix<f64> = normal_matrix(5, 4, 1.0, &mut rng);
        let b: Matrix<f64> = normal_matrix(5, 4, 1.0, &mut rng);
        let mut g = Graph::new(&store);
        let (an, bn) = (g.constant(a.clone()), g.constant(b.clone()));
        let one = qf.region_embeddings(&mut g, &[an]).unwrap();
        assert!(close(g.value(one), &run(&store, &qf, &a), 0.0));
        let ab = qf.region_embeddings(&mut g, &[an, bn]).unwrap();
        let ba = qf.region_embeddings(&mut g, &[bn, an]).unwrap();
        let want = Matrix::concat_rows(&[&run(&store, &qf, &a), &run(&store, &qf, &b)]);
        assert!(close(g.value(ab), &want, 0.0));
        assert!(close(&g.value(ba).slice_rows(0, 3), &g.value(ab).slice_rows(3, 3), 0.0));
        assert!(close(&g.value(ba).slice_rows(3, 3), &g.value(ab).slice_rows(0, 3), 0.0));
    }

    #[test]
    fn slide_and_region_agree_on_single_patch() {
        let (store, qf) = build(4, 2, 2, 6);
        let v = Matrix::from_rows(&[&[0.1, 0.2, -0.3, 0.9]]);
        let mut g = Graph::new(&store);
        let n = g.constant(v);
        let r = qf.region_embeddings(&mut g, &[n]).unwrap();
        let s = qf.slide_embedding(&mut g, n).unwrap();
        assert_eq!(g.value(r), g.value(s));
    }

    #[test]
    fn mutating_shared_parameters_changes_both_levels() {
        let (mut store, qf) = build(4, 2, 1, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v: Matrix<f64> = normal_matrix(6, 4, 1.0, &mut rng);
        let eval = |store: &ParamStore<f64>| {
            let mut g = Graph::new(store);
            let full = g.constant(v.clone());
            let region = g.constant(v.slice_rows(0, 3));
            let r = qf.region_embeddings(&mut g, &[region]).unwrap();
            let s = qf.slide_embedding(&mut g, full).unwrap();
            (g.value(r).clone(), g.value(s).clone())
        };
        let (r0, s0) = eval(&store);
        store.get_mut(qf.blocks[0].cross_attn.wv)[(0, 0)] += 0.5;
        let (r1, s1) = eval(&store);
        assert_ne!(r0, r1);
        assert_ne!(s0, s1);
        store.get_mut(qf.queries)[(1, 2)] += 0.5;
        let (r2, s2) = eval(&store);
        assert_ne!(r1, r2);
        assert_ne!(s1, s2);
    }

    proptest! {
        #[test]
        fn output_is_invariant_to_patch_order(seed in 0u64..500, rows in 2usize..7) {
            let (store, qf) = build(4, 2, 2, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let v: Matrix<f64> = normal_matrix(rows, 4, 1.0, &mut rng);
            let perm = rand::seq::index::sample(&mut rng, rows, rows).into_vec();
            let parts: Vec<Matrix<f64>> = perm.iter().map(|&i| v.slice_rows(i, 1)).collect();
            let refs: Vec<&Matrix<f64>> = parts.iter().collect();
            let pv = Matrix::concat_rows(&refs);
            prop_assert!(close(&run(&store, &qf, &v), &run(&store, &qf, &pv), 1e-6));
        }
    }
}
