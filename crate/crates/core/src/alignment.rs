//! Pretraining objective: text-conditioned region attention, the region-level
//! sigmoid contrastive loss, and the global symmetric InfoNCE loss.
//!
//! The two similarities differ on purpose. Region terms use the raw dot
//! product `⟨v^tc_l, t^sub_l⟩` scaled by the learned `η`; global terms use
//! cosine similarity divided by the fixed temperature `τ`.
//!
//! A region term is written `−log σ(y·η·s)`. This equals
//! `−log 1/(1 + exp(y·(−η·s)))`, the form with the sign folded into the
//! exponent.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{linear_weight, ParamId, ParamStore};
use crate::tensor::{dot, Matrix, Real};

/// `ln(1/0.07)`.
pub const ETA_INIT: f64 = 2.659_260_036_932_778_4;
pub const TAU_DEFAULT: f64 = 0.1;

/// `W_q`, `W_k`, `W_v` of the text-to-region attention layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionProjections {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl AttentionProjections {
    pub fn register<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, d: usize, rng: &mut R) -> Self {
        Self {
            wq: store.add("attn.wq", linear_weight(d, d, rng), true),
            wk: store.add("attn.wk", linear_weight(d, d, rng), true),
            wv: store.add("attn.wv", linear_weight(d, d, rng), true),
        }
    }
}

pub fn register_eta<T: Real>(store: &mut ParamStore<T>, init: f64) -> ParamId {
    store.add("eta", Matrix::scalar(T::of(init)), false)
}

fn check_pair<T: Real>(g: &Graph<'_, T>, queries: NodeId, regions: NodeId) -> Result<()> {
    let (qr, qd) = g.shape(queries);
    let (rr, rd) = g.shape(regions);
    if rr == 0 {
        return Err(Error::Empty("region embedding matrix has no rows".into()));
    }
    if qr == 0 {
        return Err(Error::Empty("no text queries".into()));
    }
    if qd != rd {
        return Err(Error::Shape(format!("text dim {qd} does not match region dim {rd}")));
    }
    Ok(())
}

/// Row-softmax of `(q W_q)(v W_k)ᵀ / √d`, `L × rows(v)`.
pub fn attention_weights<T: Real>(
    g: &mut Graph<'_, T>,
    proj: &AttentionProjections,
    queries: NodeId,
    regions: NodeId,
) -> Result<NodeId> {
    check_pair(g, queries, regions)?;
    let d = g.shape(queries).1;
    let (wq, wk) = (g.param(proj.wq), g.param(proj.wk));
    let q = g.matmul(queries, wq);
    let k = g.matmul(regions, wk);
    let logits = g.matmul_t(q, k);
    let logits = g.scale(logits, T::one() / Float::sqrt(T::of(d as f64)));
    Ok(g.softmax_rows(logits))
}

/// `v^tc = softmax(q W_q (v W_k)ᵀ / √d) · v W_v`, `L × d`.
pub fn text_conditioned_attention<T: Real>(
    g: &mut Graph<'_, T>,
    proj: &AttentionProjections,
    queries: NodeId,
    regions: NodeId,
) -> Result<NodeId> {
    let a = attention_weights(g, proj, queries, regions)?;
    let wv = g.param(proj.wv);
    let v = g.matmul(regions, wv);
    Ok(g.matmul(a, v))
}

/// Attention-free stand-in: every query receives the mean region embedding.
pub fn uniform_region_attention<T: Real>(g: &mut Graph<'_, T>, queries: NodeId, regions: NodeId) -> Result<NodeId> {
    check_pair(g, queries, regions)?;
    let l = g.shape(queries).0;
    let m = g.mean_rows(regions);
    Ok(g.repeat_rows(m, l))
}

/// For `anchor`, one `(pair, subcaption row)` per other pair, pairs ascending.
pub fn sample_negatives<R: Rng + ?Sized>(anchor: usize, subcaption_counts: &[usize], rng: &mut R) -> Vec<(usize, usize)> {
    subcaption_counts
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != anchor)
        .map(|(j, &k)| (j, rng.random_range(0..k)))
        .collect()
}

/// Query rows and labels for one anchor.
#[derive(Clone, Debug)]
pub struct QueryBatch {
    /// `L × d`: the anchor's `K` subcaptions, then one per negative.
    pub queries: NodeId,
    /// `+1` for the first `K` rows, `−1` after.
    pub labels: Vec<f64>,
}

/// Stacks the anchor's subcaptions (`K × d`) with the chosen negatives.
pub fn build_query_batch<T: Real>(
    g: &mut Graph<'_, T>,
    anchor: usize,
    subcaptions: &[NodeId],
    negatives: &[(usize, usize)],
) -> Result<QueryBatch> {
    let pos = *subcaptions
        .get(anchor)
        .ok_or_else(|| Error::OutOfRange(format!("anchor {anchor} outside batch of {}", subcaptions.len())))?;
    let k = g.shape(pos).0;
    let mut parts = Vec::with_capacity(1 + negatives.len());
    parts.push(pos);
    for &(j, r) in negatives {
        if j == anchor || j >= subcaptions.len() || r >= g.shape(subcaptions[j]).0 {
            return Err(Error::OutOfRange(format!("negative ({j}, {r}) for anchor {anchor}")));
        }
        parts.push(g.slice_rows(subcaptions[j], r, 1));
    }
    let queries = g.concat_rows(&parts);
    let mut labels = alloc::vec![1.0; k];
    labels.resize(k + negatives.len(), -1.0);
    Ok(QueryBatch { queries, labels })
}

/// Mean over `L` of `−log σ(y_l · η · ⟨v^tc_l, t^sub_l⟩)`.
pub fn region_loss<T: Real>(
    g: &mut Graph<'_, T>,
    vtc: NodeId,
    queries: NodeId,
    labels: &[f64],
    eta: NodeId,
) -> Result<NodeId> {
    if g.shape(vtc) != g.shape(queries) || labels.len() != g.shape(vtc).0 {
        return Err(Error::Shape(format!(
            "region loss inputs {:?}, {:?}, {} labels",
            g.shape(vtc),
            g.shape(queries),
            labels.len()
        )));
    }
    if !g.value(vtc).is_finite() || !g.value(queries).is_finite() || !g.value(eta).is_finite() {
        return Err(Error::NonFinite("region loss input".into()));
    }
    let s = g.row_dot(vtc, queries);
    let y = g.constant(Matrix::from_vec(labels.len(), 1, labels.iter().map(|&v| T::of(v)).collect()));
    let ys = g.mul(s, y);
    let z = g.scale_by(ys, eta);
    let ls = g.log_sigmoid(z);
    let m = g.mean(ls);
    Ok(g.scale(m, -T::one()))
}

/// Mean over the `N_q` query rows.
pub fn pool_queries<T: Real>(g: &mut Graph<'_, T>, v: NodeId) -> NodeId {
    g.mean_rows(v)
}

#[derive(Clone, Copy, Debug)]
pub struct GlobalLoss {
    pub i2t: NodeId,
    pub t2i: NodeId,
    pub slide: NodeId,
}

fn check_norms<T: Real>(m: &Matrix<T>, which: &'static str) -> Result<()> {
    for r in 0..m.rows() {
        let n = dot(m.row(r), m.row(r));
        if !(n > T::zero()) || !n.is_finite() {
            return Err(Error::ZeroNorm { which, index: r });
        }
    }
    Ok(())
}

/// Symmetric InfoNCE over cosine similarities `s_ij = cos(v̄_i, t_j)`.
pub fn global_loss<T: Real>(g: &mut Graph<'_, T>, pooled: NodeId, text: NodeId, tau: f64) -> Result<GlobalLoss> {
    if g.shape(pooled) != g.shape(text) || g.shape(pooled).0 == 0 {
        return Err(Error::Shape(format!(
            "global loss inputs {:?} and {:?}",
            g.shape(pooled),
            g.shape(text)
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    check_norms(g.value(pooled), "image")?;
    check_norms(g.value(text), "text")?;
    let b = g.shape(pooled).0;
    let vi = g.normalize_rows(pooled);
    let ti = g.normalize_rows(text);
    let s = g.matmul_t(vi, ti);
    let s = g.scale(s, T::of(1.0 / tau));
    let targets: Vec<Option<usize>> = (0..b).map(Some).collect();
    let ce = g.cross_entropy_rows(s, targets.clone());
    let i2t = g.mean(ce);
    let st = g.transpose(s);
    let ce = g.cross_entropy_rows(st, targets);
    let t2i = g.mean(ce);
    let both = g.add(i2t, t2i);
    let slide = g.scale(both, T::of(0.5));
    Ok(GlobalLoss { i2t, t2i, slide })
}

/// Per-pair graph nodes entering the objective.
#[derive(Clone, Debug)]
pub struct AlignmentBatch {
    /// `(N_i · N_q) × d` per pair; may be empty when the region term is off.
    pub regions: Vec<NodeId>,
    /// `1 × d` pooled slide embedding per pair.
    pub pooled: Vec<NodeId>,
    /// `K × d` subcaption features per pair.
    pub subcaptions: Vec<NodeId>,
    /// `1 × d` full caption feature per pair.
    pub text: Vec<NodeId>,
    /// Per anchor, the negatives from [`sample_negatives`].
    pub negatives: Vec<Vec<(usize, usize)>>,
}

/// How queries read the region embeddings.
#[derive(Clone, Copy, Debug)]
pub enum RegionReadout {
    Attention(AttentionProjections),
    Mean,
}

#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub region: Option<RegionReadout>,
    pub global: bool,
    pub tau: f64,
}

#[derive(Clone, Debug)]
pub struct LossNodes {
    pub region: Option<NodeId>,
    pub global: Option<GlobalLoss>,
    pub total: NodeId,
    /// Mean of each anchor's `v^tc` rows, `1 × d`.
    pub pooled_region: Vec<NodeId>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_region: f64,
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub l_slide: f64,
    pub l_total: f64,
    pub eta: f64,
    pub tau: f64,
}

impl LossNodes {
    pub fn breakdown<T: Real>(&self, g: &Graph<'_, T>, eta: f64, tau: f64) -> LossBreakdown {
        let v = |n: NodeId| g.value(n).item().f64();
        let (l_i2t, l_t2i, l_slide) = self.global.map_or((0.0, 0.0, 0.0), |gl| (v(gl.i2t), v(gl.t2i), v(gl.slide)));
        LossBreakdown {
            l_region: self.region.map_or(0.0, v),
            l_i2t,
            l_t2i,
            l_slide,
            l_total: v(self.total),
            eta,
            tau,
        }
    }
}

/// `L = L_region + L_slide`, with `L_region` averaged over anchors.
pub fn total_loss<T: Real>(
    g: &mut Graph<'_, T>,
    batch: &AlignmentBatch,
    eta: ParamId,
    config: &LossConfig,
) -> Result<LossNodes> {
    let b = batch.pooled.len();
    if b == 0 {
        return Err(Error::Empty("empty batch".into()));
    }
    let mut lens = alloc::vec![batch.text.len()];
    if config.region.is_some() {
        lens.extend([batch.regions.len(), batch.subcaptions.len(), batch.negatives.len()]);
    }
    if lens.iter().any(|&n| n != b) {
        return Err(Error::Shape("batch fields differ in length".into()));
    }
    let mut region = None;
    let mut pooled_region = Vec::new();
    if let Some(readout) = config.region {
        let eta = g.param(eta);
        let mut terms = Vec::with_capacity(b);
        for i in 0..b {
            let qb = build_query_batch(g, i, &batch.subcaptions, &batch.negatives[i])?;
            let vtc = match readout {
                RegionReadout::Attention(p) => text_conditioned_attention(g, &p, qb.queries, batch.regions[i])?,
                RegionReadout::Mean => uniform_region_attention(g, qb.queries, batch.regions[i])?,
            };
            pooled_region.push(g.mean_rows(vtc));
            terms.push(region_loss(g, vtc, qb.queries, &qb.labels, eta)?);
        }
        let stacked = g.concat_rows(&terms);
        region = Some(g.mean(stacked));
    }
    let global = if config.global {
        let v = g.concat_rows(&batch.pooled);
        let t = g.concat_rows(&batch.text);
        Some(global_loss(g, v, t, config.tau)?)
    } else {
        None
    };
    let total = match (region, global) {
        (Some(r), Some(gl)) => g.add(r, gl.slide),
        (Some(r), None) => r,
        (None, Some(gl)) => gl.slide,
        (None, None) => return Err(Error::Config("both loss terms disabled".into())),
    };
    Ok(LossNodes {
        region,
        global,
        total,
        pooled_region,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal_matrix;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn proj_store(d: usize, seed: u64) -> (ParamStore<f64>, AttentionProjections, ParamId) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AttentionProjections::register(&mut store, d, &mut rng);
        let eta = register_eta(&mut store, ETA_INIT);
        (store, p, eta)
    }

    fn scalar_loss(g: &Graph<'_, f64>, n: NodeId) -> f64 {
        g.value(n).item()
    }

    #[test]
    fn eta_init_is_log_inverse_temperature() {
        assert!((ETA_INIT - (1.0f64 / 0.07).ln()).abs() < 1e-15);
    }

    #[test]
    fn single_region_row_returns_projected_value() {
        let (store, p, _) = proj_store(3, 1);
        let mut g = Graph::new(&store);
        let r = Matrix::from_rows(&[&[0.2, -0.5, 1.0]]);
        let rn = g.constant(r.clone());
        let q = g.constant(Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[-1.0, 0.0, 0.5]]));
        let out = text_conditioned_attention(&mut g, &p, q, rn).unwrap();
        let want = r.matmul(store.get(p.wv));
        for l in 0..2 {
            for c in 0..3 {
                assert!((g.value(out)[(l, c)] - want[(0, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_query_projection_gives_mean() {
        let (mut store, p, _) = proj_store(2, 2);
        *store.get_mut(p.wq) = Matrix::zeros(2, 2);
        let mut g = Graph::new(&store);
        let r = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 2.0], &[3.0, 1.0]]);
        let rn = g.constant(r.clone());
        let q = g.constant(Matrix::from_rows(&[&[5.0, -4.0]]));
        let out = text_conditioned_attention(&mut g, &p, q, rn).unwrap();
        let want = r.matmul(store.get(p.wv)).mean_rows();
        assert!((g.value(out)[(0, 0)] - want[(0, 0)]).abs() < 1e-12);
        assert!((g.value(out)[(0, 1)] - want[(0, 1)]).abs() < 1e-12);
    }

    #[test]
    fn hand_set_attention_matches_scalar_oracle() {
        let (mut store, p, _) = proj_store(2, 3);
        *store.get_mut(p.wq) = Matrix::from_rows(&[&[1.0, 0.5], &[-0.3, 2.0]]);
        *store.get_mut(p.wk) = Matrix::from_rows(&[&[0.7, 0.0], &[0.2, -1.0]]);
        *store.get_mut(p.wv) = Matrix::from_rows(&[&[1.5, -0.5], &[0.25, 1.0]]);
        let qv = [[0.4, -1.2], [2.0, 0.3]];
        let rv = [[1.0, 0.5], [-0.8, 0.9]];
        let mut g = Graph::new(&store);
        let q = g.constant(Matrix::from_rows(&[&qv[0], &qv[1]]));
        let r = g.constant(Matrix::from_rows(&[&rv[0], &rv[1]]));
        let out = text_conditioned_attention(&mut g, &p, q, r).unwrap();
        let lin = |x: [f64; 2], w: [[f64; 2]; 2]| [x[0] * w[0][0] + x[1] * w[1][0], x[0] * w[0][1] + x[1] * w[1][1]];
        let wq = [[1.0, 0.5], [-0.3, 2.0]];
        let wk = [[0.7, 0.0], [0.2, -1.0]];
        let wv = [[1.5, -0.5], [0.25, 1.0]];
        for l in 0..2 {
            let qq = lin(qv[l], wq);
            let z: Vec<f64> = rv
                .iter()
                .map(|&x| {
                    let k = lin(x, wk);
                    (qq[0] * k[0] + qq[1] * k[1]) / 2f64.sqrt()
                })
                .collect();
            let e0 = z[0].exp() / (z[0].exp() + z[1].exp());
            let (v0, v1) = (lin(rv[0], wv), lin(rv[1], wv));
            for c in 0..2 {
                let want = e0 * v0[c] + (1.0 - e0) * v1[c];
                assert!((g.value(out)[(l, c)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_regions_are_rejected() {
        let (store, p, _) = proj_store(2, 4);
        let mut g = Graph::new(&store);
        let q = g.constant(Matrix::zeros(1, 2));
        let r = g.constant(Matrix::zeros(0, 2));
        assert!(text_conditioned_attention(&mut g, &p, q, r).is_err());
    }

    #[test]
    fn query_batch_sizes_and_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let subs: Vec<NodeId> = (0..64).map(|_| g.constant(normal_matrix(8, 4, 1.0, &mut rng))).collect();
        let neg = sample_negatives(5, &[8; 64], &mut rng);
        let qb = build_query_batch(&mut g, 5, &subs, &neg).unwrap();
        assert_eq!(g.shape(qb.queries).0, 71);
        assert_eq!(qb.labels.iter().filter(|&&y| y > 0.0).count(), 8);
        assert_eq!(qb.labels.iter().filter(|&&y| y < 0.0).count(), 63);
        assert!(qb.labels[..8].iter().all(|&y| y == 1.0));
        assert!(neg.iter().all(|&(j, r)| j != 5 && r < 8));

        let neg = sample_negatives(0, &[8], &mut rng);
        let qb = build_query_batch(&mut g, 0, &subs[..1], &neg).unwrap();
        assert_eq!(g.shape(qb.queries).0, 8);
        assert!(qb.labels.iter().all(|&y| y == 1.0));
    }

    #[test]
    fn negative_rows_are_copied_from_other_pairs() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Matrix::from_rows(&[&[1.0], &[2.0]]));
        let b = g.constant(Matrix::from_rows(&[&[3.0], &[4.0]]));
        let c = g.constant(Matrix::from_rows(&[&[5.0], &[6.0], &[7.0]]));
        let qb = build_query_batch(&mut g, 1, &[a, b, c], &[(0, 1), (2, 2)]).unwrap();
        assert_eq!(g.value(qb.queries).data(), &[3.0, 4.0, 2.0, 7.0]);
        assert!(build_query_batch(&mut g, 1, &[a, b, c], &[(1, 0)]).is_err());
    }

    fn region_loss_value(s: &[f64], y: &[f64], eta: f64) -> f64 {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let v = g.constant(Matrix::from_vec(s.len(), 1, s.to_vec()));
        let q = g.constant(Matrix::filled(s.len(), 1, 1.0));
        let e = g.constant(Matrix::scalar(eta));
        let l = region_loss(&mut g, v, q, y, e).unwrap();
        scalar_loss(&g, l)
    }

    #[test]
    fn region_loss_anchors() {
        assert!((region_loss_value(&[0.0, 0.0, 0.0], &[1.0, -1.0, 1.0], 3.7) - 2f64.ln()).abs() < 1e-12);
        assert!(region_loss_value(&[20.0], &[1.0], 1.0) < 1e-8);
        let (s, y, eta) = ([0.8, -0.3, 1.5], [1.0, -1.0, -1.0], 2.0);
        let want: f64 = s
            .iter()
            .zip(&y)
            .map(|(s, y)| (1.0 + (y * -eta * s).exp()).ln())
            .sum::<f64>()
            / 3.0;
        assert!((region_loss_value(&s, &y, eta) - want).abs() < 1e-12);
    }

    #[test]
    fn region_loss_rejects_non_finite() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let v = g.constant(Matrix::from_rows(&[&[f64::NAN]]));
        let q = g.constant(Matrix::from_rows(&[&[1.0]]));
        let e = g.constant(Matrix::scalar(1.0));
        assert!(region_loss(&mut g, v, q, &[1.0], e).is_err());
    }

    #[test]
    fn pooling() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let one = g.constant(Matrix::from_rows(&[&[3.0, -1.0]]));
        let p = pool_queries(&mut g, one);
        assert_eq!(g.value(p).data(), &[3.0, -1.0]);
        let two = g.constant(Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let p = pool_queries(&mut g, two);
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m: Matrix<f64> = normal_matrix(8, 4, 1.0, &mut rng);
        let n = g.constant(m.clone());
        let p = pool_queries(&mut g, n);
        for c in 0..4 {
            let want = (0..8).map(|r| m[(r, c)]).sum::<f64>() / 8.0;
            assert!((g.value(p)[(0, c)] - want).abs() < 1e-12);
        }
    }

    fn global(v: Matrix<f64>, t: Matrix<f64>, tau: f64) -> Result<(f64, f64, f64)> {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let (vn, tn) = (g.constant(v), g.constant(t));
        let gl = global_loss(&mut g, vn, tn, tau)?;
        Ok((scalar_loss(&g, gl.i2t), scalar_loss(&g, gl.t2i), scalar_loss(&g, gl.slide)))
    }

    #[test]
    fn global_loss_anchors() {
        let (a, b, c) = global(Matrix::from_rows(&[&[1.0, 2.0]]), Matrix::from_rows(&[&[-3.0, 0.5]]), 0.1).unwrap();
        assert_eq!((a, b, c), (0.0, 0.0, 0.0));
        let id = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let (a, b, c) = global(id.clone(), id, 1.0).unwrap();
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((want - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
        assert!((want - 0.313262).abs() < 1e-6);
        for x in [a, b, c] {
            assert!((x - want).abs() < 1e-12);
        }
    }

    #[test]
    fn global_loss_zero_norm_names_index() {
        let v = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let t = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        match global(v, t.clone(), 0.1) {
            Err(Error::ZeroNorm { which: "image", index: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match global(t.clone(), Matrix::from_rows(&[&[0.0, 0.0], &[0.0, 1.0]]), 0.1) {
            Err(Error::ZeroNorm { which: "text", index: 0 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    fn random_batch(
        g: &mut Graph<'_, f64>,
        b: usize,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> (AlignmentBatch, Vec<Matrix<f64>>) {
        let mut mats = Vec::new();
        let mut node = |g: &mut Graph<'_, f64>, r: usize| {
            let m: Matrix<f64> = normal_matrix(r, d, 1.0, rng);
            mats.push(m.clone());
            g.constant(m)
        };
        let regions = (0..b).map(|i| node(g, 2 + i % 2)).collect();
        let pooled = (0..b).map(|_| node(g, 1)).collect();
        let subcaptions = (0..b).map(|_| node(g, 3)).collect();
        let text = (0..b).map(|_| node(g, 1)).collect();
        let negatives = (0..b).map(|i| sample_negatives(i, &alloc::vec![3; b], rng)).collect();
        (
            AlignmentBatch {
                regions,
                pooled,
                subcaptions,
                text,
                negatives,
            },
            mats,
        )
    }

    #[test]
    fn total_loss_composes_and_ablations() {
        let (store, p, eta) = proj_store(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new(&store);
        let (batch, _) = random_batch(&mut g, 3, 4, &mut rng);
        let full = LossConfig {
            region: Some(RegionReadout::Attention(p)),
            global: true,
            tau: 0.1,
        };
        let nodes = total_loss(&mut g, &batch, eta, &full).unwrap();
        let lb = nodes.breakdown(&g, ETA_INIT, 0.1);
        assert!((lb.l_slide - (lb.l_i2t + lb.l_t2i) / 2.0).abs() < 1e-12);
        assert!((lb.l_total - (lb.l_region + lb.l_slide)).abs() < 1e-12);
        assert_eq!(nodes.pooled_region.len(), 3);

        // independent recomputation of the region term
        let mut sum = 0.0;
        for i in 0..3 {
            let qb = build_query_batch(&mut g, i, &batch.subcaptions, &batch.negatives[i]).unwrap();
            let vtc = text_conditioned_attention(&mut g, &p, qb.queries, batch.regions[i]).unwrap();
            let (vv, qq) = (g.value(vtc).clone(), g.value(qb.queries).clone());
            let mut t = 0.0;
            for l in 0..qb.labels.len() {
                let s = dot(vv.row(l), qq.row(l));
                t += (1.0 + (-qb.labels[l] * ETA_INIT * s).exp()).ln();
            }
            sum += t / qb.labels.len() as f64;
        }
        assert!((lb.l_region - sum / 3.0).abs() < 1e-10);

        let no_region = LossConfig { region: None, ..full };
        let nodes = total_loss(&mut g, &batch, eta, &no_region).unwrap();
        let lb2 = nodes.breakdown(&g, ETA_INIT, 0.1);
        assert_eq!(lb2.l_total, lb2.l_slide);
        assert_eq!(lb2.l_slide, lb.l_slide);

        let no_global = LossConfig { global: false, ..full };
        let nodes = total_loss(&mut g, &batch, eta, &no_global).unwrap();
        let lb3 = nodes.breakdown(&g, ETA_INIT, 0.1);
        assert_eq!(lb3.l_total, lb3.l_region);
        assert_eq!(lb3.l_region, lb.l_region);
    }

    #[test]
    fn eta_receives_gradient() {
        let (store, p, eta) = proj_store(4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new(&store);
        let (batch, _) = random_batch(&mut g, 3, 4, &mut rng);
        let cfg = LossConfig {
            region: Some(RegionReadout::Attention(p)),
            global: false,
            tau: 0.1,
        };
        let nodes = total_loss(&mut g, &batch, eta, &cfg).unwrap();
        let grads = g.backward(nodes.total);
        let de = grads.param(eta).unwrap().item();
        assert!(de.abs() > 1e-8, "dL/deta = {de}");
        // finite-difference confirmation
        let h = 1e-5;
        let eval = |delta: f64| {
            let mut s2 = store.clone();
            s2.get_mut(eta)[(0, 0)] += delta;
            let mut g = Graph::new(&s2);
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let (batch, _) = random_batch(&mut g, 3, 4, &mut rng);
            let n = total_loss(&mut g, &batch, eta, &cfg).unwrap();
            g.value(n.total).item()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!((fd - de).abs() < 1e-6 * (1.0 + de.abs()));
    }

    proptest! {
        #[test]
        fn region_term_is_monotone_in_similarity(s in -5.0f64..5.0, ds in 0.01f64..2.0, eta in 0.1f64..5.0) {
            let up = region_loss_value(&[s + ds], &[1.0], eta);
            let base = region_loss_value(&[s], &[1.0], eta);
            prop_assert!(up < base);
            let up = region_loss_value(&[s + ds], &[-1.0], eta);
            let base = region_loss_value(&[s], &[-1.0], eta);
            prop_assert!(up > base);
        }

        #[test]
        fn global_directions_swap(seed in 0u64..500, b in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Matrix<f64> = normal_matrix(b, 3, 1.0, &mut rng);
            let t: Matrix<f64> = normal_matrix(b, 3, 1.0, &mut rng);
            let (a1, b1, _) = global(v.clone(), t.clone(), 0.1).unwrap();
            let (a2, b2, _) = global(t, v, 0.1).unwrap();
            prop_assert!((a1 - b2).abs() < 1e-12);
            prop_assert!((b1 - a2).abs() < 1e-12);
        }

        #[test]
        fn global_loss_is_scale_invariant(seed in 0u64..500, c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Matrix<f64> = normal_matrix(4, 3, 1.0, &mut rng);
            let t: Matrix<f64> = normal_matrix(4, 3, 1.0, &mut rng);
            let base = global(v.clone(), t.clone(), 0.1).unwrap();
            let scaled = global(v.map(|x| x * c), t, 0.1).unwrap();
            prop_assert!((base.0 - scaled.0).abs() < 1e-9);
            prop_assert!((base.1 - scaled.1).abs() < 1e-9);
            prop_assert!((base.2 - scaled.2).abs() < 1e-9);
        }

        #[test]
        fn batch_permutation_leaves_losses_unchanged(seed in 0u64..300) {
            let (store, p, eta) = proj_store(3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let mut g = Graph::new(&store);
            let (batch, _) = random_batch(&mut g, 4, 3, &mut rng);
            let perm = rand::seq::index::sample(&mut rng, 4, 4).into_vec();
            let mut inv = alloc::vec![0; 4];
            for (new, &old) in perm.iter().enumerate() {
                inv[old] = new;
            }
            let pick = |v: &Vec<NodeId>| perm.iter().map(|&o| v[o]).collect::<Vec<_>>();
            let permuted = AlignmentBatch {
                regions: pick(&batch.regions),
                pooled: pick(&batch.pooled),
                subcaptions: pick(&batch.subcaptions),
                text: pick(&batch.text),
                negatives: perm
                    .iter()
                    .map(|&o| batch.negatives[o].iter().map(|&(j, r)| (inv[j], r)).collect())
                    .collect(),
            };
            let cfg = LossConfig { region: Some(RegionReadout::Attention(p)), global: true, tau: 0.1 };
            let a = total_loss(&mut g, &batch, eta, &cfg).unwrap().breakdown(&g, 0.0, 0.1);
            let b = total_loss(&mut g, &permuted, eta, &cfg).unwrap().breakdown(&g, 0.0, 0.1);
            for (x, y) in [(a.l_region, b.l_region), (a.l_i2t, b.l_i2t), (a.l_t2i, b.l_t2i), (a.l_total, b.l_total)] {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
