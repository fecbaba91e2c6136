//! Two-stage slide partitioning and patch-feature assembly.
//!
//! A slide extent (in patch units) is tiled by non-overlapping square regions
//! of `r × r` patches. Regions are enumerated row-major over the region grid
//! and patches row-major within each region. Border strips narrower than `r`
//! are dropped.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticSlide;
use crate::error::{Error, Result};
use crate::params::normal_matrix;
use crate::tensor::{Matrix, Real};

/// `M × d` features of one region, or `MN × d` for a whole slide.
pub type FeatureMatrix<T> = Matrix<T>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    /// Slide width in patch units.
    pub width: usize,
    /// Slide height in patch units.
    pub height: usize,
    /// Patches per region side.
    pub region_side: usize,
    /// Patch side length in raw pixels; informational only.
    pub patch_px: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionGrid {
    pub cols: usize,
    pub rows: usize,
    /// Per region, its `r²` patch coordinates `(x, y)` in row-major order.
    pub regions: Vec<Vec<(usize, usize)>>,
}

impl RegionGrid {
    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn patches_per_region(&self) -> usize {
        self.regions.first().map_or(0, Vec::len)
    }
}

pub fn partition_slide(spec: &PartitionSpec) -> Result<RegionGrid> {
    let r = spec.region_side;
    if r == 0 {
        return Err(Error::Config("region_side must be >= 1".into()));
    }
    if spec.width < r || spec.height < r {
        return Err(Error::SlideTooSmall {
            width: spec.width,
            height: spec.height,
            side: r,
        });
    }
    let (cols, rows) = (spec.width / r, spec.height / r);
    let mut regions = Vec::with_capacity(cols * rows);
    for gy in 0..rows {
        for gx in 0..cols {
            let mut coords = Vec::with_capacity(r * r);
            for py in 0..r {
                for px in 0..r {
                    coords.push((gx * r + px, gy * r + py));
                }
            }
            regions.push(coords);
        }
    }
    Ok(RegionGrid { cols, rows, regions })
}

/// Maps a raw patch vector to a `d`-dimensional feature.
pub trait PatchEncoder<T: Real> {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    /// `raw.len() == in_dim()`; writes `out_dim()` values into `out`.
    fn encode_into(&self, raw: &[T], out: &mut [T]);
}

/// Frozen random linear map followed by `tanh`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearTanhEncoder<T> {
    /// `in_dim × out_dim`.
    pub weight: Matrix<T>,
}

impl<T: Real> LinearTanhEncoder<T> {
    /// Unit-variance Gaussian weights drawn from `seed`.
    pub fn random(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            weight: normal_matrix(in_dim, out_dim, 1.0, &mut rng),
        }
    }
}

impl<T: Real> PatchEncoder<T> for LinearTanhEncoder<T> {
    fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn encode_into(&self, raw: &[T], out: &mut [T]) {
        out.fill(T::zero());
        for (i, &x) in raw.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.weight.row(i)) {
                *o = *o + x * w;
            }
        }
        for o in out.iter_mut() {
            *o = o.tanh();
        }
    }
}

/// Encodes the `M × d_raw` raw patches of one region into an `M × d` feature block.
pub fn encode_region<T: Real, E: PatchEncoder<T> + ?Sized>(raw: &Matrix<T>, encoder: &E) -> Result<FeatureMatrix<T>> {
    if raw.cols() != encoder.in_dim() {
        return Err(Error::Shape(format!(
            "raw patch dim {} does not match encoder input dim {}",
            raw.cols(),
            encoder.in_dim()
        )));
    }
    let d = encoder.out_dim();
    let mut out = Matrix::zeros(raw.rows(), d);
    for k in 0..raw.rows() {
        encoder.encode_into(raw.row(k), out.row_mut(k));
    }
    Ok(out)
}

/// Stacks region blocks in region order: block `n` occupies rows `[nM, (n+1)M)`.
pub fn assemble_slide_features<T: Real>(blocks: &[FeatureMatrix<T>]) -> Result<FeatureMatrix<T>> {
    let first = blocks.first().ok_or_else(|| Error::Empty("no region blocks".into()))?;
    for (n, b) in blocks.iter().enumerate() {
        if b.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "region block {n} has shape {:?}, expected {:?}",
                b.shape(),
                first.shape()
            )));
        }
    }
    let refs: Vec<&Matrix<T>> = blocks.iter().collect();
    Ok(Matrix::concat_rows(&refs))
}

/// Inverse of [`assemble_slide_features`] for one block.
pub fn region_block<T: Real>(slide: &FeatureMatrix<T>, region: usize, patches_per_region: usize) -> FeatureMatrix<T> {
    slide.slice_rows(region * patches_per_region, patches_per_region)
}

/// Per-region feature blocks of a synthetic slide.
pub fn encode_slide<T: Real, E: PatchEncoder<T> + ?Sized>(slide: &SyntheticSlide, encoder: &E) -> Result<Vec<FeatureMatrix<T>>> {
    (0..slide.num_regions())
        .map(|n| {
            let raw: Vec<T> = slide.region_patches(n).iter().map(|&x| T::of(x as f64)).collect();
            encode_region(&Matrix::from_vec(slide.patches_per_region, slide.raw_dim, raw), encoder)
        })
        .collect()
}
