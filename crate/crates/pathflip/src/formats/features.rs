//! Feature cache: `PFLC` header, `N·M·d` little-endian `f32`, and a JSON sidecar.

use std::path::{Path, PathBuf};

use pathflip_core::tensor::Matrix;
use serde::{Deserialize, Serialize};

use super::{f32s_to_le, invalid, le_to_f32s, read, read_string, write, Result};

pub const MAGIC: &[u8; 4] = b"PFLC";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 3 * 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub slide_id: String,
    /// `[cols, rows]`.
    pub grid: (usize, usize),
}

/// Encoded features of one slide: one `M × d` block per region.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    pub sidecar: Sidecar,
    pub regions: Vec<Matrix<f32>>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode(regions: &[Matrix<f32>]) -> Vec<u8> {
    let (m, d) = regions.first().map(|r| r.shape()).unwrap_or((0, 0));
    let mut out = Vec::with_capacity(HEADER_LEN + regions.len() * m * d * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [regions.len(), m, d] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for r in regions {
        out.extend_from_slice(&f32s_to_le(r.data()));
    }
    out
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Vec<Matrix<f32>>> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(invalid(path, "not a PFLC feature cache"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(invalid(path, format!("unsupported feature cache version {version}")));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
    let (n, m, d) = (word(0), word(1), word(2));
    let body = &bytes[HEADER_LEN..];
    if body.len() != n * m * d * 4 {
        return Err(invalid(path, format!("payload is {} bytes, header implies {}", body.len(), n * m * d * 4)));
    }
    let values = le_to_f32s(body).expect("length checked");
    Ok(values.chunks(m * d.max(1)).take(n).map(|c| Matrix::from_vec(m, d, c.to_vec())).collect())
}

pub fn save(path: &Path, cache: &FeatureCache) -> Result<()> {
    if let Some(first) = cache.regions.first() {
        if cache.regions.iter().any(|r| r.shape() != first.shape()) {
            return Err(invalid(path, "region blocks differ in shape"));
        }
    }
    write(path, &encode(&cache.regions))?;
    let side = serde_json::to_string(&cache.sidecar).expect("sidecar serializes");
    write(&sidecar_path(path), side.as_bytes())
}

pub fn load(path: &Path) -> Result<FeatureCache> {
    let regions = decode(path, &read(path)?)?;
    let sp = sidecar_path(path);
    let sidecar: Sidecar = serde_json::from_str(&read_string(&sp)?).map_err(|e| invalid(&sp, e.to_string()))?;
    if sidecar.grid.0 * sidecar.grid.1 != regions.len() {
        return Err(invalid(&sp, format!("grid {:?} does not hold {} regions", sidecar.grid, regions.len())));
    }
    Ok(FeatureCache { sidecar, regions })
}
