//! `step_<n>.ckpt`: versioned binary header, configs, named parameters, and optimizer moments.
//!
//! The per-step random streams are derived from `(seed, step)`, so the seed in the
//! stored config and the step counter are the complete RNG state.

use std::path::{Path, PathBuf};

use pathflip_core::model::ModelConfig;
use pathflip_core::optim::{AdamW, AdamWConfig};
use pathflip_core::params::ParamStore;
use pathflip_core::tensor::Matrix;
use pathflip_core::train::{RunConfig, Stage, Trainer};
use pathflip_core::model::PathFlip;

use super::{f32s_to_le, invalid, le_to_f32s, read, write, Result};

pub const MAGIC: &[u8; 4] = b"PFCK";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub step: u64,
    pub config_hash: String,
    pub config: RunConfig,
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    pub optim: AdamW<f32>,
}

impl Checkpoint {
    pub fn of(trainer: &Trainer, config_hash: &str) -> Self {
        Self {
            stage: trainer.stage,
            step: trainer.step,
            config_hash: config_hash.to_string(),
            config: trainer.config.clone(),
            model: trainer.model.config,
            params: trainer.store.clone(),
            optim: trainer.optim.clone(),
        }
    }

    pub fn into_trainer(self) -> pathflip_core::Result<Trainer> {
        let (model, store) = PathFlip::adopt(self.model, self.params)?;
        Ok(Trainer {
            config: self.config,
            model,
            store,
            optim: self.optim,
            stage: self.stage,
            step: self.step,
        })
    }

    /// `"<stage>/step_<n>"`, used to label reports.
    pub fn id(&self) -> String {
        let stage = match self.stage {
            Stage::Pretrain => "pretrain",
            Stage::Instruct => "instruct",
        };
        format!("{stage}/step_{}", self.step)
    }
}

pub fn file_name(step: u64) -> String {
    format!("step_{step}.ckpt")
}

pub fn path_in(dir: &Path, step: u64) -> PathBuf {
    dir.join(file_name(step))
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

pub fn encode(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match c.stage {
        Stage::Pretrain => 0,
        Stage::Instruct => 1,
    });
    out.extend_from_slice(&c.step.to_le_bytes());
    put_bytes(&mut out, c.config_hash.as_bytes());
    put_bytes(&mut out, serde_json::to_string(&c.config).expect("config serializes").as_bytes());
    put_bytes(&mut out, serde_json::to_string(&c.model).expect("config serializes").as_bytes());
    out.extend_from_slice(&(c.params.len() as u32).to_le_bytes());
    for e in c.params.entries() {
        put_bytes(&mut out, e.name.as_bytes());
        out.push(u8::from(e.decay));
        let (r, k) = e.value.shape();
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(k as u32).to_le_bytes());
        out.extend_from_slice(&f32s_to_le(e.value.data()));
    }
    let a = c.optim.config;
    for v in [a.lr, a.beta1, a.beta2, a.eps, a.weight_decay] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&c.optim.step.to_le_bytes());
    out.extend_from_slice(&(c.optim.first.len() as u32).to_le_bytes());
    for (m, v) in c.optim.first.iter().zip(&c.optim.second) {
        out.extend_from_slice(&f32s_to_le(m.data()));
        out.extend_from_slice(&f32s_to_le(v.data()));
    }
    out
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| invalid(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|e| invalid(self.path, e.to_string()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix<f32>> {
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or_else(|| invalid(self.path, "shape overflow"))?;
        Ok(Matrix::from_vec(rows, cols, le_to_f32s(self.take(n)?).expect("multiple of 4")))
    }
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(invalid(path, "not a checkpoint (bad magic)"));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(invalid(path, format!("unsupported checkpoint version {version}")));
    }
    let stage = match r.u8()? {
        0 => Stage::Pretrain,
        1 => Stage::Instruct,
        s => return Err(invalid(path, format!("unknown stage tag {s}"))),
    };
    let step = r.u64()?;
    let config_hash = r.str()?.to_string();
    let config: RunConfig = serde_json::from_str(r.str()?).map_err(|e| invalid(path, format!("run config: {e}")))?;
    let model: ModelConfig = serde_json::from_str(r.str()?).map_err(|e| invalid(path, format!("model config: {e}")))?;
    let n = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = r.str()?.to_string();
        let decay = r.u8()? != 0;
        let (rows, cols) = (r.u32()?, r.u32()?);
        let value = r.matrix(rows, cols)?;
        if params.id(&name).is_some() {
            return Err(invalid(path, format!("duplicate parameter {name}")));
        }
        params.add(&name, value, decay);
    }
    let mut a = AdamWConfig::default();
    for slot in [&mut a.lr, &mut a.beta1, &mut a.beta2, &mut a.eps, &mut a.weight_decay] {
        *slot = r.f64()?;
    }
    let opt_step = r.u64()?;
    let moments = r.u32()?;
    if moments > params.len() {
        return Err(invalid(path, format!("{moments} optimizer moments for {} parameters", params.len())));
    }
    let (mut first, mut second) = (Vec::with_capacity(moments), Vec::with_capacity(moments));
    for e in &params.entries()[..moments] {
        let (rows, cols) = e.value.shape();
        first.push(r.matrix(rows, cols)?);
        second.push(r.matrix(rows, cols)?);
    }
    if r.pos != bytes.len() {
        return Err(invalid(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        stage,
        step,
        config_hash,
        config,
        model,
        params,
        optim: AdamW {
            config: a,
            step: opt_step,
            first,
            second,
        },
    })
}

pub fn save(path: &Path, c: &Checkpoint) -> Result<()> {
    write(path, &encode(c))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(path, &read(path)?)
}
