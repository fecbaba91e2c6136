//! Corpus as JSON lines (one pair per line) plus a `.meta.json` with generator config and concepts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use pathflip_core::corpus::{Concept, CorpusConfig, InstructionRecord, SlideCaptionPair, SyntheticCorpus, SyntheticSlide};
use serde::{Deserialize, Serialize};

use super::{f32s_to_le, invalid, le_to_f32s, read_string, write, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub slide_id: String,
    /// `[cols, rows]`; regions are row-major.
    pub grid: (usize, usize),
    pub patches_per_region: usize,
    pub raw_dim: usize,
    /// Region index → concept id; background regions are absent.
    pub planted_map: BTreeMap<usize, u32>,
    /// Base64 of `N·M·raw_dim` little-endian `f32`, region-major.
    pub patches: String,
    pub caption: Vec<String>,
    pub instruction_records: Vec<InstructionRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub id: u32,
    pub name: String,
    pub sentence: String,
    /// Base64 of `raw_dim` little-endian `f32`.
    pub signature: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub config: CorpusConfig,
    pub concepts: Vec<ConceptRecord>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn b64(values: &[f32]) -> String {
    STANDARD.encode(f32s_to_le(values))
}

fn unb64(path: &Path, what: &str, s: &str) -> Result<Vec<f32>> {
    let bytes = STANDARD.decode(s).map_err(|e| invalid(path, format!("{what}: {e}")))?;
    le_to_f32s(&bytes).ok_or_else(|| invalid(path, format!("{what}: length {} is not a multiple of 4", bytes.len())))
}

pub fn pair_record(p: &SlideCaptionPair) -> PairRecord {
    let s = &p.slide;
    PairRecord {
        slide_id: s.slide_id.clone(),
        grid: s.grid,
        patches_per_region: s.patches_per_region,
        raw_dim: s.raw_dim,
        planted_map: s.planted_map(),
        patches: b64(&s.patches),
        caption: p.caption.clone(),
        instruction_records: p.instruction_records.clone(),
    }
}

pub fn from_record(path: &Path, line: usize, r: PairRecord) -> Result<SlideCaptionPair> {
    let n = r.grid.0 * r.grid.1;
    let patches = unb64(path, &format!("line {line}: patches"), &r.patches)?;
    if patches.len() != n * r.patches_per_region * r.raw_dim {
        return Err(invalid(
            path,
            format!("line {line}: {} patch values, expected {n}·{}·{}", patches.len(), r.patches_per_region, r.raw_dim),
        ));
    }
    let mut regions = vec![None; n];
    for (&region, &c) in &r.planted_map {
        *regions
            .get_mut(region)
            .ok_or_else(|| invalid(path, format!("line {line}: planted region {region} outside grid")))? = Some(c);
    }
    Ok(SlideCaptionPair {
        slide: SyntheticSlide {
            slide_id: r.slide_id,
            grid: r.grid,
            patches_per_region: r.patches_per_region,
            raw_dim: r.raw_dim,
            regions,
            patches,
        },
        caption: r.caption,
        instruction_records: r.instruction_records,
    })
}

pub fn to_jsonl(corpus: &SyntheticCorpus) -> String {
    let mut out = String::new();
    for p in &corpus.pairs {
        out.push_str(&serde_json::to_string(&pair_record(p)).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn meta(corpus: &SyntheticCorpus) -> CorpusMeta {
    CorpusMeta {
        config: corpus.config.clone(),
        concepts: corpus
            .concepts
            .iter()
            .map(|c| ConceptRecord {
                id: c.id,
                name: c.name.clone(),
                sentence: c.sentence.clone(),
                signature: b64(&c.signature),
            })
            .collect(),
    }
}

pub fn save(path: &Path, corpus: &SyntheticCorpus) -> Result<()> {
    write(path, to_jsonl(corpus).as_bytes())?;
    let m = serde_json::to_string_pretty(&meta(corpus)).expect("meta serializes");
    write(&meta_path(path), m.as_bytes())
}

pub fn load(path: &Path) -> Result<SyntheticCorpus> {
    let mp = meta_path(path);
    let meta: CorpusMeta = serde_json::from_str(&read_string(&mp)?).map_err(|e| invalid(&mp, e.to_string()))?;
    let concepts = meta
        .concepts
        .into_iter()
        .map(|c| {
            Ok(Concept {
                signature: unb64(&mp, &format!("concept {}", c.id), &c.signature)?,
                id: c.id,
                name: c.name,
                sentence: c.sentence,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let text = read_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: PairRecord = serde_json::from_str(line).map_err(|e| invalid(path, format!("line {}: {e}", i + 1)))?;
        pairs.push(from_record(path, i + 1, rec)?);
    }
    Ok(SyntheticCorpus {
        config: meta.config,
        concepts,
        pairs,
    })
}
