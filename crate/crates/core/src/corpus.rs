//! Synthetic slide–caption corpora with planted region↔concept ground truth.
//!
//! Each concept owns a unit-norm visual signature. A slide places a few
//! distinct concepts in distinct regions; every patch of such a region is a
//! noisy copy of the signature, all other regions are background noise. The
//! caption has one sentence per concept region, in region order, followed by
//! a summary sentence naming every planted concept.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STEMS: [&str; 8] = [
    "necrosis",
    "tumor",
    "stroma",
    "lymphocyte",
    "mucin",
    "fibrosis",
    "hemorrhage",
    "gland",
];

/// Sentence templates; `{}` is replaced by the concept name. All end in ` .`.
const TEMPLATES: [&str; 4] = [
    "there is {} in this region .",
    "the region shows {} .",
    "an area of {} is seen .",
    "{} is present here .",
];

pub const CONCEPT_PROMPT: &str = "what concepts are present ?";
const MAX_SIGNATURE_ATTEMPTS: usize = 100_000;
const MAX_SIGNATURE_COSINE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub num_pairs: usize,
    pub regions_per_slide: usize,
    pub patches_per_region: usize,
    pub raw_dim: usize,
    pub num_concepts: usize,
    pub concepts_per_slide: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_pairs: 340,
            regions_per_slide: 4,
            patches_per_region: 16,
            raw_dim: 16,
            num_concepts: 16,
            concepts_per_slide: 2,
            noise: 0.3,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_pairs", self.num_pairs),
            ("regions_per_slide", self.regions_per_slide),
            ("patches_per_region", self.patches_per_region),
            ("raw_dim", self.raw_dim),
            ("num_concepts", self.num_concepts),
            ("concepts_per_slide", self.concepts_per_slide),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.concepts_per_slide > self.regions_per_slide.min(self.num_concepts) {
            return Err(Error::Config(format!(
                "concepts_per_slide ({}) must be <= min(regions_per_slide, num_concepts) ({})",
                self.concepts_per_slide,
                self.regions_per_slide.min(self.num_concepts)
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: u32,
    pub name: String,
    /// Unit-norm vector of length `raw_dim`.
    pub signature: Vec<f32>,
    /// Template sentence instantiated with `name`.
    pub sentence: String,
}

/// Region layout `(cols, rows)` for `n` regions: the most square factorization.
pub fn region_grid(n: usize) -> (usize, usize) {
    let mut rows = 1;
    let mut r = 1;
    while r * r <= n {
        if n % r == 0 {
            rows = r;
        }
        r += 1;
    }
    (n / rows, rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSlide {
    pub slide_id: String,
    /// Region grid `(cols, rows)`; regions are stored row-major.
    pub grid: (usize, usize),
    pub patches_per_region: usize,
    pub raw_dim: usize,
    /// Concept per region; `None` is background.
    pub regions: Vec<Option<u32>>,
    /// `N · M · raw_dim` values, region-major, then patch, then feature.
    pub patches: Vec<f32>,
}

impl SyntheticSlide {
    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    /// Raw patch block of region `n`: `M · raw_dim` values.
    pub fn region_patches(&self, n: usize) -> &[f32] {
        let len = self.patches_per_region * self.raw_dim;
        &self.patches[n * len..(n + 1) * len]
    }

    pub fn patch(&self, region: usize, k: usize) -> &[f32] {
        let start = (region * self.patches_per_region + k) * self.raw_dim;
        &self.patches[start..start + self.raw_dim]
    }

    /// region index → concept id, background omitted.
    pub fn planted_map(&self) -> BTreeMap<usize, u32> {
        self.regions
            .iter()
            .enumerate()
            .filter_map(|(n, c)| c.map(|c| (n, c)))
            .collect()
    }

    /// Slide extent in patch units when `M` is a perfect square.
    pub fn extent(&self) -> Option<(usize, usize)> {
        let side = isqrt(self.patches_per_region);
        (side * side == self.patches_per_region).then_some((self.grid.0 * side, self.grid.1 * side))
    }
}

fn isqrt(n: usize) -> usize {
    let mut r = 0;
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    /// Whitespace-separated prompt tokens.
    pub prompt: String,
    /// Whitespace-separated answer tokens.
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideCaptionPair {
    pub slide: SyntheticSlide,
    pub caption: Vec<String>,
    pub instruction_records: Vec<InstructionRecord>,
}

/// A planted concept together with the caption sentence that describes it.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedSentence {
    pub region: usize,
    pub concept: u32,
    pub sentence: usize,
}

impl SlideCaptionPair {
    /// Caption text: sentences joined by single spaces.
    pub fn caption_text(&self) -> String {
        self.caption.join(" ")
    }

    /// Concept sentences in region order; the summary sentence is excluded.
    pub fn planted_sentences(&self) -> Vec<PlantedSentence> {
        self.slide
            .planted_map()
            .into_iter()
            .enumerate()
            .map(|(sentence, (region, concept))| PlantedSentence {
                region,
                concept,
                sentence,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub config: CorpusConfig,
    pub concepts: Vec<Concept>,
    pub pairs: Vec<SlideCaptionPair>,
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn find(&self, slide_id: &str) -> Option<&SlideCaptionPair> {
        self.pairs.iter().find(|p| p.slide.slide_id == slide_id)
    }

    /// All whitespace tokens used by captions, concept sentences, and instruction records,
    /// in first-appearance order.
    pub fn tokens(&self) -> Vec<String> {
        let mut seen = BTreeMap::new();
        let mut out = Vec::new();
        let mut push = |t: &str| {
            if !seen.contains_key(t) {
                seen.insert(t.to_string(), ());
                out.push(t.to_string());
            }
        };
        for c in &self.concepts {
            c.sentence.split_whitespace().for_each(&mut push);
        }
        for p in &self.pairs {
            for s in &p.caption {
                s.split_whitespace().for_each(&mut push);
            }
            for r in &p.instruction_records {
                r.prompt.split_whitespace().for_each(&mut push);
                r.answer.split_whitespace().for_each(&mut push);
            }
        }
        out
    }
}

fn unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = Float::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn make_concepts<R: Rng>(config: &CorpusConfig, rng: &mut R) -> Result<Vec<Concept>> {
    let mut sigs: Vec<Vec<f64>> = Vec::with_capacity(config.num_concepts);
    let mut attempts = 0;
    while sigs.len() < config.num_concepts {
        attempts += 1;
        if attempts > MAX_SIGNATURE_ATTEMPTS {
            return Err(Error::Config(format!(
                "cannot place {} concept signatures with pairwise cosine < {MAX_SIGNATURE_COSINE} in raw_dim {}",
                config.num_concepts, config.raw_dim
            )));
        }
        let v = unit_vector(config.raw_dim, rng);
        let ok = sigs
            .iter()
            .all(|s| s.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() < MAX_SIGNATURE_COSINE);
        if ok {
            sigs.push(v);
        }
    }
    Ok(sigs
        .into_iter()
        .enumerate()
        .map(|(id, sig)| {
            let name = format!("{}_{}", STEMS[id % STEMS.len()], id);
            let sentence = TEMPLATES[id % TEMPLATES.len()].replace("{}", &name);
            Concept {
                id: id as u32,
                name,
                signature: sig.into_iter().map(|x| x as f32).collect(),
                sentence,
            }
        })
        .collect())
}

/// Summary sentence naming the given concepts.
pub fn summary_sentence(names: &[&str]) -> String {
    format!("in summary the slide shows {} .", names.join(" and "))
}

/// Deterministic corpus for a fixed `config.seed`.
pub fn generate_corpus(config: &CorpusConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let concepts = make_concepts(config, &mut rng)?;
    let grid = region_grid(config.regions_per_slide);
    let (n, m, d) = (config.regions_per_slide, config.patches_per_region, config.raw_dim);
    let noise_std = config.noise / Float::sqrt(d as f64);
    let background_std = 1.0 / Float::sqrt(d as f64);

    let mut pairs = Vec::with_capacity(config.num_pairs);
    for p in 0..config.num_pairs {
        let chosen = index::sample(&mut rng, config.num_concepts, config.concepts_per_slide).into_vec();
        let mut placed = index::sample(&mut rng, n, config.concepts_per_slide).into_vec();
        placed.sort_unstable();
        let mut regions = alloc::vec![None; n];
        for (&region, &concept) in placed.iter().zip(&chosen) {
            regions[region] = Some(concept as u32);
        }

        let mut patches = Vec::with_capacity(n * m * d);
        for region in &regions {
            for _ in 0..m {
                match region {
                    Some(c) => {
                        let sig = &concepts[*c as usize].signature;
                        for &s in sig {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            patches.push((s as f64 + noise_std * z) as f32);
                        }
                    }
                    None => {
                        for _ in 0..d {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            patches.push((background_std * z) as f32);
                        }
                    }
                }
            }
        }

        let mut caption: Vec<String> = regions
            .iter()
            .flatten()
            .map(|&c| concepts[c as usize].sentence.clone())
            .collect();
        let mut present: Vec<u32> = regions.iter().flatten().copied().collect();
        present.sort_unstable();
        let names: Vec<&str> = present.iter().map(|&c| concepts[c as usize].name.as_str()).collect();
        caption.push(summary_sentence(&names));

        pairs.push(SlideCaptionPair {
            slide: SyntheticSlide {
                slide_id: format!("slide_{p:05}"),
                grid,
                patches_per_region: m,
                raw_dim: d,
                regions,
                patches,
            },
            caption,
            instruction_records: alloc::vec![InstructionRecord {
                prompt: CONCEPT_PROMPT.to_string(),
                answer: names.join(" "),
            }],
        });
    }
    Ok(SyntheticCorpus {
        config: config.clone(),
        concepts,
        pairs,
    })
}

/// Splits into disjoint `(train, val, test)` corpora.
///
/// Validation and test sizes are `round(n · fraction)`; train takes the
/// remainder. Membership is drawn with `seed`; each split keeps corpus order.
pub fn split_corpus(
    corpus: &SyntheticCorpus,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(SyntheticCorpus, SyntheticCorpus, SyntheticCorpus)> {
    let (tr, va, te) = fractions;
    for (name, f) in [("train", tr), ("val", va), ("test", te)] {
        if !(f > 0.0 && f.is_finite()) {
            return Err(Error::Config(format!("{name} fraction must be positive, got {f}")));
        }
    }
    let sum = tr + va + te;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must sum to 1, got {sum}")));
    }
    let n = corpus.len();
    let n_val = (n as f64 * va).round() as usize;
    let n_test = (n as f64 * te).round() as usize;
    if n_val + n_test > n {
        return Err(Error::Config(format!("split of {n} pairs leaves no room for train")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = index::sample(&mut rng, n, n).into_vec();
    let mut assign = alloc::vec![0u8; n];
    for &i in &order[..n_val] {
        assign[i] = 1;
    }
    for &i in &order[n_val..n_val + n_test] {
        assign[i] = 2;
    }
    let take = |which: u8| SyntheticCorpus {
        config: corpus.config.clone(),
        concepts: corpus.concepts.clone(),
        pairs: corpus
            .pairs
            .iter()
            .zip(&assign)
            .filter(|(_, &a)| a == which)
            .map(|(p, _)| p.clone())
            .collect(),
    };
    Ok((take(0), take(1), take(2)))
}
