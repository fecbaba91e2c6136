//! The assembled model: text encoder, shared query transformer, text-region
//! attention, `η`, and the instruction head, all in one parameter store.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{register_eta, AttentionProjections, LossConfig, RegionReadout};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::instruct::{DecoderConfig, InstructionHead};
use crate::params::{ParamId, ParamStore};
use crate::qformer::{QFormer, QFormerConfig};
use crate::tensor::{Matrix, Real};
use crate::text::{TextEncoder, TextEncoderConfig};

/// Component switches. Each `false` reproduces one ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub use_region_qformer: bool,
    pub use_slide_qformer: bool,
    pub use_text_region_attention: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_region_qformer: true,
            use_slide_qformer: true,
            use_text_region_attention: true,
        }
    }
}

pub const ABLATION_FLAGS: [&str; 3] = ["region_qformer", "slide_qformer", "text_region_attention"];

impl Ablation {
    /// Turns one component off.
    pub fn disable(mut self, flag: &str) -> Result<Self> {
        match flag {
            "region_qformer" => self.use_region_qformer = false,
            "slide_qformer" => self.use_slide_qformer = false,
            "text_region_attention" => self.use_text_region_attention = false,
            other => return Err(Error::UnknownAblation(other.into())),
        }
        Ok(self)
    }

    pub fn is_full(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub text_max_len: usize,
    pub d: usize,
    pub n_queries: usize,
    pub qformer_blocks: usize,
    pub text_layers: usize,
    pub d_dec: usize,
    pub decoder_layers: usize,
    pub decoder_max_text: usize,
    /// Regions per slide; fixes the visual prefix length.
    pub regions_per_slide: usize,
    pub eta_init: f64,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("text_max_len", self.text_max_len),
            ("d", self.d),
            ("n_queries", self.n_queries),
            ("qformer_blocks", self.qformer_blocks),
            ("d_dec", self.d_dec),
            ("decoder_max_text", self.decoder_max_text),
            ("regions_per_slide", self.regions_per_slide),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.eta_init.is_finite() {
            return Err(Error::Config("eta_init must be finite".into()));
        }
        if !self.ablation.use_region_qformer && !self.ablation.use_slide_qformer {
            return Err(Error::Config("cannot disable both region and slide query transformers".into()));
        }
        Ok(())
    }

    pub fn prefix_len(&self) -> usize {
        (1 + self.regions_per_slide) * self.n_queries
    }
}

/// Visual outputs of one slide.
#[derive(Clone, Copy, Debug)]
pub struct VisualOut {
    /// `(N · N_q) × d`, present when requested or needed.
    pub regions: Option<NodeId>,
    /// `N_q × d`.
    pub slide: NodeId,
    /// `1 × d`.
    pub pooled: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathFlip {
    pub config: ModelConfig,
    pub text: TextEncoder,
    pub qformer: QFormer,
    pub attention: Option<AttentionProjections>,
    pub eta: ParamId,
    pub head: InstructionHead,
}

impl PathFlip {
    /// Registers every parameter, drawing initial values from `seed`.
    pub fn init<T: Real>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = TextEncoder::register(
            &mut store,
            TextEncoderConfig {
                vocab_size: config.vocab_size,
                max_len: config.text_max_len,
                d: config.d,
                layers: config.text_layers,
            },
            &mut rng,
        );
        let qformer = QFormer::register(
            &mut store,
            QFormerConfig {
                d: config.d,
                num_queries: config.n_queries,
                blocks: config.qformer_blocks,
            },
            &mut rng,
        );
        let ab = config.ablation;
        let attention = (ab.use_region_qformer && ab.use_text_region_attention)
            .then(|| AttentionProjections::register(&mut store, config.d, &mut rng));
        let eta = register_eta(&mut store, config.eta_init);
        let head = InstructionHead::register(
            &mut store,
            DecoderConfig {
                vocab_size: config.vocab_size,
                d_visual: config.d,
                d_model: config.d_dec,
                layers: config.decoder_layers,
                max_text: config.decoder_max_text,
                max_prefix: config.prefix_len(),
            },
            &mut rng,
        );
        Ok((
            Self {
                config,
                text,
                qformer,
                attention,
                eta,
                head,
            },
            store,
        ))
    }

    /// Rebuilds the model layout for `config` and adopts the values in `loaded`,
    /// which must hold exactly the same names and shapes in the same order.
    pub fn adopt<T: Real>(config: ModelConfig, loaded: ParamStore<T>) -> Result<(Self, ParamStore<T>)> {
        let (model, fresh) = Self::init::<T>(config, 0)?;
        if fresh.len() != loaded.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} parameters, model expects {}",
                loaded.len(),
                fresh.len()
            )));
        }
        for (a, b) in fresh.entries().iter().zip(loaded.entries()) {
            if a.name != b.name {
                return Err(Error::MissingParam(a.name.clone()));
            }
            if a.value.shape() != b.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    a.name,
                    b.value.shape(),
                    a.value.shape()
                )));
            }
        }
        Ok((model, loaded))
    }

    pub fn loss_config(&self, tau: f64) -> LossConfig {
        let ab = self.config.ablation;
        let region = ab.use_region_qformer.then(|| match self.attention {
            Some(p) => RegionReadout::Attention(p),
            None => RegionReadout::Mean,
        });
        LossConfig {
            region,
            global: true,
            tau,
        }
    }

    /// `1 × d` text embedding of a `[CLS]`-prefixed sequence.
    pub fn encode_text<T: Real>(&self, g: &mut Graph<'_, T>, ids: &[u32]) -> Result<NodeId> {
        self.text.encode(g, ids)
    }

    /// Runs the query transformer over one slide's per-region `M × d` feature nodes.
    pub fn visual<T: Real>(&self, g: &mut Graph<'_, T>, regions: &[NodeId], need_regions: bool) -> Result<VisualOut> {
        if regions.is_empty() {
            return Err(Error::Empty("slide has no regions".into()));
        }
        let ab = self.config.ablation;
        let vreg = if need_regions || ab.use_region_qformer || !ab.use_slide_qformer {
            Some(self.qformer.region_embeddings(g, regions)?)
        } else {
            None
        };
        let (slide, pooled) = if ab.use_slide_qformer {
            let all = g.concat_rows(regions);
            let slide = self.qformer.slide_embedding(g, all)?;
            (slide, g.mean_rows(slide))
        } else {
            let vreg = vreg.expect("region embeddings computed when the slide path is off");
            let nq = self.config.n_queries;
            let mut acc = g.slice_rows(vreg, 0, nq);
            for n in 1..regions.len() {
                let b = g.slice_rows(vreg, n * nq, nq);
                acc = g.add(acc, b);
            }
            let slide = g.scale(acc, T::one() / T::of(regions.len() as f64));
            (slide, g.mean_rows(vreg))
        };
        Ok(VisualOut {
            regions: vreg,
            slide,
            pooled,
        })
    }

    /// Feature blocks as graph constants.
    pub fn feature_nodes<T: Real>(g: &mut Graph<'_, T>, features: &[Matrix<f32>]) -> Vec<NodeId> {
        features.iter().map(|m| g.constant(m.cast())).collect()
    }

    /// Names of the parameters in each trainable stage.
    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("sigma.") || name.starts_with("decoder.")
    }
}
