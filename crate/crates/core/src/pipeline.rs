//! Corpus → splits → vocabulary → encoded datasets.

use crate::corpus::{split_corpus, SyntheticCorpus};
use crate::data::{build_vocabulary, prepare, Dataset};
use crate::error::Result;
use crate::model::ModelConfig;
use crate::partition::LinearTanhEncoder;
use crate::text::Vocabulary;
use crate::train::RunConfig;

/// Everything derived from a corpus before training starts.
#[derive(Clone, Debug)]
pub struct RunData {
    pub vocab: Vocabulary,
    pub encoder: LinearTanhEncoder<f32>,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl RunData {
    /// Splits with the corpus seed, so every training seed sees the same partition.
    pub fn new(config: &RunConfig, corpus: &SyntheticCorpus) -> Result<Self> {
        let s = config.split;
        let (tr, va, te) = split_corpus(corpus, (s.train, s.val, s.test), corpus.config.seed)?;
        let vocab = build_vocabulary(corpus);
        let encoder = LinearTanhEncoder::random(corpus.config.raw_dim, config.model.d, config.model.encoder_seed);
        Ok(Self {
            train: prepare(&tr, &vocab, &encoder)?,
            val: prepare(&va, &vocab, &encoder)?,
            test: prepare(&te, &vocab, &encoder)?,
            vocab,
            encoder,
        })
    }

    pub fn splits(&self) -> [&Dataset; 3] {
        [&self.train, &self.val, &self.test]
    }

    pub fn model_config(&self, config: &RunConfig) -> ModelConfig {
        let text = self.splits().iter().map(|d| d.max_caption_len()).max().unwrap_or(1);
        let dec = self.splits().iter().map(|d| d.max_instruction_len()).max().unwrap_or(1);
        config.model_config(self.vocab.len(), text, dec + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_corpus;

    #[test]
    fn default_split_sizes() {
        let cfg = RunConfig::default();
        let corpus = generate_corpus(&cfg.corpus).unwrap();
        let rd = RunData::new(&cfg, &corpus).unwrap();
        assert_eq!((rd.train.len(), rd.val.len(), rd.test.len()), (256, 20, 64));
        let mc = rd.model_config(&cfg);
        assert!(mc.validate().is_ok());
        assert_eq!(rd.train.pairs[0].features[0].shape(), (16, 32));
    }
}
