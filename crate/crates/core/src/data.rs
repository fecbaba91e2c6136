//! Tokenized, feature-encoded view of a corpus, ready for training and evaluation.

use alloc::string::String;
use alloc::vec::Vec;

use crate::corpus::{PlantedSentence, SyntheticCorpus};
use crate::error::{Error, Result};
use crate::partition::{encode_slide, FeatureMatrix, PatchEncoder};
use crate::text::{Vocabulary, CLS, EOS};

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedPair {
    pub slide_id: String,
    pub grid: (usize, usize),
    /// One `M × d` block per region.
    pub features: Vec<FeatureMatrix<f32>>,
    /// Caption sentences as token ids, without `[CLS]`.
    pub sentences: Vec<Vec<u32>>,
    pub planted: Vec<PlantedSentence>,
    /// `(prompt ids, answer ids + EOS)` per instruction record.
    pub instructions: Vec<(Vec<u32>, Vec<u32>)>,
    /// Answer text of the first instruction record.
    pub answer: String,
}

impl PreparedPair {
    /// `[CLS]` followed by every caption sentence.
    pub fn caption_ids(&self) -> Vec<u32> {
        let mut ids = alloc::vec![CLS];
        for s in &self.sentences {
            ids.extend_from_slice(s);
        }
        ids
    }

    pub fn sentence_ids(&self, index: usize) -> Vec<u32> {
        let mut ids = alloc::vec![CLS];
        ids.extend_from_slice(&self.sentences[index]);
        ids
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<PreparedPair>,
    /// `[CLS]` + concept sentence, indexed by concept id.
    pub concept_prompts: Vec<Vec<u32>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Longest `[CLS]`-prefixed caption.
    pub fn max_caption_len(&self) -> usize {
        self.pairs.iter().map(|p| p.caption_ids().len()).max().unwrap_or(1)
    }

    /// Longest prompt + answer (with EOS) pair.
    pub fn max_instruction_len(&self) -> usize {
        self.pairs
            .iter()
            .flat_map(|p| p.instructions.iter().map(|(q, a)| q.len() + a.len()))
            .max()
            .unwrap_or(1)
    }
}

/// Vocabulary over every token in the corpus, in first-appearance order.
pub fn build_vocabulary(corpus: &SyntheticCorpus) -> Vocabulary {
    Vocabulary::from_tokens(corpus.tokens())
}

fn encode_ids(vocab: &Vocabulary, text: &str) -> Vec<u32> {
    vocab.tokenize(text)
}

pub fn prepare<E: PatchEncoder<f32> + ?Sized>(corpus: &SyntheticCorpus, vocab: &Vocabulary, encoder: &E) -> Result<Dataset> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus has no pairs".into()));
    }
    let pairs = corpus
        .pairs
        .iter()
        .map(|p| {
            let instructions = p
                .instruction_records
                .iter()
                .map(|r| {
                    let mut a = encode_ids(vocab, &r.answer);
                    a.push(EOS);
                    (encode_ids(vocab, &r.prompt), a)
                })
                .collect();
            Ok(PreparedPair {
                slide_id: p.slide.slide_id.clone(),
                grid: p.slide.grid,
                features: encode_slide(&p.slide, encoder)?,
                sentences: p.caption.iter().map(|s| encode_ids(vocab, s)).collect(),
                planted: p.planted_sentences(),
                instructions,
                answer: p.instruction_records.first().map(|r| r.answer.clone()).unwrap_or_default(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let concept_prompts = corpus
        .concepts
        .iter()
        .map(|c| {
            let mut ids = alloc::vec![CLS];
            ids.extend(encode_ids(vocab, &c.sentence));
            ids
        })
        .collect();
    Ok(Dataset { pairs, concept_prompts })
}
