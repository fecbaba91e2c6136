//! Sentence segmentation, subcaption sampling, vocabulary, and the text encoder.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{Attention, FeedForward, LayerNorm};
use crate::params::{normal_matrix, ParamId, ParamStore};
use crate::tensor::Real;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const UNK: u32 = 4;
pub const RESERVED: [&str; 5] = ["[PAD]", "[CLS]", "[BOS]", "[EOS]", "[UNK]"];

/// Splits a caption into sentences.
///
/// A sentence ends at `.`, `!` or `?` followed by whitespace or the end of
/// the text; the terminator stays with its sentence. A trailing fragment
/// without terminator is kept as the last sentence.
pub fn segment_sentences(caption: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = caption.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let boundary = chars.peek().is_none_or(|&(_, n)| n.is_whitespace());
            if boundary {
                let end = i + c.len_utf8();
                push_trimmed(&mut out, &caption[start..end]);
                start = end;
            }
        }
    }
    push_trimmed(&mut out, &caption[start..]);
    if out.is_empty() {
        return Err(Error::Empty("caption has no sentences".into()));
    }
    Ok(out)
}

fn push_trimmed(out: &mut Vec<String>, s: &str) {
    let t = s.trim();
    if !t.is_empty() {
        out.push(t.to_string());
    }
}

/// Token ↔ id map. Ids `0..5` are reserved; corpus tokens start at 5.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self::new();
        for t in tokens {
            v.insert(t.as_ref());
        }
        v
    }

    /// Id of `token`, inserting it if new.
    pub fn insert(&mut self, token: &str) -> u32 {
        if let Some(id) = self.lookup(token) {
            return id;
        }
        let id = (RESERVED.len() + self.tokens.len()) as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn lookup(&self, token: &str) -> Option<u32> {
        if let Some(r) = RESERVED.iter().position(|&r| r == token) {
            return Some(r as u32);
        }
        self.index.get(token).copied()
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> u32 {
        self.lookup(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        let i = id as usize;
        if i < RESERVED.len() {
            Some(RESERVED[i])
        } else {
            self.tokens.get(i - RESERVED.len()).map(String::as_str)
        }
    }

    /// Size including reserved ids.
    pub fn len(&self) -> usize {
        RESERVED.len() + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace tokenization with [`UNK`] fallback.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with spaces, skipping PAD/CLS/BOS/EOS.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| !matches!(i, PAD | CLS | BOS | EOS))
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK as usize]))
            .collect();
        words.join(" ")
    }
}

/// A sampled subset of caption sentences and its encoder input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subcaption {
    /// Sorted, non-empty sentence indices.
    pub indices: Vec<usize>,
    /// `[CLS]` followed by the selected sentences' tokens in caption order.
    pub tokens: Vec<u32>,
}

impl Subcaption {
    pub fn from_indices(sentences: &[Vec<u32>], indices: Vec<usize>) -> Self {
        let mut tokens = alloc::vec![CLS];
        for &i in &indices {
            tokens.extend_from_slice(&sentences[i]);
        }
        Self { indices, tokens }
    }

    /// The whole caption as one subcaption.
    pub fn full(sentences: &[Vec<u32>]) -> Self {
        Self::from_indices(sentences, (0..sentences.len()).collect())
    }
}

/// Draws `k` subcaptions, each keeping every sentence independently with
/// probability `p_keep` and redrawing when nothing was kept.
pub fn sample_subcaptions<R: Rng + ?Sized>(
    sentences: &[Vec<u32>],
    k: usize,
    p_keep: f64,
    rng: &mut R,
) -> Result<Vec<Subcaption>> {
    if sentences.is_empty() {
        return Err(Error::Empty("no sentences to sample from".into()));
    }
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    if !(p_keep > 0.0 && p_keep <= 1.0) {
        return Err(Error::Config(format!("p_keep must be in (0, 1], got {p_keep}")));
    }
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let indices = loop {
            let picked: Vec<usize> = (0..sentences.len())
                .filter(|_| rng.random::<f64>() < p_keep)
                .collect();
            if !picked.is_empty() {
                break picked;
            }
        };
        out.push(Subcaption::from_indices(sentences, indices));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d: usize,
    pub layers: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

/// Pre-norm transformer encoder pooled at the `[CLS]` position.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub ln_out: LayerNorm,
}

impl TextEncoder {
    pub fn register<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: TextEncoderConfig, rng: &mut R) -> Self {
        let d = config.d;
        let token_embedding = store.add("text.token_embedding", normal_matrix(config.vocab_size, d, 1.0, rng), false);
        let position_embedding = store.add("text.position_embedding", normal_matrix(config.max_len, d, 0.1, rng), false);
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("text.layer{l}");
                EncoderLayer {
                    ln_attn: LayerNorm::register(store, &format!("{p}.ln_attn"), d),
                    attn: Attention::register(store, &format!("{p}.attn"), d, rng),
                    ln_ffn: LayerNorm::register(store, &format!("{p}.ln_ffn"), d),
                    ffn: FeedForward::register(store, &format!("{p}.ffn"), d, 4 * d, rng),
                }
            })
            .collect();
        let ln_out = LayerNorm::register(store, "text.ln_out", d);
        Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            ln_out,
        }
    }

    fn check(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        if ids[0] != CLS {
            return Err(Error::Config("text encoder input must start with [CLS]".into()));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::TooLong {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::OutOfRange(format!("token id {bad} >= vocab size {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Final-layer hidden state at `[CLS]`, shape `1 × d`.
    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, ids: &[u32]) -> Result<NodeId> {
        self.check(ids)?;
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let (tok, pos) = (g.param(self.token_embedding), g.param(self.position_embedding));
        let te = g.gather_rows(tok, &idx);
        let pe = g.gather_rows(pos, &positions);
        let mut x = g.add(te, pe);
        for layer in &self.layers {
            let h = layer.ln_attn.forward(g, x);
            let a = layer.attn.forward(g, h, h, None);
            x = g.add(x, a);
            let h = layer.ln_ffn.forward(g, x);
            let f = layer.ffn.forward(g, h);
            x = g.add(x, f);
        }
        let cls = g.slice_rows(x, 0, 1);
        Ok(self.ln_out.forward(g, cls))
    }

    /// Encodes several sequences and stacks the results, `count × d`.
    pub fn encode_many<T: Real>(&self, g: &mut Graph<'_, T>, seqs: &[&[u32]]) -> Result<NodeId> {
        let rows = seqs.iter().map(|s| self.encode(g, s)).collect::<Result<Vec<_>>>()?;
        Ok(g.concat_rows(&rows))
    }
}
