//! Vocabulary file: one token per line; a token's id is its line index plus the reserved count.

use std::path::Path;

use pathflip_core::text::Vocabulary;

use super::{invalid, read_string, write, Result};

pub fn to_string(vocab: &Vocabulary) -> String {
    let mut s = String::new();
    for t in vocab.tokens() {
        s.push_str(t);
        s.push('\n');
    }
    s
}

pub fn parse(path: &Path, text: &str) -> Result<Vocabulary> {
    let mut v = Vocabulary::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || line.contains(char::is_whitespace) {
            return Err(invalid(path, format!("line {}: token must be non-empty without whitespace", i + 1)));
        }
        let before = v.len();
        v.insert(line);
        if v.len() == before {
            return Err(invalid(path, format!("line {}: duplicate or reserved token {line:?}", i + 1)));
        }
    }
    Ok(v)
}

pub fn save(path: &Path, vocab: &Vocabulary) -> Result<()> {
    write(path, to_string(vocab).as_bytes())
}

pub fn load(path: &Path) -> Result<Vocabulary> {
    parse(path, &read_string(path)?)
}
