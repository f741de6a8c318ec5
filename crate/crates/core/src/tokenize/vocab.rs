use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK: usize = 0;
pub const PAD: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
/// Word mode only.
pub const REP: usize = 4;
/// Word mode only.
pub const WREP: usize = 5;

/// Specials for word and character vocabularies, in id order.
pub const WORD_SPECIALS: [&str; 6] = ["<unk>", "<pad>", "<bos>", "<end>", "<rep>", "<wrep>"];
pub const CHAR_SPECIALS: [&str; 4] = ["<unk>", "<pad>", "<bos>", "<end>"];
pub const SUBWORD_SPECIALS: [&str; 4] = ["<unk>", "<pad>", "<s>", "</s>"];

/// Bidirectional token/id map. Specials occupy ids `0..n_specials`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    n_specials: usize,
}

impl Vocab {
    pub fn new<I, S>(specials: &[&str], tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = specials.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (id, tok) in all.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::data(format!("duplicate vocabulary entry {tok:?}")));
            }
        }
        Ok(Vocab {
            tokens: all,
            index,
            n_specials: specials.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_specials(&self) -> usize {
        self.n_specials
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, falling back to `<unk>`.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < self.n_specials
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Non-special tokens.
    pub fn regular_tokens(&self) -> &[String] {
        &self.tokens[self.n_specials..]
    }

    /// One escaped token per line; line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(&escape(tok));
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(text: &str, n_specials: usize) -> Result<Self> {
        let lines: Vec<String> = text.lines().map(unescape).collect::<Result<_>>()?;
        if lines.len() < n_specials {
            return Err(Error::data("vocabulary file shorter than its special tokens"));
        }
        let specials: Vec<&str> = lines[..n_specials].iter().map(String::as_str).collect();
        Vocab::new(&specials, lines[n_specials..].iter().cloned())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    /// 64-bit FNV-1a of the vocabulary file bytes.
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.to_file_string().as_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Escapes backslash, newline, carriage return and tab so every token fits on
/// one line.
pub(crate) fn escape(token: &str) -> String {
    let mut out = String::with_capacity(token.len());
    for c in token.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

pub(crate) fn unescape(line: &str) -> Result<String> {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            other => return Err(Error::data(format!("bad escape \\{other:?} in vocabulary line {line:?}"))),
        }
    }
    Ok(out)
}
