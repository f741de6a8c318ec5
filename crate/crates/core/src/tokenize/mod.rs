//! Word, subword (unigram) and character tokenization.

pub mod unigram;
pub mod vocab;
pub mod word;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use unigram::{train_unigram, SubwordModel, UnigramTrainer, WORD_BOUNDARY};
pub use vocab::{fnv1a64, Vocab, BOS, CHAR_SPECIALS, EOS, PAD, SUBWORD_SPECIALS, UNK, WORD_SPECIALS};
pub use word::{build_word_vocab, pre_tokenize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Word,
    Subword,
    Char,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Word => "word",
            Mode::Subword => "subword",
            Mode::Char => "char",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Mode::Word),
            "subword" => Ok(Mode::Subword),
            "char" => Ok(Mode::Char),
            other => Err(Error::invalid(format!("unknown tokenizer mode {other:?}"))),
        }
    }
}

/// Sorted distinct code points of `corpus` after the character-mode specials.
pub fn build_char_vocab(corpus: &str) -> Vocab {
    let chars: BTreeSet<char> = corpus.chars().collect();
    Vocab::new(&CHAR_SPECIALS, chars.into_iter().map(String::from)).expect("distinct characters")
}

/// Word-mode token stream: pre-tokenized with repetitions marked.
pub fn word_tokens(text: &str) -> Vec<String> {
    word::mark_repetitions(&pre_tokenize(text))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    mode: Mode,
    vocab: Vocab,
    subword: Option<SubwordModel>,
}

impl Tokenizer {
    pub fn word(vocab: Vocab) -> Self {
        Tokenizer {
            mode: Mode::Word,
            vocab,
            subword: None,
        }
    }

    pub fn char(vocab: Vocab) -> Self {
        Tokenizer {
            mode: Mode::Char,
            vocab,
            subword: None,
        }
    }

    pub fn subword(model: SubwordModel) -> Self {
        Tokenizer {
            mode: Mode::Subword,
            vocab: model.vocab(),
            subword: Some(model),
        }
    }

    /// Trains a tokenizer of the given mode with the default size limits.
    pub fn train(mode: Mode, corpus: &str) -> Result<Self> {
        match mode {
            Mode::Word => Ok(Tokenizer::word(build_word_vocab(&word_tokens(corpus), 60_000, 3)?)),
            Mode::Char => {
                if corpus.is_empty() {
                    return Err(Error::data("cannot build a character vocabulary from an empty corpus"));
                }
                Ok(Tokenizer::char(build_char_vocab(corpus)))
            }
            Mode::Subword => Ok(Tokenizer::subword(train_unigram(corpus, 30_000, 3)?)),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn subword_model(&self) -> Option<&SubwordModel> {
        self.subword.as_ref()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn fingerprint(&self) -> u64 {
        self.vocab.fingerprint()
    }

    /// Token ids without `<bos>`/`<end>`.
    pub fn encode_body(&self, text: &str) -> Vec<usize> {
        match self.mode {
            Mode::Word => word_tokens(text).iter().map(|t| self.vocab.id_or_unk(t)).collect(),
            Mode::Char => {
                let mut buf = [0u8; 4];
                text.chars().map(|c| self.vocab.id_or_unk(c.encode_utf8(&mut buf))).collect()
            }
            Mode::Subword => {
                let model = self.subword.as_ref().expect("subword mode has a model");
                let mut out = Vec::new();
                for w in text.split_whitespace() {
                    let mut marked = String::with_capacity(w.len() + 3);
                    marked.push(WORD_BOUNDARY);
                    marked.push_str(w);
                    out.extend(model.segment_viterbi(&marked));
                }
                out
            }
        }
    }

    /// `<bos>`, the token ids of `text`, `<end>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let body = self.encode_body(text);
        let mut out = Vec::with_capacity(body.len() + 2);
        out.push(BOS);
        out.extend(body);
        out.push(EOS);
        out
    }

    /// Text for `ids`. `<bos>`, `<end>` and `<pad>` are dropped; `<unk>` is
    /// rendered literally.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut toks: Vec<String> = Vec::with_capacity(ids.len());
        for (position, &id) in ids.iter().enumerate() {
            let tok = self.vocab.token(id).ok_or(Error::TokenOutOfRange {
                position,
                id,
                vocab: self.vocab.len(),
            })?;
            if matches!(id, BOS | EOS | PAD) {
                continue;
            }
            toks.push(tok.to_string());
        }
        Ok(match self.mode {
            Mode::Char => toks.concat(),
            Mode::Word => word::expand_repetitions(&toks).join(" "),
            Mode::Subword => {
                let joined: String = toks.concat().replace(WORD_BOUNDARY, " ");
                joined.trim_start_matches(' ').to_string()
            }
        })
    }

    /// Word and char tokenizers are saved as vocabulary files, subword
    /// tokenizers as their piece table.
    pub fn save(&self, path: &Path) -> Result<()> {
        match &self.subword {
            Some(model) => model.save(path),
            None => self.vocab.save(path),
        }
    }

    pub fn to_file_string(&self) -> String {
        match &self.subword {
            Some(model) => model.to_tsv(),
            None => self.vocab.to_file_string(),
        }
    }

    /// Loads a file written by [`Tokenizer::save`], recognising the mode from
    /// its contents.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Tokenizer::from_file_string(&text)
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let first = text.lines().next().ok_or_else(|| Error::data("empty tokenizer file"))?;
        if first.contains('\t') {
            return Ok(Tokenizer::subword(SubwordModel::from_tsv(text)?));
        }
        let lines: Vec<&str> = text.lines().collect();
        let is_word = lines.len() >= WORD_SPECIALS.len() && lines[..WORD_SPECIALS.len()] == WORD_SPECIALS;
        if is_word {
            return Ok(Tokenizer::word(Vocab::from_file_string(text, WORD_SPECIALS.len())?));
        }
        if lines.len() >= CHAR_SPECIALS.len() && lines[..CHAR_SPECIALS.len()] == CHAR_SPECIALS {
            let vocab = Vocab::from_file_string(text, CHAR_SPECIALS.len())?;
            if vocab.regular_tokens().iter().any(|t| t.chars().count() != 1) {
                return Err(Error::data("character vocabulary contains multi-character tokens"));
            }
            return Ok(Tokenizer::char(vocab));
        }
        Err(Error::data("unrecognised tokenizer file"))
    }
}
