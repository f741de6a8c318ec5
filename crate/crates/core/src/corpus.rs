//! Dataset ingestion, fixed-length sampling and seeded splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};
use crate::tokenize::pre_tokenize;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub text: String,
    pub author: Option<String>,
    pub source_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<String>,
    pub author: String,
}

impl Sample {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// NFC, whitespace runs collapsed to one space, ends trimmed.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Reads `<root>/<author>/<file>.txt`, one document per file, in path order.
pub fn ingest(root: &Path) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for author_dir in sorted_entries(root)? {
        if !author_dir.is_dir() {
            continue;
        }
        let author = author_dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::data(format!("author directory {} is not valid UTF-8", author_dir.display())))?
            .to_string();
        let files: Vec<PathBuf> = sorted_entries(&author_dir)?
            .into_iter()
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "txt"))
            .collect();
        if files.is_empty() {
            log::warn!("skipping author directory {} with no .txt files", author_dir.display());
            continue;
        }
        for path in files {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let raw = String::from_utf8(bytes)
                .map_err(|_| Error::data(format!("{} is not valid UTF-8", path.display())))?;
            let text = normalize(&raw);
            if text.is_empty() {
                log::warn!("skipping {}: no text after normalization", path.display());
                continue;
            }
            let source_id = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().into_owned();
            docs.push(Document {
                text,
                author: Some(author.clone()),
                source_id,
            });
        }
    }
    Ok(docs)
}

/// Splits every document into consecutive samples of exactly `chunk_words`
/// word tokens; the remainder is dropped. Unlabeled documents are skipped.
pub fn chunk_documents(docs: &[Document], chunk_words: usize) -> Result<Vec<Sample>> {
    if chunk_words == 0 {
        return Err(Error::invalid("chunk size must be at least one word"));
    }
    let mut out = Vec::new();
    for doc in docs {
        let Some(author) = &doc.author else { continue };
        let words = pre_tokenize(&doc.text);
        for chunk in words.chunks_exact(chunk_words) {
            out.push(Sample {
                tokens: chunk.to_vec(),
                author: author.clone(),
            });
        }
    }
    Ok(out)
}

/// Sorted distinct authors and each sample's index into them.
pub fn author_labels(samples: &[Sample]) -> (Vec<String>, Vec<usize>) {
    let authors: Vec<String> = samples
        .iter()
        .map(|s| s.author.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let labels = samples
        .iter()
        .map(|s| authors.binary_search(&s.author).expect("author listed"))
        .collect();
    (authors, labels)
}

fn by_author(samples: &[Sample]) -> BTreeMap<&str, Vec<usize>> {
    let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        map.entry(s.author.as_str()).or_default().push(i);
    }
    map
}

/// Sample indices of one partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per author, holds out `max(1, ⌊n · test_frac⌋)` samples after a seeded
/// shuffle.
pub fn stratified_split(samples: &[Sample], test_frac: f64, seed: u64) -> Result<Split> {
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(Error::invalid(format!("test fraction {test_frac} must be in (0, 1)")));
    }
    let mut rng = Rng::stream(seed, Stream::Split);
    let mut split = Split {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (author, mut idx) in by_author(samples) {
        if idx.len() < 2 {
            return Err(Error::data(format!("author {author:?} has {} sample(s); at least 2 needed", idx.len())));
        }
        rng.shuffle(&mut idx);
        let n_test = ((idx.len() as f64 * test_frac).floor() as usize).max(1);
        split.test.extend_from_slice(&idx[..n_test]);
        split.train.extend_from_slice(&idx[n_test..]);
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// `k` folds; fold `i` validates on every author's `i`-th part. Part sizes
/// within an author differ by at most one.
pub fn kfold_split(samples: &[Sample], k: usize, seed: u64) -> Result<Vec<Split>> {
    if k < 2 {
        return Err(Error::invalid("k-fold needs k >= 2"));
    }
    let mut rng = Rng::stream(seed, Stream::Split);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (author, mut idx) in by_author(samples) {
        if idx.len() < k {
            return Err(Error::data(format!("author {author:?} has {} samples, fewer than {k} folds", idx.len())));
        }
        rng.shuffle(&mut idx);
        let (base, extra) = (idx.len() / k, idx.len() % k);
        let mut start = 0;
        for (f, part) in parts.iter_mut().enumerate() {
            let len = base + usize::from(f < extra);
            part.extend_from_slice(&idx[start..start + len]);
            start += len;
        }
    }
    Ok((0..k)
        .map(|f| {
            let mut test = parts[f].clone();
            test.sort_unstable();
            let mut train: Vec<usize> = parts
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, p)| p.iter().copied())
                .collect();
            train.sort_unstable();
            Split { train, test }
        })
        .collect())
}

/// Picks `n_authors` authors at random and subsamples each to the smallest
/// count among them. Returns sorted sample indices.
pub fn balanced_subset(samples: &[Sample], n_authors: usize, seed: u64) -> Result<Vec<usize>> {
    if n_authors < 2 {
        return Err(Error::invalid("a subset needs at least 2 authors"));
    }
    let groups = by_author(samples);
    if n_authors > groups.len() {
        return Err(Error::invalid(format!(
            "asked for {n_authors} authors but only {} are present",
            groups.len()
        )));
    }
    let mut rng = Rng::stream(seed, Stream::Sample);
    let mut authors: Vec<&str> = groups.keys().copied().collect();
    rng.shuffle(&mut authors);
    authors.truncate(n_authors);
    authors.sort_unstable();
    let min = authors.iter().map(|a| groups[a].len()).min().expect("n_authors >= 2");
    let mut out = Vec::with_capacity(min * n_authors);
    for a in authors {
        let mut idx = groups[a].clone();
        rng.shuffle(&mut idx);
        out.extend_from_slice(&idx[..min]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Split manifest as written next to a run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub authors: Vec<String>,
    pub folds: Vec<Split>,
}

/// Deterministic toy corpora for desk-scale experiments.
pub mod synthetic {
    use super::*;

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct SyntheticConfig {
        pub n_authors: usize,
        pub samples_per_author: usize,
        pub words_per_sample: usize,
        /// Distinct words owned by each author.
        pub lexicon_size: usize,
        /// Shared by every author.
        pub alphabet: String,
        pub min_word_len: usize,
        pub max_word_len: usize,
    }

    impl Default for SyntheticConfig {
        fn default() -> Self {
            SyntheticConfig {
                n_authors: 4,
                samples_per_author: 200,
                words_per_sample: 100,
                lexicon_size: 12,
                alphabet: "abcdefghijklmnopqrst".into(),
                min_word_len: 2,
                max_word_len: 4,
            }
        }
    }

    /// One disjoint lexicon per author over the shared alphabet.
    pub fn lexicons(config: &SyntheticConfig, seed: u64) -> Result<Vec<Vec<String>>> {
        let letters: Vec<char> = config.alphabet.chars().collect();
        if letters.is_empty() || config.min_word_len == 0 || config.max_word_len < config.min_word_len {
            return Err(Error::invalid("synthetic alphabet and word lengths are inconsistent"));
        }
        let needed = config.n_authors * config.lexicon_size;
        let possible: f64 = (config.min_word_len..=config.max_word_len)
            .map(|l| (letters.len() as f64).powi(l as i32))
            .sum();
        if needed as f64 > possible / 2.0 {
            return Err(Error::invalid("alphabet too small for the requested lexicons"));
        }
        let mut rng = Rng::stream(seed, Stream::Data);
        let mut seen = BTreeSet::new();
        let mut words = Vec::with_capacity(needed);
        while words.len() < needed {
            let len = config.min_word_len + rng.below(config.max_word_len - config.min_word_len + 1);
            let w: String = (0..len).map(|_| letters[rng.below(letters.len())]).collect();
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        Ok(words.chunks(config.lexicon_size).map(<[String]>::to_vec).collect())
    }

    /// Word sequence where each word's successor is drawn from a small,
    /// fixed set of followers, so the stream has learnable structure.
    fn walk(lexicon: &[String], n_words: usize, rng: &mut Rng, followers: &[Vec<usize>]) -> Vec<String> {
        let mut cur = rng.below(lexicon.len());
        let mut out = Vec::with_capacity(n_words);
        for _ in 0..n_words {
            out.push(lexicon[cur].clone());
            let next = &followers[cur];
            cur = next[rng.below(next.len())];
        }
        out
    }

    fn follower_table(n: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
        (0..n).map(|_| (0..3).map(|_| rng.below(n)).collect()).collect()
    }

    /// One document per author holding `samples_per_author ·
    /// words_per_sample` words from that author's lexicon.
    pub fn author_documents(config: &SyntheticConfig, seed: u64) -> Result<Vec<Document>> {
        let lex = lexicons(config, seed)?;
        let mut rng = Rng::stream(seed, Stream::Sample);
        let n_words = config.samples_per_author * config.words_per_sample;
        Ok(lex
            .iter()
            .enumerate()
            .map(|(a, words)| {
                let followers = follower_table(words.len(), &mut rng);
                Document {
                    text: walk(words, n_words, &mut rng, &followers).join(" "),
                    author: Some(format!("author{a}")),
                    source_id: format!("synthetic/author{a}"),
                }
            })
            .collect())
    }

    /// Samples of exactly `words_per_sample` words, `samples_per_author` per
    /// author.
    pub fn author_samples(config: &SyntheticConfig, seed: u64) -> Result<Vec<Sample>> {
        chunk_documents(&author_documents(config, seed)?, config.words_per_sample)
    }

    /// Unlabeled text of roughly `n_chars` characters mixing every author's
    /// lexicon, for language-model pretraining.
    pub fn general_text(config: &SyntheticConfig, seed: u64, n_chars: usize) -> Result<String> {
        let lex = lexicons(config, seed)?;
        let all: Vec<String> = lex.concat();
        let mut rng = Rng::stream(seed, Stream::Shuffle);
        let followers = follower_table(all.len(), &mut rng);
        let mut text = String::with_capacity(n_chars + 16);
        let mut cur = rng.below(all.len());
        while text.len() < n_chars {
            if !text.is_empty() {
                text.push(' ');
            }
            text.push_str(&all[cur]);
            let next = &followers[cur];
            cur = next[rng.below(next.len())];
        }
        Ok(text)
    }
}
