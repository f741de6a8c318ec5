//! Unigram language-model subword segmentation.
//!
//! Training seeds a large candidate set of substrings, fits piece
//! probabilities by EM (forward-backward over each word's segmentation
//! lattice), and repeatedly prunes the multi-character pieces whose removal
//! costs the least likelihood until the target size is reached.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::vocab::{escape, unescape, Vocab, SUBWORD_SPECIALS, UNK};
use crate::error::{Error, Result};

/// Prefix marking word-initial pieces.
pub const WORD_BOUNDARY: char = '\u{2581}';

/// Score of an unknown character relative to the least likely piece.
const UNK_PENALTY: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SubwordModel {
    pieces: Vec<(String, f64)>,
    index: HashMap<String, usize>,
    max_piece_chars: usize,
    min_log_prob: f64,
}

impl SubwordModel {
    /// Builds a model from `(piece, log_prob)` pairs. Pieces must be unique,
    /// non-empty, and have finite negative log-probabilities.
    pub fn new(pieces: Vec<(String, f64)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pieces.len());
        let mut max_piece_chars = 1;
        let mut min_log_prob = 0.0f64;
        for (i, (piece, lp)) in pieces.iter().enumerate() {
            if piece.is_empty() {
                return Err(Error::data("empty subword piece"));
            }
            if !(lp.is_finite() && *lp < 0.0) {
                return Err(Error::data(format!("piece {piece:?} has invalid log-probability {lp}")));
            }
            if SUBWORD_SPECIALS.contains(&piece.as_str()) {
                return Err(Error::data(format!("piece {piece:?} collides with a special token")));
            }
            if index.insert(piece.clone(), i).is_some() {
                return Err(Error::data(format!("duplicate subword piece {piece:?}")));
            }
            max_piece_chars = max_piece_chars.max(piece.chars().count());
            min_log_prob = min_log_prob.min(*lp);
        }
        Ok(SubwordModel {
            pieces,
            index,
            max_piece_chars,
            min_log_prob,
        })
    }

    pub fn pieces(&self) -> &[(String, f64)] {
        &self.pieces
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn log_prob(&self, piece: &str) -> Option<f64> {
        self.index.get(piece).map(|&i| self.pieces[i].1)
    }

    /// Vocabulary id of a piece: specials first, then pieces in model order.
    pub fn piece_id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).map(|&i| i + SUBWORD_SPECIALS.len())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(&SUBWORD_SPECIALS, self.pieces.iter().map(|(p, _)| p.clone())).expect("pieces validated unique")
    }

    fn unk_score(&self) -> f64 {
        self.min_log_prob - UNK_PENALTY
    }

    /// Highest-scoring segmentation of `word` as vocabulary ids. Characters
    /// not covered by any piece become `<unk>`. Ties prefer fewer pieces, then
    /// the lexicographically smallest first piece.
    pub fn segment_viterbi(&self, word: &str) -> Vec<usize> {
        self.viterbi(word)
            .into_iter()
            .map(|s| match s {
                Seg::Piece(i) => i + SUBWORD_SPECIALS.len(),
                Seg::Unk => UNK,
            })
            .collect()
    }

    /// Segmentation as piece strings (`<unk>` for uncovered characters).
    pub fn segment_pieces(&self, word: &str) -> Vec<String> {
        self.viterbi(word)
            .into_iter()
            .map(|s| match s {
                Seg::Piece(i) => self.pieces[i].0.clone(),
                Seg::Unk => SUBWORD_SPECIALS[UNK].to_string(),
            })
            .collect()
    }

    /// Sum of piece log-probabilities of the Viterbi segmentation.
    pub fn viterbi_score(&self, word: &str) -> f64 {
        self.viterbi(word)
            .into_iter()
            .map(|s| match s {
                Seg::Piece(i) => self.pieces[i].1,
                Seg::Unk => self.unk_score(),
            })
            .sum()
    }

    fn viterbi(&self, word: &str) -> Vec<Seg> {
        self.viterbi_excluding(word, None)
    }

    /// Backward dynamic program over char positions; `excluded` removes one
    /// piece from consideration (used when scoring pruning candidates).
    fn viterbi_excluding(&self, word: &str, excluded: Option<usize>) -> Vec<Seg> {
        let bounds: Vec<usize> = word.char_indices().map(|(b, _)| b).chain(std::iter::once(word.len())).collect();
        let n = bounds.len() - 1;
        if n == 0 {
            return Vec::new();
        }
        #[derive(Clone)]
        struct Best {
            score: f64,
            count: usize,
            seg: Seg,
            next: usize,
        }
        let mut best: Vec<Option<Best>> = vec![None; n + 1];
        best[n] = Some(Best {
            score: 0.0,
            count: 0,
            seg: Seg::Unk,
            next: n,
        });
        for i in (0..n).rev() {
            let mut cur: Option<Best> = None;
            let mut first_piece: &str = "";
            for len in 1..=self.max_piece_chars.min(n - i) {
                let j = i + len;
                let Some(rest) = &best[j] else { continue };
                let text = &word[bounds[i]..bounds[j]];
                let Some(&p) = self.index.get(text) else { continue };
                if excluded == Some(p) {
                    continue;
                }
                let score = self.pieces[p].1 + rest.score;
                let count = rest.count + 1;
                let better = match &cur {
                    None => true,
                    Some(c) => {
                        score > c.score || (score == c.score && (count < c.count || (count == c.count && text < first_piece)))
                    }
                };
                if better {
                    first_piece = text;
                    cur = Some(Best {
                        score,
                        count,
                        seg: Seg::Piece(p),
                        next: j,
                    });
                }
            }
            if cur.is_none() {
                // No piece starts here: one character falls back to <unk>.
                let rest = best[i + 1].as_ref().expect("suffix always segmentable");
                cur = Some(Best {
                    score: self.unk_score() + rest.score,
                    count: rest.count + 1,
                    seg: Seg::Unk,
                    next: i + 1,
                });
            }
            best[i] = cur;
        }
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            let b = best[i].as_ref().expect("every position reachable through <unk>");
            out.push(b.seg);
            i = b.next;
        }
        out
    }

    /// `piece \t log_prob` per line, log-probabilities in shortest
    /// round-trip form.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (piece, lp) in &self.pieces {
            out.push_str(&escape(piece));
            out.push('\t');
            out.push_str(&lp.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut pieces = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let (piece, lp) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::data(format!("subword model line {} has no tab", lineno + 1)))?;
            let lp: f64 = lp
                .parse()
                .map_err(|_| Error::data(format!("subword model line {}: bad log-probability {lp:?}", lineno + 1)))?;
            pieces.push((unescape(piece)?, lp));
        }
        SubwordModel::new(pieces)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Seg {
    Piece(usize),
    Unk,
}

/// Training settings for [`train_unigram`].
#[derive(Clone, Debug)]
pub struct UnigramTrainer {
    pub target_size: usize,
    pub min_count: usize,
    pub max_piece_chars: usize,
    /// Fraction of multi-character pieces removed per pruning round.
    pub prune_fraction: f64,
    pub em_iterations: usize,
}

impl Default for UnigramTrainer {
    fn default() -> Self {
        UnigramTrainer {
            target_size: 30_000,
            min_count: 3,
            max_piece_chars: 8,
            prune_fraction: 0.2,
            em_iterations: 2,
        }
    }
}

/// Training words: boundary-marked, deduplicated, with corpus frequency.
#[derive(Clone, Debug)]
pub struct WordCounts {
    pub words: Vec<(String, f64)>,
}

impl WordCounts {
    pub fn from_corpus(corpus: &str) -> Self {
        let mut counts: BTreeMap<String, f64> = BTreeMap::new();
        for w in corpus.split_whitespace() {
            let mut marked = String::with_capacity(w.len() + 3);
            marked.push(WORD_BOUNDARY);
            marked.push_str(w);
            *counts.entry(marked).or_default() += 1.0;
        }
        WordCounts {
            words: counts.into_iter().collect(),
        }
    }
}

/// Result of one E-step.
#[derive(Clone, Debug)]
pub struct Expectation {
    /// Corpus log-likelihood under the current model.
    pub log_likelihood: f64,
    /// Expected occurrence count per piece, in model order.
    pub counts: Vec<f64>,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// E-step: expected piece counts by forward-backward over each word's lattice.
/// Words with no complete segmentation are skipped.
pub fn expected_counts(model: &SubwordModel, words: &WordCounts) -> Expectation {
    let mut counts = vec![0.0; model.pieces.len()];
    let mut log_likelihood = 0.0;
    // (start, end, piece) edges, reused across words.
    let mut edges: Vec<(usize, usize, usize)> = Vec::new();
    for (word, freq) in &words.words {
        let bounds: Vec<usize> = word.char_indices().map(|(b, _)| b).chain(std::iter::once(word.len())).collect();
        let n = bounds.len() - 1;
        edges.clear();
        for i in 0..n {
            for len in 1..=model.max_piece_chars.min(n - i) {
                if let Some(&p) = model.index.get(&word[bounds[i]..bounds[i + len]]) {
                    edges.push((i, i + len, p));
                }
            }
        }
        let mut alpha = vec![f64::NEG_INFINITY; n + 1];
        alpha[0] = 0.0;
        // Edges are sorted by start, so alpha[start] is final when visited.
        for &(s, e, p) in &edges {
            alpha[e] = log_add(alpha[e], alpha[s] + model.pieces[p].1);
        }
        let z = alpha[n];
        if z == f64::NEG_INFINITY {
            continue;
        }
        let mut beta = vec![f64::NEG_INFINITY; n + 1];
        beta[n] = 0.0;
        for &(s, e, p) in edges.iter().rev() {
            beta[s] = log_add(beta[s], beta[e] + model.pieces[p].1);
        }
        for &(s, e, p) in &edges {
            let post = (alpha[s] + model.pieces[p].1 + beta[e] - z).exp();
            counts[p] += freq * post;
        }
        log_likelihood += freq * z;
    }
    Expectation { log_likelihood, counts }
}

/// M-step: maximum-likelihood re-normalization of expected counts.
/// Multi-character pieces with zero expected count carry zero probability
/// and are dropped; single characters are floored so they always survive.
pub fn maximize(model: &SubwordModel, counts: &[f64]) -> Result<SubwordModel> {
    let floor = 1e-9;
    let kept: Vec<(String, f64)> = model
        .pieces
        .iter()
        .zip(counts)
        .filter_map(|((p, _), &c)| {
            let single = p.chars().count() == 1;
            if single {
                Some((p.clone(), c.max(floor)))
            } else if c > 0.0 {
                Some((p.clone(), c))
            } else {
                None
            }
        })
        .collect();
    let total: f64 = kept.iter().map(|(_, c)| c).sum();
    let pieces = kept
        .into_iter()
        .map(|(p, c)| {
            let lp = (c / total).ln();
            // A lone piece would get log-probability 0.
            (p, lp.min(-f64::EPSILON))
        })
        .collect();
    SubwordModel::new(pieces)
}

impl UnigramTrainer {
    pub fn train(&self, corpus: &str) -> Result<SubwordModel> {
        let words = WordCounts::from_corpus(corpus);
        if words.words.is_empty() {
            return Err(Error::data("cannot train a subword model on an empty corpus"));
        }
        let (mut model, training) = self.seed(&words)?;
        loop {
            for _ in 0..self.em_iterations {
                let e = expected_counts(&model, &training);
                model = maximize(&model, &e.counts)?;
            }
            if model.len() <= self.target_size {
                break;
            }
            model = self.prune(&model, &training)?;
        }
        Ok(finalize(model))
    }

    /// Seed set: every character seen at least `min_count` times plus every
    /// multi-character substring (up to `max_piece_chars`) with at least
    /// `min_count` occurrences. Initial probabilities are proportional to
    /// frequency times length.
    pub fn seed(&self, words: &WordCounts) -> Result<(SubwordModel, WordCounts)> {
        let mut char_counts: BTreeMap<char, f64> = BTreeMap::new();
        for (w, f) in &words.words {
            for c in w.chars() {
                *char_counts.entry(c).or_default() += f;
            }
        }
        let min = self.min_count as f64;
        let chars: BTreeMap<char, f64> = char_counts.into_iter().filter(|&(_, c)| c >= min).collect();
        if chars.is_empty() {
            return Err(Error::data("no character occurs often enough to seed the subword model"));
        }
        if self.target_size < chars.len() {
            return Err(Error::invalid(format!(
                "target size {} is smaller than the {} required characters",
                self.target_size,
                chars.len()
            )));
        }
        // Words using a rare character cannot be segmented without <unk>.
        let training = WordCounts {
            words: words
                .words
                .iter()
                .filter(|(w, _)| w.chars().all(|c| chars.contains_key(&c)))
                .cloned()
                .collect(),
        };
        let mut substrings: HashMap<&str, f64> = HashMap::new();
        for (w, f) in &training.words {
            let bounds: Vec<usize> = w.char_indices().map(|(b, _)| b).chain(std::iter::once(w.len())).collect();
            let n = bounds.len() - 1;
            for i in 0..n {
                for len in 2..=self.max_piece_chars.min(n - i) {
                    *substrings.entry(&w[bounds[i]..bounds[i + len]]).or_default() += f;
                }
            }
        }
        let mut scored: Vec<(String, f64)> = chars.iter().map(|(c, &f)| (c.to_string(), f)).collect();
        let mut multi: Vec<(&str, f64)> = substrings.into_iter().filter(|&(_, f)| f >= min).collect();
        multi.sort_unstable_by(|a, b| a.0.cmp(b.0));
        scored.extend(multi.into_iter().map(|(s, f)| (s.to_string(), f * s.chars().count() as f64)));
        let total: f64 = scored.iter().map(|(_, s)| s).sum();
        let pieces = scored.into_iter().map(|(p, s)| (p, (s / total).ln().min(-f64::EPSILON))).collect();
        Ok((SubwordModel::new(pieces)?, training))
    }

    /// Removes the multi-character pieces whose loss of corpus likelihood
    /// (when their occurrences are re-segmented with the remaining pieces)
    /// is smallest.
    pub fn prune(&self, model: &SubwordModel, words: &WordCounts) -> Result<SubwordModel> {
        let mut freq = vec![0.0; model.len()];
        for (w, f) in &words.words {
            for s in model.viterbi(w) {
                if let Seg::Piece(p) = s {
                    freq[p] += f;
                }
            }
        }
        let sum: f64 = freq.iter().sum();
        let log_sum = sum.ln();
        let mut candidates: Vec<(usize, f64)> = Vec::new();
        for (i, (piece, _)) in model.pieces.iter().enumerate() {
            if piece.chars().count() == 1 {
                continue;
            }
            if freq[i] == 0.0 {
                candidates.push((i, f64::NEG_INFINITY));
                continue;
            }
            let alt = model.viterbi_excluding(piece, Some(i));
            let alt_sum = sum + freq[i] * (alt.len() as f64 - 1.0);
            let log_alt_sum = alt_sum.ln();
            let mut logprob_alt = 0.0;
            for s in &alt {
                let Seg::Piece(a) = *s else {
                    logprob_alt = f64::NEG_INFINITY;
                    break;
                };
                logprob_alt += (freq[a] + freq[i]).ln() - log_alt_sum;
            }
            let logprob = freq[i].ln() - log_sum;
            let loss = freq[i] / sum * (logprob - logprob_alt);
            candidates.push((i, loss));
        }
        candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| model.pieces[a.0].0.cmp(&model.pieces[b.0].0)));
        let per_round = ((candidates.len() as f64 * self.prune_fraction).ceil() as usize).max(1);
        let remove = per_round.min(model.len() - self.target_size).min(candidates.len());
        let mut dropped = vec![false; model.len()];
        for &(i, _) in &candidates[..remove] {
            dropped[i] = true;
        }
        let pieces = model
            .pieces
            .iter()
            .zip(&dropped)
            .filter(|(_, &d)| !d)
            .map(|(p, _)| p.clone())
            .collect();
        SubwordModel::new(pieces)
    }
}

/// Orders pieces by descending probability, ties by piece text.
fn finalize(model: SubwordModel) -> SubwordModel {
    let mut pieces = model.pieces;
    pieces.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    SubwordModel::new(pieces).expect("already validated")
}

pub fn train_unigram(corpus: &str, target_size: usize, min_count: usize) -> Result<SubwordModel> {
    UnigramTrainer {
        target_size,
        min_count,
        ..UnigramTrainer::default()
    }
    .train(corpus)
}
