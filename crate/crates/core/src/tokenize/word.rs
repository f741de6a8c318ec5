//! Word-level pre-tokenization and vocabulary building.

use std::collections::HashMap;

use super::vocab::{Vocab, REP, WORD_SPECIALS, WREP};
use crate::error::{Error, Result};

/// Minimum run length that is collapsed into a repetition marker.
pub const REPEAT_THRESHOLD: usize = 3;

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '।' | '॥' | '‘' | '’' | '“' | '”' | '\u{2014}' | '–' | '…' | '«' | '»' | '¡' | '¿' | '·' | '•'
        )
}

/// Splits on whitespace and emits every punctuation character as its own
/// token.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        for c in chunk.chars() {
            if is_punctuation(c) {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(c.to_string());
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

/// Rewrites runs of repeated material:
///
/// * a token repeated `n >= 3` times in a row becomes `<wrep> n token`;
/// * a character repeated `n >= 3` times inside a token is cut out as
///   `<rep> n c`, splitting the token around it.
pub fn mark_repetitions(tokens: &[String]) -> Vec<String> {
    let rep = WORD_SPECIALS[REP];
    let wrep = WORD_SPECIALS[WREP];
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        let mut run = 1;
        while i + run < tokens.len() && tokens[i + run] == tokens[i] {
            run += 1;
        }
        let expanded = split_char_runs(&tokens[i], rep);
        if run >= REPEAT_THRESHOLD {
            out.push(wrep.to_string());
            out.push(run.to_string());
            out.extend(expanded);
            i += run;
        } else {
            out.extend(expanded);
            i += 1;
        }
    }
    out
}

fn split_char_runs(token: &str, rep: &str) -> Vec<String> {
    let chars: Vec<char> = token.chars().collect();
    let mut out = Vec::new();
    let mut current = String::new();
    let mut i = 0;
    while i < chars.len() {
        let mut run = 1;
        while i + run < chars.len() && chars[i + run] == chars[i] {
            run += 1;
        }
        if run >= REPEAT_THRESHOLD && chars.len() > 1 {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            out.push(rep.to_string());
            out.push(run.to_string());
            out.push(chars[i].to_string());
        } else {
            current.extend(std::iter::repeat_n(chars[i], run));
        }
        i += run;
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Inverse of [`mark_repetitions`] up to spacing: expands markers back into
/// repeated material.
pub fn expand_repetitions(tokens: &[String]) -> Vec<String> {
    let rep = WORD_SPECIALS[REP];
    let wrep = WORD_SPECIALS[WREP];
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        let marker = tokens[i].as_str();
        if (marker == rep || marker == wrep) && i + 2 < tokens.len() {
            if let Ok(n) = tokens[i + 1].parse::<usize>() {
                let unit = &tokens[i + 2];
                if marker == rep {
                    out.push(unit.repeat(n));
                } else {
                    out.extend(std::iter::repeat_n(unit.clone(), n));
                }
                i += 3;
                continue;
            }
        }
        out.push(tokens[i].clone());
        i += 1;
    }
    out
}

/// Keeps tokens seen at least `min_count` times, most frequent first (ties
/// broken by token), truncated to `max_size`, after the word-mode specials.
pub fn build_word_vocab(tokens: &[String], max_size: usize, min_count: usize) -> Result<Vocab> {
    if tokens.is_empty() {
        return Err(Error::data("cannot build a word vocabulary from an empty corpus"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in tokens {
        if WORD_SPECIALS.contains(&t.as_str()) {
            continue;
        }
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    kept.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    kept.truncate(max_size);
    Vocab::new(&WORD_SPECIALS, kept.into_iter().map(|(t, _)| t.to_string()))
}
