//! Classification metrics, fold aggregation and sampling from a language model.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::model::{encoder_forward, lm_decode, softmax_rows, LstmState, Model, Phase};
use crate::rng::{Rng, Stream};
use crate::tape::Tape;
use crate::tokenize::{Tokenizer, BOS};

pub fn perplexity(mean_loss: f64) -> f64 {
    mean_loss.exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScores>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    /// Per-class F1 weighted by support.
    pub fn weighted_f1(&self) -> f64 {
        let total: usize = self.per_class.iter().map(|c| c.support).sum();
        if total == 0 {
            return 0.0;
        }
        self.per_class.iter().map(|c| c.f1 * c.support as f64).sum::<f64>() / total as f64
    }

    pub fn to_json(&self, weighted: bool) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if weighted {
            v["weighted_f1"] = serde_json::json!(self.weighted_f1());
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Metrics> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::invalid(format!(
            "need equal non-empty prediction and label lists, got {} and {}",
            predictions.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (row, (&p, &l)) in predictions.iter().zip(labels).enumerate() {
        if p >= n_classes || l >= n_classes {
            return Err(Error::TargetOutOfRange {
                row,
                id: p.max(l),
                classes: n_classes,
            });
        }
        confusion[l][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let per_class: Vec<ClassScores> = (0..n_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let predicted: usize = (0..n_classes).map(|r| confusion[r][c]).sum();
            let support: usize = confusion[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / n_classes as f64;
    Ok(Metrics {
        accuracy: ratio(correct, labels.len()),
        macro_f1,
        per_class,
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std_dev: f64,
    pub confidence: f64,
    pub margin_of_error: f64,
    /// Margin as a percentage of the mean.
    pub margin_percent: f64,
}

/// Mean and Student-t margin of error, `t · s / √k` with `k - 1` degrees of
/// freedom.
pub fn kfold_summary(scores: &[f64], confidence: f64) -> Result<FoldSummary> {
    let k = scores.len();
    if k < 2 {
        return Err(Error::invalid("fold summary needs at least two scores"));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::invalid(format!("confidence {confidence} outside (0, 1)")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("fold score".into()));
    }
    let n = k as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std_dev = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::invalid(e.to_string()))?
        .inverse_cdf((1.0 + confidence) / 2.0);
    let margin = t * std_dev / n.sqrt();
    Ok(FoldSummary {
        scores: scores.to_vec(),
        mean,
        std_dev,
        confidence,
        margin_of_error: margin,
        margin_percent: if mean == 0.0 { 0.0 } else { 100.0 * margin / mean.abs() },
    })
}

/// Index drawn from `softmax(logits / temperature)`; temperature 0 is argmax
/// with ties to the lowest index.
pub fn sample_token(logits: &[f64], temperature: f64, rng: &mut Rng) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::invalid("no logits to sample from"));
    }
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!("temperature {temperature} must be finite and non-negative")));
    }
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        return Ok(best);
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let probs = softmax_rows(&crate::tensor::Tensor::vector(&scaled));
    let u = rng.next_f64();
    let mut acc = 0.0;
    for (i, &p) in probs.data().iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(probs.len() - 1)
}

/// Feeds `<bos>` and the prompt, then samples `n_tokens` continuations one
/// step at a time while carrying the recurrent state. Returns the decoded
/// prompt plus continuation.
pub fn generate_text(
    model: &Model,
    tokenizer: &Tokenizer,
    prompt: &str,
    n_tokens: usize,
    temperature: f64,
    seed: u64,
) -> Result<String> {
    if n_tokens == 0 {
        return Err(Error::invalid("n_tokens must be at least 1"));
    }
    let body = tokenizer.encode_body(prompt);
    if body.is_empty() {
        return Err(Error::invalid("prompt is empty after tokenization"));
    }
    let mut rng = Rng::stream(seed, Stream::Sample);
    let mut ids = vec![BOS];
    ids.extend(body);
    let trainable = vec![false; model.config.n_groups()];
    let mut state = LstmState::zeros(&model.config, 1);
    let mut input = ids.clone();
    for _ in 0..n_tokens {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &trainable)?;
        let enc = encoder_forward(&mut tape, model, &bound, &input, 1, None, Some(&state), &mut Phase::Eval)?;
        let logits = lm_decode(&mut tape, model, &bound, &enc, &mut Phase::Eval)?;
        let lv = tape.value(logits);
        let last = lv.row(enc.steps - 1);
        let next = sample_token(last, temperature, &mut rng)?;
        state = enc.state;
        ids.push(next);
        input = vec![next];
    }
    tokenizer.decode(&ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity(0.0), 1.0);
        assert!((perplexity(47.52f64.ln()) - 47.52).abs() < 1e-9);
        assert!((perplexity(3.8611) - 47.52).abs() < 1e-2);
        assert!((perplexity(1000f64.ln()) - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn all_correct_two_classes() {
        let m = compute_metrics(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
        assert_eq!(m.confusion, vec![vec![2, 0], vec![0, 2]]);
    }

    #[test]
    fn constant_prediction_three_balanced_classes() {
        let m = compute_metrics(&[0; 6], &[0, 0, 1, 1, 2, 2], 3).unwrap();
        assert!((m.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.per_class[0].precision - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.per_class[0].recall, 1.0);
        assert!((m.per_class[0].f1 - 0.5).abs() < 1e-15);
        assert_eq!(m.per_class[1].f1, 0.0);
        assert!((m.macro_f1 - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn label_outside_class_set_is_an_error() {
        assert!(compute_metrics(&[0, 3], &[0, 1], 3).is_err());
        assert!(compute_metrics(&[0], &[0, 1], 3).is_err());
        assert!(compute_metrics(&[], &[], 3).is_err());
    }

    #[test]
    fn weighted_f1_uses_support() {
        let m = compute_metrics(&[0, 0, 0, 1], &[0, 0, 0, 1], 2).unwrap();
        assert_eq!(m.weighted_f1(), 1.0);
        let m = compute_metrics(&[0; 4], &[0, 0, 0, 1], 2).unwrap();
        let f0 = 2.0 * 0.75 / 1.75;
        assert!((m.weighted_f1() - 0.75 * f0).abs() < 1e-15);
        let json = m.to_json(true).unwrap();
        assert!(json.contains("weighted_f1"));
        assert!(!m.to_json(false).unwrap().contains("weighted_f1"));
    }

    #[test]
    fn metrics_json_round_trips() {
        let m = compute_metrics(&[0, 2, 1, 1, 0], &[0, 1, 1, 2, 0], 3).unwrap();
        let back: Metrics = serde_json::from_str(&m.to_json(false).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn kfold_hand_example() {
        let s = kfold_summary(&[0.90, 0.92, 0.94, 0.91, 0.93], 0.95).unwrap();
        assert!((s.mean - 0.92).abs() < 1e-12);
        assert!((s.std_dev - 0.015811).abs() < 1e-6);
        assert!((s.margin_of_error - 0.019632).abs() < 1e-6);
    }

    #[test]
    fn kfold_equal_scores_and_bad_input() {
        assert_eq!(kfold_summary(&[0.5; 4], 0.95).unwrap().margin_of_error, 0.0);
        assert!(kfold_summary(&[0.5], 0.95).is_err());
        assert!(kfold_summary(&[0.5, 0.6], 1.0).is_err());
    }

    #[test]
    fn greedy_sampling_is_argmax() {
        let mut rng = Rng::new(0);
        assert_eq!(sample_token(&[0.1, 3.0, 2.0], 0.0, &mut rng).unwrap(), 1);
        assert!(sample_token(&[0.1], -1.0, &mut rng).is_err());
    }

    #[test]
    fn sampling_follows_the_distribution() {
        let mut rng = Rng::new(3);
        let logits = [0.0, 2f64.ln()];
        let n = 20000;
        let ones = (0..n).filter(|_| sample_token(&logits, 1.0, &mut rng).unwrap() == 1).count();
        let frac = ones as f64 / n as f64;
        assert!((frac - 2.0 / 3.0).abs() < 0.02, "{frac}");
    }
}
