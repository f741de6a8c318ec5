//! The three training stages (language-model pretraining, language-model
//! fine-tuning, classifier training), LM batching and prediction.

use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{compute_metrics, perplexity, Metrics};
use crate::model::{
    classifier_forward, encoder_forward, lm_decode, softmax_rows, Head, HeadKind, LstmState, Model, ModelConfig, Phase,
};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{Rng, Stream};
use crate::schedules::{
    discriminative_lrs, lr_find, momentum_for, sgdr, stlr, unfreeze_plan, LrCurve, LrFindConfig, DISCRIMINATIVE_DIVISOR,
};
use crate::tape::{Tape, Var};
use crate::tokenize::{Tokenizer, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
    Classify,
}

/// A single rate, a list, or a comma-separated string such as `"1e-3,5e-4"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LrSpec {
    Single(f64),
    List(Vec<f64>),
    Text(String),
}

impl LrSpec {
    pub fn values(&self) -> Result<Vec<f64>> {
        let v = match self {
            LrSpec::Single(x) => vec![*x],
            LrSpec::List(v) => v.clone(),
            LrSpec::Text(s) => s
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::invalid(format!("bad learning rate {p:?}")))
                })
                .collect::<Result<_>>()?,
        };
        if v.is_empty() || v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::invalid(format!("learning rates must be positive and finite: {v:?}")));
        }
        Ok(v)
    }
}

/// Hyper-parameters of one training stage.
///
/// `epochs` is the whole budget for pretraining. For fine-tuning and
/// classification it is the budget of the final, fully unfrozen phase; the
/// preceding gradual-unfreezing phases run `unfreeze_epochs` each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub bptt: usize,
    /// Defaults to 1e-3 for the LM stages and 1e-2 for classification.
    pub lr: Option<LrSpec>,
    pub weight_decay: f64,
    pub dropout_multiplier: f64,
    /// β1 at the lowest and at the highest rate of a cycle.
    pub momentums: (f64, f64),
    pub seed: u64,
    pub early_stop_patience: usize,
    pub unfreeze_epochs: usize,
    pub cut_frac: f64,
    pub ratio: f64,
    /// Share of the token stream tail held out for LM validation.
    pub valid_frac: f64,
    /// Classifier inputs keep only their final `max_tokens` tokens.
    pub max_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            epochs: 15,
            batch_size: 32,
            bptt: 70,
            lr: None,
            weight_decay: 0.1,
            dropout_multiplier: 0.5,
            momentums: (0.8, 0.7),
            seed: 0,
            early_stop_patience: 2,
            unfreeze_epochs: 2,
            cut_frac: 0.1,
            ratio: 32.0,
            valid_frac: 0.1,
            max_tokens: 1000,
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let epochs = match stage {
            Stage::Pretrain => 15,
            Stage::Finetune => 10,
            Stage::Classify => 6,
        };
        TrainConfig {
            stage,
            epochs,
            ..TrainConfig::default()
        }
    }

    pub fn lrs(&self) -> Result<Vec<f64>> {
        match &self.lr {
            Some(spec) => spec.values(),
            None => Ok(vec![match self.stage {
                Stage::Classify => 1e-2,
                _ => 1e-3,
            }]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.batch_size == 0 || self.bptt == 0 || self.epochs == 0 {
            return bad("batch_size, bptt and epochs must be at least 1");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.dropout_multiplier >= 0.0 && self.dropout_multiplier.is_finite()) {
            return bad("dropout_multiplier must be non-negative");
        }
        let (hi, lo) = self.momentums;
        if !((0.0..1.0).contains(&hi) && (0.0..1.0).contains(&lo)) {
            return bad("momentums must lie in [0, 1)");
        }
        if !(self.valid_frac > 0.0 && self.valid_frac < 1.0) {
            return bad("valid_frac must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.cut_frac) || !(self.ratio >= 1.0) {
            return bad("cut_frac must lie in [0, 1) and ratio be at least 1");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be at least 1");
        }
        self.lrs().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    /// Trainable flag per parameter group.
    pub trainable: Vec<bool>,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub valid_perplexity: Option<f64>,
    pub valid_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    /// Validation loss of the starting weights.
    pub initial_valid_loss: Option<f64>,
    pub initial_valid_perplexity: Option<f64>,
    pub epochs: Vec<EpochReport>,
    /// Epoch whose weights were kept (0 = the starting weights).
    pub best_epoch: usize,
    pub best_valid_loss: Option<f64>,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<String>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

impl StageReport {
    fn new(stage: Stage) -> Self {
        StageReport {
            stage,
            initial_valid_loss: None,
            initial_valid_perplexity: None,
            epochs: Vec::new(),
            best_epoch: 0,
            best_valid_loss: None,
            wall_clock_secs: 0.0,
            checkpoint: None,
            diverged: None,
        }
    }

    pub fn log_lines(&self) -> Vec<String> {
        self.epochs
            .iter()
            .map(|e| {
                let mut s = format!("{:?} epoch {} lr {:e} train_loss {:.6}", self.stage, e.epoch, e.lr, e.train_loss);
                if let Some(v) = e.valid_loss {
                    s += &format!(" valid_loss {v:.6} valid_ppl {:.4}", perplexity(v));
                }
                if let Some(a) = e.valid_accuracy {
                    s += &format!(" valid_acc {a:.4}");
                }
                s.to_lowercase()
            })
            .collect()
    }
}

/// Trained weights plus the report of the stage that produced them.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub model: Model,
    pub report: StageReport,
}

/// One truncated-BPTT window, batch-major `[batch × bptt]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LmBatch {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

/// Lays `ids` out as `batch_size` contiguous lanes and cuts
/// `⌊(N / batch_size − 1) / bptt⌋` windows; targets are the inputs shifted by
/// one. Consecutive windows continue each lane, so recurrent state can be
/// carried across them.
pub fn make_lm_batches(ids: &[usize], batch_size: usize, bptt: usize) -> Result<Vec<LmBatch>> {
    if batch_size == 0 || bptt == 0 {
        return Err(Error::invalid("batch_size and bptt must be at least 1"));
    }
    if ids.len() < batch_size * (bptt + 1) {
        return Err(Error::data(format!(
            "token stream of {} ids is too short for {batch_size} lanes of {} ids",
            ids.len(),
            bptt + 1
        )));
    }
    let lane = ids.len() / batch_size;
    let n = (lane - 1) / bptt;
    Ok((0..n)
        .map(|k| {
            let mut input = Vec::with_capacity(batch_size * bptt);
            let mut target = Vec::with_capacity(batch_size * bptt);
            for b in 0..batch_size {
                let start = b * lane + k * bptt;
                input.extend_from_slice(&ids[start..start + bptt]);
                target.extend_from_slice(&ids[start + 1..start + bptt + 1]);
            }
            LmBatch { input, target }
        })
        .collect())
}

fn to_time_major(ids: &[usize], batch: usize) -> Vec<usize> {
    let steps = ids.len() / batch;
    let mut out = Vec::with_capacity(ids.len());
    for t in 0..steps {
        for b in 0..batch {
            out.push(ids[b * steps + t]);
        }
    }
    out
}

/// Mean next-token loss over a whole stream in evaluation mode. Every
/// position of every lane except the last is predicted once.
pub fn lm_loss(model: &Model, ids: &[usize], batch_size: usize, bptt: usize) -> Result<f64> {
    if ids.len() < 2 {
        return Err(Error::data("validation stream needs at least 2 tokens"));
    }
    let batch = batch_size.min(ids.len() / 2).max(1);
    let lane = ids.len() / batch;
    let frozen = vec![false; model.config.n_groups()];
    let mut state = LstmState::zeros(&model.config, batch);
    let (mut total, mut count) = (0.0, 0usize);
    let mut start = 0;
    while start < lane - 1 {
        let len = bptt.min(lane - 1 - start);
        let mut input = Vec::with_capacity(batch * len);
        let mut target = Vec::with_capacity(batch * len);
        for b in 0..batch {
            let s = b * lane + start;
            input.extend_from_slice(&ids[s..s + len]);
            target.extend_from_slice(&ids[s + 1..s + len + 1]);
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &frozen)?;
        let enc = encoder_forward(&mut tape, model, &bound, &input, batch, None, Some(&state), &mut Phase::Eval)?;
        let logits = lm_decode(&mut tape, model, &bound, &enc, &mut Phase::Eval)?;
        let loss = tape.cross_entropy(logits, &to_time_major(&target, batch))?;
        total += tape.value(loss).item()? * (batch * len) as f64;
        count += batch * len;
        state = enc.state;
        start += len;
    }
    let mean = total / count as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite("validation loss".into()));
    }
    Ok(mean)
}

/// AdamW over every parameter of `model` with the configured decay and the
/// high momentum.
pub fn new_optimizer(model: &Model, config: &TrainConfig) -> AdamState {
    let params = model.params();
    AdamState::new(
        params.iter().map(|p| (p.name.as_str(), p.tensor.len())),
        AdamConfig {
            beta1: config.momentums.0,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
    )
}

/// Moves gradients off the tape into an optimizer step. Groups bound as
/// constants have no gradient and stay untouched.
fn apply_step(
    model: &mut Model,
    opt: &mut AdamState,
    grads: &mut crate::tape::Gradients,
    vars: &[Var],
    group_lrs: &[f64],
    beta1: f64,
) -> Result<()> {
    let taken: Vec<Option<Vec<f64>>> = vars.iter().map(|&v| grads.take(v)).collect();
    let lrs: Vec<f64> = model.params().iter().map(|p| group_lrs[p.group]).collect();
    opt.config.beta1 = beta1;
    let mut params = model.params_mut();
    let mut tensors: Vec<&mut crate::tensor::Tensor> = params.iter_mut().map(|p| &mut *p.tensor).collect();
    let g: Vec<Option<&[f64]>> = taken.iter().map(|g| g.as_deref()).collect();
    opt.step(&mut tensors, &g, &lrs)
}

/// Forward, backward and update on one LM window. Returns the loss and the
/// detached final state.
#[allow(clippy::too_many_arguments)]
pub fn lm_train_step(
    model: &mut Model,
    opt: &mut AdamState,
    batch: &LmBatch,
    batch_size: usize,
    state: &LstmState,
    trainable: &[bool],
    group_lrs: &[f64],
    beta1: f64,
    rng: &mut Rng,
) -> Result<(f64, LstmState)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, trainable)?;
    let mut phase = Phase::Train(rng);
    let enc = encoder_forward(&mut tape, model, &bound, &batch.input, batch_size, None, Some(state), &mut phase)?;
    let logits = lm_decode(&mut tape, model, &bound, &enc, &mut phase)?;
    let loss = tape.cross_entropy(logits, &to_time_major(&batch.target, batch_size))?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {value}")));
    }
    let mut grads = tape.backward(loss)?;
    apply_step(model, opt, &mut grads, &bound.vars, group_lrs, beta1)?;
    Ok((value, enc.state))
}

/// One LM epoch with a cosine restart; state starts from zero.
fn lm_epoch(
    model: &mut Model,
    opt: &mut AdamState,
    batches: &[LmBatch],
    config: &TrainConfig,
    trainable: &[bool],
    lr: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let mut state = LstmState::zeros(&model.config, config.batch_size);
    let mut total = 0.0;
    let n_groups = model.config.n_groups();
    for (t, batch) in batches.iter().enumerate() {
        let lr_t = sgdr(t, batches.len(), lr, 0.0)?;
        let beta1 = momentum_for(lr_t, 0.0, lr, config.momentums);
        let (loss, next) = lm_train_step(
            model,
            opt,
            batch,
            config.batch_size,
            &state,
            trainable,
            &vec![lr_t; n_groups],
            beta1,
            rng,
        )?;
        total += loss;
        state = next;
    }
    Ok(total / batches.len() as f64)
}

/// Splits a stream into a leading training part and a validation tail.
pub fn split_stream(ids: &[usize], valid_frac: f64) -> (&[usize], &[usize]) {
    let n_valid = ((ids.len() as f64) * valid_frac).round() as usize;
    let n_valid = n_valid.clamp(2.min(ids.len()), ids.len());
    ids.split_at(ids.len() - n_valid)
}

struct BestKeeper {
    model: Model,
    loss: f64,
    epoch: usize,
    bad_epochs: usize,
}

impl BestKeeper {
    fn new(model: &Model, loss: f64) -> Self {
        BestKeeper {
            model: model.clone(),
            loss,
            epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records an epoch; returns true when patience has run out.
    fn observe(&mut self, model: &Model, loss: f64, epoch: usize, patience: usize) -> bool {
        if loss < self.loss {
            self.model = model.clone();
            self.loss = loss;
            self.epoch = epoch;
            self.bad_epochs = 0;
            false
        } else {
            self.bad_epochs += 1;
            self.bad_epochs >= patience
        }
    }
}

fn divergence(e: Error, epoch: usize) -> Result<String> {
    if e.is_numeric() {
        warn!("training diverged in epoch {epoch}: {e}");
        Ok(format!("epoch {epoch}: {e}"))
    } else {
        Err(e)
    }
}

fn lm_stage_setup(model: &mut Model, ids: &[usize], config: &TrainConfig) -> Result<(Vec<LmBatch>, Vec<usize>)> {
    config.validate()?;
    model.config.dropout_multiplier = config.dropout_multiplier;
    if model.head.kind() != HeadKind::Lm {
        return Err(Error::Checkpoint("head shape mismatch: expected a language-model head".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= model.config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            position: ids.iter().position(|&i| i == bad).unwrap_or(0),
            id: bad,
            vocab: model.config.vocab_size,
        });
    }
    let (train, valid) = split_stream(ids, config.valid_frac);
    Ok((make_lm_batches(train, config.batch_size, config.bptt)?, valid.to_vec()))
}

/// Trains a language model from random initialisation on a token stream.
///
/// The last `valid_frac` of the stream is held out. Each epoch restarts a
/// cosine schedule. When validation loss has not improved for
/// `early_stop_patience` epochs, training resumes from the best weights with
/// the next rate of the list, or stops when the list is used up. The best
/// weights are returned.
pub fn pretrain_lm(ids: &[usize], model_config: ModelConfig, config: &TrainConfig) -> Result<StageOutcome> {
    let mut init = Rng::stream(config.seed, Stream::Init);
    let mut model = Model::new_lm(model_config, &mut init)?;
    run_lm_stage(&mut model, ids, config, Stage::Pretrain)
}

/// Continues training a language model on target-domain text with gradual
/// unfreezing: `unfreeze_epochs` epochs for the head, then with the last
/// LSTM group, then the one before, then the whole model for up to
/// `epochs` epochs with early stopping.
pub fn finetune_lm(
    model: &Model,
    model_fingerprint: u64,
    tokenizer: &Tokenizer,
    ids: &[usize],
    config: &TrainConfig,
) -> Result<StageOutcome> {
    if model_fingerprint != tokenizer.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: model_fingerprint,
            found: tokenizer.fingerprint(),
        });
    }
    if model.config.vocab_size != tokenizer.vocab_size() {
        return Err(Error::data("model vocabulary size differs from the tokenizer"));
    }
    let mut model = model.clone();
    run_lm_stage(&mut model, ids, config, Stage::Finetune)
}

/// Gradual-unfreezing steps: up to three partial steps, then everything.
pub fn unfreeze_steps(n_groups: usize) -> Vec<usize> {
    let mut steps: Vec<usize> = (0..3.min(n_groups - 1)).collect();
    steps.push(n_groups - 1);
    steps
}

fn run_lm_stage(model: &mut Model, ids: &[usize], config: &TrainConfig, stage: Stage) -> Result<StageOutcome> {
    let started = Instant::now();
    let (batches, valid) = lm_stage_setup(model, ids, config)?;
    let mut rng = Rng::stream(config.seed, Stream::Dropout);
    let n_groups = model.config.n_groups();
    let lrs = config.lrs()?;
    let mut report = StageReport::new(stage);
    let initial = lm_loss(model, &valid, config.batch_size, config.bptt)?;
    report.initial_valid_loss = Some(initial);
    report.initial_valid_perplexity = Some(perplexity(initial));
    info!("{stage:?}: {} batches per epoch, initial valid ppl {:.4}", batches.len(), perplexity(initial));

    // (trainable flags, epochs, early stopping) per phase.
    let phases: Vec<(Vec<bool>, usize, bool)> = match stage {
        Stage::Pretrain => vec![(vec![true; n_groups], config.epochs, true)],
        _ => unfreeze_steps(n_groups)
            .into_iter()
            .map(|s| {
                let full = s == n_groups - 1;
                let epochs = if full { config.epochs } else { config.unfreeze_epochs };
                (unfreeze_plan(n_groups, s), epochs, full)
            })
            .collect(),
    };
    let mut best = BestKeeper::new(model, initial);
    let mut epoch = 0;
    let mut opt = new_optimizer(model, config);
    'phases: for (trainable, epochs, early_stop) in phases {
        let mut lr_idx = 0;
        let mut done = 0;
        while done < epochs {
            epoch += 1;
            done += 1;
            let lr = lrs[lr_idx];
            let step = lm_epoch(model, &mut opt, &batches, config, &trainable, lr, &mut rng)
                .and_then(|train| Ok((train, lm_loss(model, &valid, config.batch_size, config.bptt)?)));
            let (train_loss, valid_loss) = match step {
                Ok(v) => v,
                Err(e) => {
                    report.diverged = Some(divergence(e, epoch)?);
                    break 'phases;
                }
            };
            report.epochs.push(EpochReport {
                epoch,
                lr,
                trainable: trainable.clone(),
                train_loss,
                valid_loss: Some(valid_loss),
                valid_perplexity: Some(perplexity(valid_loss)),
                valid_accuracy: None,
            });
            info!("{}", report.log_lines().last().expect("just pushed"));
            let stop = best.observe(model, valid_loss, epoch, config.early_stop_patience);
            if stop && early_stop {
                lr_idx += 1;
                if lr_idx == lrs.len() {
                    info!("early stop after epoch {epoch}");
                    break;
                }
                info!("restarting from epoch {} with lr {:e}", best.epoch, lrs[lr_idx]);
                *model = best.model.clone();
                best.bad_epochs = 0;
                opt = new_optimizer(model, config);
            }
        }
    }
    report.best_epoch = best.epoch;
    report.best_valid_loss = Some(best.loss);
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(StageOutcome {
        model: best.model,
        report,
    })
}

/// A token-id sequence with its class.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledIds {
    pub ids: Vec<usize>,
    pub label: usize,
}

/// `<bos> … <end>` ids with the front cut so at most `max_tokens` remain.
pub fn encode_truncated(tokenizer: &Tokenizer, text: &str, max_tokens: usize) -> Result<Vec<usize>> {
    let ids = tokenizer.encode(text);
    if ids.len() <= 2 {
        return Err(Error::data("text is empty after tokenization"));
    }
    Ok(ids[ids.len().saturating_sub(max_tokens)..].to_vec())
}

/// Left-pads sequences to a common length; returns batch-major ids and the
/// validity mask.
pub fn pad_batch(seqs: &[&[usize]]) -> (Vec<usize>, Vec<bool>) {
    let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(len * seqs.len());
    let mut valid = Vec::with_capacity(len * seqs.len());
    for s in seqs {
        let pad = len - s.len();
        ids.extend(std::iter::repeat_n(PAD, pad));
        valid.extend(std::iter::repeat_n(false, pad));
        ids.extend_from_slice(s);
        valid.extend(std::iter::repeat_n(true, s.len()));
    }
    (ids, valid)
}

/// Class probabilities `[B × classes]` in evaluation mode.
pub fn classifier_probabilities(model: &Model, seqs: &[&[usize]]) -> Result<crate::tensor::Tensor> {
    let (ids, valid) = pad_batch(seqs);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &vec![false; model.config.n_groups()])?;
    let enc = encoder_forward(&mut tape, model, &bound, &ids, seqs.len(), Some(&valid), None, &mut Phase::Eval)?;
    let out = classifier_forward(&mut tape, model, &bound, &enc, Some(&valid), &mut Phase::Eval)?;
    Ok(softmax_rows(tape.value(out.logits)))
}

/// Mean loss and predictions over `data` in evaluation mode.
pub fn classifier_predictions(model: &Model, data: &[LabeledIds], batch_size: usize) -> Result<(f64, Vec<usize>)> {
    let classes = model.config.n_classes.ok_or_else(|| Error::invalid("model has no classifier head"))?;
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|d| d.ids.as_slice()).collect();
        let probs = classifier_probabilities(model, &seqs)?;
        for (row, d) in probs.data().chunks(classes).zip(chunk) {
            if d.label >= classes {
                return Err(Error::TargetOutOfRange {
                    row: preds.len(),
                    id: d.label,
                    classes,
                });
            }
            total -= row[d.label].max(f64::MIN_POSITIVE).ln();
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            preds.push(best);
        }
    }
    Ok((total / data.len().max(1) as f64, preds))
}

pub fn evaluate_classifier(model: &Model, data: &[LabeledIds], batch_size: usize) -> Result<Metrics> {
    let classes = model.config.n_classes.ok_or_else(|| Error::invalid("model has no classifier head"))?;
    let (_, preds) = classifier_predictions(model, data, batch_size)?;
    let labels: Vec<usize> = data.iter().map(|d| d.label).collect();
    compute_metrics(&preds, &labels, classes)
}

/// Forward, backward and update on one classifier batch, then folds the
/// batch moments into the running statistics. Returns the loss.
pub fn classifier_train_step(
    model: &mut Model,
    opt: &mut AdamState,
    chunk: &[&LabeledIds],
    trainable: &[bool],
    group_lrs: &[f64],
    beta1: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let seqs: Vec<&[usize]> = chunk.iter().map(|d| d.ids.as_slice()).collect();
    let labels: Vec<usize> = chunk.iter().map(|d| d.label).collect();
    let (ids, valid) = pad_batch(&seqs);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, trainable)?;
    let mut phase = Phase::Train(rng);
    let enc = encoder_forward(&mut tape, model, &bound, &ids, chunk.len(), Some(&valid), None, &mut phase)?;
    let out = classifier_forward(&mut tape, model, &bound, &enc, Some(&valid), &mut phase)?;
    let loss = tape.cross_entropy(out.logits, &labels)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {value}")));
    }
    let mut grads = tape.backward(loss)?;
    apply_step(model, opt, &mut grads, &bound.vars, group_lrs, beta1)?;
    if let (Head::Classifier(head), Some(m)) = (&mut model.head, &out.moments) {
        head.update_running(m);
    }
    Ok(value)
}

fn shuffled_batches<'a>(data: &'a [LabeledIds], batch_size: usize, rng: &mut Rng) -> Vec<Vec<&'a LabeledIds>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.iter().map(|&i| &data[i]).collect()).collect()
}

/// Replaces the LM head of `model` with a freshly initialised classifier
/// head and trains it with gradual unfreezing, slanted triangular rates and
/// discriminative per-group rates: `unfreeze_epochs` epochs head-only, then
/// with one and two more groups, then `epochs` epochs for the whole model.
///
/// With a validation set, the weights with the lowest validation loss are
/// kept and the final phase stops early after `early_stop_patience` epochs
/// without improvement.
pub fn train_classifier(
    model: &Model,
    n_classes: usize,
    train: &[LabeledIds],
    valid: Option<&[LabeledIds]>,
    config: &TrainConfig,
) -> Result<StageOutcome> {
    config.validate()?;
    let started = Instant::now();
    if n_classes < 2 {
        return Err(Error::data("classification needs at least two classes"));
    }
    let mut seen = vec![false; n_classes];
    for d in train {
        if d.label >= n_classes {
            return Err(Error::data(format!("label {} outside {n_classes} classes", d.label)));
        }
        seen[d.label] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::data("training data holds a single class"));
    }
    let mut init = Rng::stream(config.seed, Stream::Init);
    let mut encoder = model.clone();
    encoder.config.dropout_multiplier = config.dropout_multiplier;
    let mut model = encoder.into_classifier(n_classes, &mut init)?;
    let mut drop_rng = Rng::stream(config.seed, Stream::Dropout);
    let mut shuffle_rng = Rng::stream(config.seed, Stream::Shuffle);
    let n_groups = model.config.n_groups();
    let lr_max = config.lrs()?[0];
    let mut report = StageReport::new(Stage::Classify);
    let mut best = match valid {
        Some(v) => {
            let (loss, _) = classifier_predictions(&model, v, config.batch_size)?;
            report.initial_valid_loss = Some(loss);
            Some(BestKeeper::new(&model, loss))
        }
        None => None,
    };
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let mut epoch = 0;
    let mut opt = new_optimizer(&model, config);
    'phases: for step in unfreeze_steps(n_groups) {
        let trainable = unfreeze_plan(n_groups, step);
        let full = step == n_groups - 1;
        let epochs = if full { config.epochs } else { config.unfreeze_epochs };
        let total = epochs * steps_per_epoch;
        let mut t = 0;
        for _ in 0..epochs {
            epoch += 1;
            let batches = shuffled_batches(train, config.batch_size, &mut shuffle_rng);
            let mut loss_sum = 0.0;
            for chunk in &batches {
                let lr_t = stlr(t, total, config.cut_frac, config.ratio, lr_max)?;
                let beta1 = momentum_for(lr_t, lr_max / config.ratio, lr_max, config.momentums);
                let lrs = discriminative_lrs(lr_t, n_groups, DISCRIMINATIVE_DIVISOR)?;
                match classifier_train_step(&mut model, &mut opt, chunk, &trainable, &lrs, beta1, &mut drop_rng) {
                    Ok(l) => loss_sum += l,
                    Err(e) => {
                        report.diverged = Some(divergence(e, epoch)?);
                        break 'phases;
                    }
                }
                t += 1;
            }
            let mut entry = EpochReport {
                epoch,
                lr: lr_max,
                trainable: trainable.clone(),
                train_loss: loss_sum / batches.len() as f64,
                valid_loss: None,
                valid_perplexity: None,
                valid_accuracy: None,
            };
            let mut stop = false;
            if let (Some(v), Some(b)) = (valid, best.as_mut()) {
                let (loss, preds) = classifier_predictions(&model, v, config.batch_size)?;
                let correct = preds.iter().zip(v).filter(|(p, d)| **p == d.label).count();
                entry.valid_loss = Some(loss);
                entry.valid_accuracy = Some(correct as f64 / v.len() as f64);
                stop = b.observe(&model, loss, epoch, config.early_stop_patience) && full;
            }
            report.epochs.push(entry);
            info!("{}", report.log_lines().last().expect("just pushed"));
            if stop {
                info!("early stop after epoch {epoch}");
                break 'phases;
            }
        }
    }
    if let Some(b) = best {
        report.best_epoch = b.epoch;
        report.best_valid_loss = Some(b.loss);
        model = b.model;
    } else {
        report.best_epoch = epoch;
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(StageOutcome { model, report })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub author: usize,
    pub probabilities: Vec<f64>,
}

pub fn predict_author(model: &Model, tokenizer: &Tokenizer, text: &str, max_tokens: usize) -> Result<Prediction> {
    let ids = encode_truncated(tokenizer, text, max_tokens)?;
    let probs = classifier_probabilities(model, &[&ids])?;
    let p = probs.data().to_vec();
    let mut author = 0;
    for (c, &v) in p.iter().enumerate() {
        if v > p[author] {
            author = c;
        }
    }
    Ok(Prediction {
        author,
        probabilities: p,
    })
}

/// Range test for the LM stages on a copy of `model`; the model passed in
/// is not modified. Windows are consumed in order and wrap around.
pub fn lr_find_lm(model: &Model, ids: &[usize], config: &TrainConfig, finder: &LrFindConfig) -> Result<LrCurve> {
    let mut work = model.clone();
    let (batches, _) = lm_stage_setup(&mut work, ids, config)?;
    let mut opt = new_optimizer(&work, config);
    let mut rng = Rng::stream(config.seed, Stream::Dropout);
    let n_groups = work.config.n_groups();
    let trainable = vec![true; n_groups];
    let mut state = LstmState::zeros(&work.config, config.batch_size);
    let mut k = 0;
    lr_find(
        |lr| {
            if k % batches.len() == 0 {
                state = LstmState::zeros(&work.config, config.batch_size);
            }
            let batch = &batches[k % batches.len()];
            k += 1;
            let beta1 = config.momentums.0;
            match lm_train_step(&mut work, &mut opt, batch, config.batch_size, &state, &trainable, &vec![lr; n_groups], beta1, &mut rng) {
                Ok((loss, next)) => {
                    state = next;
                    Ok(loss)
                }
                Err(e) if e.is_numeric() && k > 1 => Ok(f64::INFINITY),
                Err(e) => Err(e),
            }
        },
        finder,
    )
}

/// Range test for the classifier stage on a copy of `model`, which must
/// already carry a classifier head. All groups train with discriminative
/// rates topped by the probed rate.
pub fn lr_find_classifier(model: &Model, train: &[LabeledIds], config: &TrainConfig, finder: &LrFindConfig) -> Result<LrCurve> {
    if model.head.kind() != HeadKind::Classifier {
        return Err(Error::Checkpoint("head shape mismatch: expected a classifier head".into()));
    }
    if train.is_empty() {
        return Err(Error::data("no training samples"));
    }
    let mut work = model.clone();
    let mut opt = new_optimizer(&work, config);
    let mut drop_rng = Rng::stream(config.seed, Stream::Dropout);
    let mut shuffle_rng = Rng::stream(config.seed, Stream::Shuffle);
    let n_groups = work.config.n_groups();
    let trainable = vec![true; n_groups];
    let mut batches = Vec::new();
    lr_find(
        |lr| {
            if batches.is_empty() {
                batches = shuffled_batches(train, config.batch_size, &mut shuffle_rng);
            }
            let chunk = batches.pop().expect("refilled above");
            let lrs = discriminative_lrs(lr, n_groups, DISCRIMINATIVE_DIVISOR)?;
            match classifier_train_step(&mut work, &mut opt, &chunk, &trainable, &lrs, config.momentums.0, &mut drop_rng) {
                Err(e) if e.is_numeric() && opt.steps() > 0 => Ok(f64::INFINITY),
                r => r,
            }
        },
        finder,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            embedding_size: 6,
            hidden_size: 8,
            n_layers: 2,
            head_hidden: 5,
            ..ModelConfig::new(vocab)
        }
    }

    #[test]
    fn batch_count_example() {
        let ids: Vec<usize> = (0..1410).collect();
        let batches = make_lm_batches(&ids, 2, 70).unwrap();
        assert_eq!(batches.len(), 10);
        for b in &batches {
            for lane in 0..2 {
                for t in 0..69 {
                    assert_eq!(b.target[lane * 70 + t], b.input[lane * 70 + t + 1]);
                }
            }
        }
        // Lanes are contiguous and windows continue them.
        assert_eq!(batches[0].input[70], 705);
        assert_eq!(batches[1].input[0], 70);
        assert_eq!(batches[0].target[69], 70);
    }

    #[test]
    fn short_stream_is_an_error() {
        assert!(make_lm_batches(&[0; 141], 2, 70).is_err());
        assert_eq!(make_lm_batches(&[0; 142], 2, 70).unwrap().len(), 1);
        assert!(make_lm_batches(&[0; 10], 0, 2).is_err());
    }

    #[test]
    fn lr_spec_forms() {
        assert_eq!(LrSpec::Single(0.1).values().unwrap(), vec![0.1]);
        assert_eq!(LrSpec::Text("1e-3, 5e-4".into()).values().unwrap(), vec![1e-3, 5e-4]);
        assert!(LrSpec::Text("x".into()).values().is_err());
        assert!(LrSpec::List(vec![0.0]).values().is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"lr": "1e-2,1e-3", "stage": "classify"}"#).unwrap();
        assert_eq!(c.lrs().unwrap(), vec![1e-2, 1e-3]);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 1}"#).is_err());
    }

    #[test]
    fn default_rates_depend_on_stage() {
        assert_eq!(TrainConfig::for_stage(Stage::Classify).lrs().unwrap(), vec![1e-2]);
        assert_eq!(TrainConfig::for_stage(Stage::Pretrain).lrs().unwrap(), vec![1e-3]);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { bptt: 0, ..ok.clone() },
            TrainConfig { epochs: 0, ..ok.clone() },
            TrainConfig { momentums: (1.0, 0.7), ..ok.clone() },
            TrainConfig { valid_frac: 0.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn unfreeze_steps_end_fully_unfrozen() {
        assert_eq!(unfreeze_steps(5), vec![0, 1, 2, 4]);
        assert_eq!(unfreeze_steps(3), vec![0, 1, 2]);
        assert_eq!(unfreeze_steps(2), vec![0, 1]);
    }

    #[test]
    fn left_padding_layout() {
        let a = [5, 6, 7];
        let b = [8];
        let (ids, valid) = pad_batch(&[&a, &b]);
        assert_eq!(ids, vec![5, 6, 7, PAD, PAD, 8]);
        assert_eq!(valid, vec![true, true, true, false, false, true]);
    }

    #[test]
    fn padding_does_not_change_predictions() {
        let mut rng = Rng::new(4);
        let mut config = tiny(12);
        config.n_classes = Some(3);
        let model = Model::new_classifier(config, &mut rng).unwrap();
        let a = [4, 5, 6, 7, 8];
        let b = [9, 10];
        let alone = classifier_probabilities(&model, &[&b]).unwrap();
        let batched = classifier_probabilities(&model, &[&a, &b]).unwrap();
        for (x, y) in alone.data().iter().zip(&batched.data()[3..]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn validation_loss_at_init_is_near_uniform() {
        let mut rng = Rng::new(0);
        let model = Model::new_lm(tiny(50), &mut rng).unwrap();
        let ids: Vec<usize> = (0..400).map(|_| rng.below(50)).collect();
        let ppl = perplexity(lm_loss(&model, &ids, 4, 10).unwrap());
        assert!((ppl / 50.0 - 1.0).abs() < 0.1, "{ppl}");
    }

    #[test]
    fn split_stream_takes_the_tail() {
        let ids: Vec<usize> = (0..100).collect();
        let (a, b) = split_stream(&ids, 0.1);
        assert_eq!(a.len(), 90);
        assert_eq!(b[0], 90);
    }

    #[test]
    fn pretraining_reduces_loss_and_is_deterministic() {
        let pattern: Vec<usize> = (0..2000).map(|i| 4 + (i % 7)).collect();
        let config = TrainConfig {
            epochs: 4,
            batch_size: 4,
            bptt: 10,
            lr: Some(LrSpec::Single(1e-2)),
            dropout_multiplier: 0.1,
            seed: 9,
            ..TrainConfig::default()
        };
        let model = ModelConfig {
            embedding_size: 16,
            hidden_size: 32,
            ..tiny(12)
        };
        let a = pretrain_lm(&pattern, model.clone(), &config).unwrap();
        let b = pretrain_lm(&pattern, model, &config).unwrap();
        let first = a.report.initial_valid_loss.unwrap();
        assert!(a.report.best_valid_loss.unwrap() < 0.5 * first);
        assert_eq!(a.model, b.model);
        assert!(a.report.epochs.len() <= 4);
    }

    #[test]
    fn lr_find_leaves_the_model_untouched() {
        let mut rng = Rng::new(1);
        let model = Model::new_lm(tiny(12), &mut rng).unwrap();
        let before = model.clone();
        let ids: Vec<usize> = (0..400).map(|i| 4 + (i % 5)).collect();
        let config = TrainConfig {
            batch_size: 2,
            bptt: 8,
            ..TrainConfig::default()
        };
        let finder = LrFindConfig {
            steps: 20,
            ..LrFindConfig::default()
        };
        let curve = lr_find_lm(&model, &ids, &config, &finder).unwrap();
        assert!(!curve.points.is_empty());
        assert!(curve.points.iter().any(|p| p.0 == curve.suggestion) || curve.suggestion == finder.lr_start);
        assert_eq!(model, before);
    }

    #[test]
    fn single_class_is_rejected() {
        let mut rng = Rng::new(2);
        let model = Model::new_lm(tiny(12), &mut rng).unwrap();
        let data = vec![LabeledIds { ids: vec![4, 5], label: 0 }; 3];
        let config = TrainConfig::for_stage(Stage::Classify);
        assert!(train_classifier(&model, 2, &data, None, &config).is_err());
        assert!(train_classifier(&model, 1, &data, None, &config).is_err());
    }
}
