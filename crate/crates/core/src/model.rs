//! AWD-LSTM encoder with a tied language-model decoder or a concat-pooling
//! classifier head.
//!
//! Activations inside the encoder are laid out time-major: row `t * B + b`
//! holds step `t` of lane `b`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{BatchMoments, NormStats, Tape, Var};
use crate::tensor::Tensor;

pub const BATCHNORM_MOMENTUM: f64 = 0.1;
pub const BATCHNORM_EPS: f64 = 1e-5;

/// Dropout probabilities before the multiplier is applied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dropouts {
    pub output: f64,
    pub hidden: f64,
    pub input: f64,
    pub embedding: f64,
    pub weight_drop: f64,
}

impl Default for Dropouts {
    fn default() -> Self {
        Dropouts {
            output: 0.4,
            hidden: 0.3,
            input: 0.4,
            embedding: 0.05,
            weight_drop: 0.5,
        }
    }
}

impl Dropouts {
    pub const ZERO: Dropouts = Dropouts {
        output: 0.0,
        hidden: 0.0,
        input: 0.0,
        embedding: 0.0,
        weight_drop: 0.0,
    };

    pub fn scaled(&self, multiplier: f64) -> Dropouts {
        Dropouts {
            output: self.output * multiplier,
            hidden: self.hidden * multiplier,
            input: self.input * multiplier,
            embedding: self.embedding * multiplier,
            weight_drop: self.weight_drop * multiplier,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub dropout_multiplier: f64,
    pub base_dropouts: Dropouts,
    pub tie_weights: bool,
    pub n_classes: Option<usize>,
    pub head_hidden: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embedding_size: 400,
            hidden_size: 1150,
            n_layers: 3,
            dropout_multiplier: 0.5,
            base_dropouts: Dropouts::default(),
            tie_weights: true,
            n_classes: None,
            head_hidden: 50,
        }
    }

    /// Effective dropout probabilities.
    pub fn dropouts(&self) -> Dropouts {
        self.base_dropouts.scaled(self.dropout_multiplier)
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("embedding_size", self.embedding_size),
            ("hidden_size", self.hidden_size),
            ("n_layers", self.n_layers),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.n_classes == Some(0) || self.n_classes == Some(1) {
            return Err(Error::invalid("a classifier needs at least 2 classes"));
        }
        if !(self.dropout_multiplier >= 0.0) {
            return Err(Error::invalid("dropout multiplier must be non-negative"));
        }
        let d = self.dropouts();
        for (name, p, max_ok) in [
            ("output", d.output, false),
            ("hidden", d.hidden, false),
            ("input", d.input, false),
            ("embedding", d.embedding, false),
            ("weight_drop", d.weight_drop, true),
        ] {
            let ok = p >= 0.0 && (p < 1.0 || (max_ok && p == 1.0));
            if !ok {
                return Err(Error::invalid(format!("effective {name} dropout {p} out of range")));
            }
        }
        Ok(())
    }

    /// `(input, output)` width of every LSTM layer. With tied weights the last
    /// layer projects back to the embedding width.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.n_layers)
            .map(|l| {
                let input = if l == 0 { self.embedding_size } else { self.hidden_size };
                let output = if l + 1 == self.n_layers && self.tie_weights {
                    self.embedding_size
                } else {
                    self.hidden_size
                };
                (input, output)
            })
            .collect()
    }

    pub fn output_size(&self) -> usize {
        self.layer_dims().last().expect("n_layers >= 1").1
    }

    /// Layer groups: embedding, one per LSTM layer, head.
    pub fn n_groups(&self) -> usize {
        self.n_layers + 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    /// `[4H × in]`, gate blocks in order i, f, g, o.
    pub w_ih: Tensor,
    /// `[4H × H]`, the weight-dropped matrix.
    pub w_hh: Tensor,
    /// `[4H]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    /// `[V × E]`
    pub embedding: Tensor,
    pub layers: Vec<LstmLayer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmHead {
    /// `[V × out]`; `None` when tied to the embedding.
    pub decoder: Option<Tensor>,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub lin1_w: Tensor,
    pub lin1_b: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub lin2_w: Tensor,
    pub lin2_b: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl ClassifierHead {
    /// Folds batch moments into the running statistics.
    pub fn update_running(&mut self, moments: &BatchMoments) {
        let m = BATCHNORM_MOMENTUM;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&moments.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&moments.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Lm(LmHead),
    Classifier(ClassifierHead),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Lm,
    Classifier,
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Lm(_) => HeadKind::Lm,
            Head::Classifier(_) => HeadKind::Classifier,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub head: Head,
}

fn init_matrix(rows: usize, fan_in: usize, rng: &mut Rng) -> Tensor {
    Tensor::uniform(&[rows, fan_in], 1.0 / (fan_in as f64).sqrt(), rng)
}

impl Encoder {
    /// Uniform(±1/√fan_in) matrices, zero biases. The embedding is treated as
    /// a linear map from one-hot inputs, so its fan-in is the vocabulary size.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let embedding = Tensor::uniform(
            &[config.vocab_size, config.embedding_size],
            1.0 / (config.vocab_size as f64).sqrt(),
            rng,
        );
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(input, h)| LstmLayer {
                w_ih: init_matrix(4 * h, input, rng),
                w_hh: init_matrix(4 * h, h, rng),
                bias: Tensor::zeros(&[4 * h]),
            })
            .collect();
        Encoder { embedding, layers }
    }
}

impl LmHead {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        LmHead {
            decoder: (!config.tie_weights).then(|| init_matrix(config.vocab_size, config.output_size(), rng)),
            bias: Tensor::zeros(&[config.vocab_size]),
        }
    }
}

impl ClassifierHead {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let classes = config
            .n_classes
            .ok_or_else(|| Error::invalid("classifier head needs n_classes"))?;
        let pooled = 3 * config.output_size();
        let hh = config.head_hidden;
        Ok(ClassifierHead {
            lin1_w: init_matrix(hh, pooled, rng),
            lin1_b: Tensor::zeros(&[hh]),
            bn_gamma: Tensor::ones(&[hh]),
            bn_beta: Tensor::zeros(&[hh]),
            lin2_w: init_matrix(classes, hh, rng),
            lin2_b: Tensor::zeros(&[classes]),
            running_mean: Tensor::zeros(&[hh]),
            running_var: Tensor::ones(&[hh]),
        })
    }
}

/// A trainable array with its name and layer group.
pub struct Param<'a> {
    pub name: String,
    pub group: usize,
    pub tensor: &'a Tensor,
}

pub struct ParamMut<'a> {
    pub name: String,
    pub group: usize,
    pub tensor: &'a mut Tensor,
}

impl Model {
    pub fn new_lm(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::init(&config, rng);
        let head = Head::Lm(LmHead::init(&config, rng));
        Ok(Model { config, encoder, head })
    }

    pub fn new_classifier(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::init(&config, rng);
        let head = Head::Classifier(ClassifierHead::init(&config, rng)?);
        Ok(Model { config, encoder, head })
    }

    /// Keeps the encoder and swaps in a freshly initialized classifier head.
    pub fn into_classifier(self, n_classes: usize, rng: &mut Rng) -> Result<Self> {
        let mut config = self.config;
        config.n_classes = Some(n_classes);
        config.validate()?;
        let head = Head::Classifier(ClassifierHead::init(&config, rng)?);
        Ok(Model {
            config,
            encoder: self.encoder,
            head,
        })
    }

    /// Trainable arrays in a fixed order: embedding, layers, head.
    pub fn params(&self) -> Vec<Param<'_>> {
        let head_group = self.config.n_layers + 1;
        let mut out = vec![Param {
            name: "encoder.embedding".into(),
            group: 0,
            tensor: &self.encoder.embedding,
        }];
        for (l, layer) in self.encoder.layers.iter().enumerate() {
            for (suffix, tensor) in [("w_ih", &layer.w_ih), ("w_hh", &layer.w_hh), ("bias", &layer.bias)] {
                out.push(Param {
                    name: format!("encoder.layer{l}.{suffix}"),
                    group: l + 1,
                    tensor,
                });
            }
        }
        for (name, tensor) in head_arrays(&self.head) {
            out.push(Param {
                name: name.into(),
                group: head_group,
                tensor,
            });
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let head_group = self.config.n_layers + 1;
        let mut out = vec![ParamMut {
            name: "encoder.embedding".into(),
            group: 0,
            tensor: &mut self.encoder.embedding,
        }];
        for (l, layer) in self.encoder.layers.iter_mut().enumerate() {
            for (suffix, tensor) in [("w_ih", &mut layer.w_ih), ("w_hh", &mut layer.w_hh), ("bias", &mut layer.bias)] {
                out.push(ParamMut {
                    name: format!("encoder.layer{l}.{suffix}"),
                    group: l + 1,
                    tensor,
                });
            }
        }
        for (name, tensor) in head_arrays_mut(&mut self.head) {
            out.push(ParamMut {
                name: name.into(),
                group: head_group,
                tensor,
            });
        }
        out
    }

    /// Non-trainable state saved alongside the parameters.
    pub fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        match &self.head {
            Head::Classifier(c) => vec![("head.bn.running_mean", &c.running_mean), ("head.bn.running_var", &c.running_var)],
            Head::Lm(_) => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match &mut self.head {
            Head::Classifier(c) => vec![
                ("head.bn.running_mean", &mut c.running_mean),
                ("head.bn.running_var", &mut c.running_var),
            ],
            Head::Lm(_) => Vec::new(),
        }
    }

    /// Puts every parameter on `tape`; parameters of groups whose flag in
    /// `trainable` is false enter as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: &[bool]) -> Result<Bound> {
        if trainable.len() != self.config.n_groups() {
            return Err(Error::invalid(format!(
                "expected {} group flags, got {}",
                self.config.n_groups(),
                trainable.len()
            )));
        }
        let vars: Vec<Var> = self
            .params()
            .into_iter()
            .map(|p| tape.leaf(p.tensor.clone(), trainable[p.group]))
            .collect();
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("bound in params() order");
        let embedding = next();
        let layers = (0..self.config.n_layers)
            .map(|_| BoundLayer {
                w_ih: next(),
                w_hh: next(),
                bias: next(),
            })
            .collect();
        let head = match &self.head {
            Head::Lm(h) => BoundHead::Lm {
                decoder: h.decoder.as_ref().map(|_| next()),
                bias: next(),
            },
            Head::Classifier(_) => BoundHead::Classifier {
                lin1_w: next(),
                lin1_b: next(),
                bn_gamma: next(),
                bn_beta: next(),
                lin2_w: next(),
                lin2_b: next(),
            },
        };
        Ok(Bound {
            embedding,
            layers,
            head,
            vars,
        })
    }
}

fn head_arrays(head: &Head) -> Vec<(&'static str, &Tensor)> {
    match head {
        Head::Lm(h) => {
            let mut v = Vec::new();
            if let Some(d) = &h.decoder {
                v.push(("head.decoder", d));
            }
            v.push(("head.bias", &h.bias));
            v
        }
        Head::Classifier(c) => vec![
            ("head.lin1.weight", &c.lin1_w),
            ("head.lin1.bias", &c.lin1_b),
            ("head.bn.gamma", &c.bn_gamma),
            ("head.bn.beta", &c.bn_beta),
            ("head.lin2.weight", &c.lin2_w),
            ("head.lin2.bias", &c.lin2_b),
        ],
    }
}

fn head_arrays_mut(head: &mut Head) -> Vec<(&'static str, &mut Tensor)> {
    match head {
        Head::Lm(h) => {
            let mut v = Vec::new();
            if let Some(d) = &mut h.decoder {
                v.push(("head.decoder", d));
            }
            v.push(("head.bias", &mut h.bias));
            v
        }
        Head::Classifier(c) => vec![
            ("head.lin1.weight", &mut c.lin1_w),
            ("head.lin1.bias", &mut c.lin1_b),
            ("head.bn.gamma", &mut c.bn_gamma),
            ("head.bn.beta", &mut c.bn_beta),
            ("head.lin2.weight", &mut c.lin2_w),
            ("head.lin2.bias", &mut c.lin2_b),
        ],
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub enum BoundHead {
    Lm {
        decoder: Option<Var>,
        bias: Var,
    },
    Classifier {
        lin1_w: Var,
        lin1_b: Var,
        bn_gamma: Var,
        bn_beta: Var,
        lin2_w: Var,
        lin2_b: Var,
    },
}

/// Tape handles of a model's parameters.
#[derive(Clone, Debug)]
pub struct Bound {
    pub embedding: Var,
    pub layers: Vec<BoundLayer>,
    pub head: BoundHead,
    /// Every parameter, in [`Model::params`] order.
    pub vars: Vec<Var>,
}

/// Whether a forward pass samples dropout masks.
pub enum Phase<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Phase<'_> {
    fn rng(&mut self) -> Option<&mut Rng> {
        match self {
            Phase::Eval => None,
            Phase::Train(rng) => Some(rng),
        }
    }
}

fn check_p(p: f64, allow_one: bool) -> Result<()> {
    if p >= 0.0 && (p < 1.0 || (allow_one && p == 1.0)) {
        Ok(())
    } else {
        Err(Error::invalid(format!("dropout probability {p} out of range")))
    }
}

fn bernoulli_keep(n: usize, p: f64, rng: &mut Rng) -> Vec<f64> {
    if p == 1.0 {
        return vec![0.0; n];
    }
    let scale = 1.0 / (1.0 - p);
    (0..n).map(|_| if rng.bernoulli(p) { 0.0 } else { scale }).collect()
}

/// Inverted-dropout mask of `shape`. Sample once per sequence and reuse it at
/// every time step.
pub fn variational_mask(shape: &[usize], p: f64, rng: &mut Rng) -> Result<Tensor> {
    check_p(p, false)?;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), bernoulli_keep(n, p, rng))
}

/// DropConnect mask for a recurrent matrix. `p = 1` gives all zeros.
pub fn weight_drop_mask(shape: &[usize], p: f64, rng: &mut Rng) -> Result<Tensor> {
    check_p(p, true)?;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), bernoulli_keep(n, p, rng))
}

pub fn apply_weight_drop(u: &Tensor, p: f64, rng: &mut Rng) -> Result<Tensor> {
    let mask = weight_drop_mask(u.shape(), p, rng)?;
    let data = u.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
    Tensor::new(u.shape().to_vec(), data)
}

/// One keep/scale factor per vocabulary row.
pub fn embedding_row_mask(rows: usize, p: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    check_p(p, false)?;
    Ok(bernoulli_keep(rows, p, rng))
}

/// Zeroes whole rows of `e` with probability `p`, rescaling survivors.
pub fn embedding_dropout(e: &Tensor, p: f64, rng: &mut Rng) -> Result<Tensor> {
    let rows = e.shape()[0];
    let width = e.len() / rows;
    let mask = embedding_row_mask(rows, p, rng)?;
    let mut out = e.clone();
    for (r, m) in mask.iter().enumerate() {
        for v in &mut out.data_mut()[r * width..(r + 1) * width] {
            *v *= m;
        }
    }
    Ok(out)
}

/// Repeats a `[B×D]` mask for every step of a time-major `[T·B×D]` tensor.
fn tile_steps(mask: &Tensor, steps: usize) -> Tensor {
    let (b, d) = (mask.shape()[0], mask.shape()[1]);
    let data = mask.data().repeat(steps);
    Tensor::new(vec![steps * b, d], data).expect("tiled mask")
}

/// Per-layer hidden and cell state, `[B × out_l]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<Tensor>,
    pub c: Vec<Tensor>,
}

impl LstmState {
    pub fn zeros(config: &ModelConfig, batch: usize) -> Self {
        let dims = config.layer_dims();
        LstmState {
            h: dims.iter().map(|&(_, o)| Tensor::zeros(&[batch, o])).collect(),
            c: dims.iter().map(|&(_, o)| Tensor::zeros(&[batch, o])).collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.h[0].shape()[0]
    }
}

pub struct EncoderOutput {
    /// Last layer outputs, time-major `[T·B × out]`.
    pub output: Var,
    pub steps: usize,
    pub batch: usize,
    /// State after the final step, detached from the tape.
    pub state: LstmState,
}

/// One LSTM step. Gates `i, f, o = σ(·)`, `g = tanh(·)` of the pre-activation
/// `xw + h·Uᵀ` (the bias is already folded into `xw`); returns `(h', c')`.
pub fn lstm_cell_forward(tape: &mut Tape, xw: Var, h: Var, c: Var, u: Var) -> Result<(Var, Var)> {
    let hidden = tape.shape(u)[1];
    let rec = tape.affine(h, u, None)?;
    let gates = tape.add(xw, rec)?;
    let i = tape.slice_cols(gates, 0, hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.slice_cols(gates, hidden, hidden)?;
    let f = tape.sigmoid(f);
    let g = tape.slice_cols(gates, 2 * hidden, hidden)?;
    let g = tape.tanh(g);
    let o = tape.slice_cols(gates, 3 * hidden, hidden)?;
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c2 = tape.add(fc, ig)?;
    let tc = tape.tanh(c2);
    let h2 = tape.mul(o, tc)?;
    Ok((h2, c2))
}

/// Runs the embedding and every LSTM layer over `ids`, given batch-major as
/// `[batch × steps]`.
///
/// `valid`, batch-major like `ids`, marks real tokens; at invalid positions
/// the state is carried over unchanged. Padding is expected at the front.
#[allow(clippy::too_many_arguments)]
pub fn encoder_forward(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    ids: &[usize],
    batch: usize,
    valid: Option<&[bool]>,
    state: Option<&LstmState>,
    phase: &mut Phase<'_>,
) -> Result<EncoderOutput> {
    let config = &model.config;
    if batch == 0 || ids.is_empty() || !ids.len().is_multiple_of(batch) {
        return Err(Error::invalid(format!("{} ids do not split into {batch} lanes", ids.len())));
    }
    let steps = ids.len() / batch;
    if let Some(v) = valid {
        if v.len() != ids.len() {
            return Err(Error::invalid("validity mask length differs from ids"));
        }
    }
    if let Some(s) = state {
        if s.h.len() != config.n_layers || s.batch() != batch {
            return Err(Error::invalid("initial state does not match model and batch"));
        }
    }
    let drop = config.dropouts();
    let mut time_major = Vec::with_capacity(ids.len());
    for t in 0..steps {
        for b in 0..batch {
            let id = ids[b * steps + t];
            if id >= config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    position: b * steps + t,
                    id,
                    vocab: config.vocab_size,
                });
            }
            time_major.push(id);
        }
    }
    let mut x = tape.lookup(bound.embedding, &time_major)?;
    let emb = config.embedding_size;
    if let Some(rng) = phase.rng() {
        if drop.embedding > 0.0 {
            let rows = embedding_row_mask(config.vocab_size, drop.embedding, rng)?;
            let mut data = Vec::with_capacity(time_major.len() * emb);
            for &id in &time_major {
                data.extend(std::iter::repeat_n(rows[id], emb));
            }
            x = tape.mask_mul(x, &Tensor::new(vec![time_major.len(), emb], data)?)?;
        }
        if drop.input > 0.0 {
            let m = variational_mask(&[batch, emb], drop.input, rng)?;
            x = tape.mask_mul(x, &tile_steps(&m, steps))?;
        }
    }

    // Per-step validity as [B × 1]-broadcast masks, only for steps that need one.
    let step_masks: Vec<Option<Vec<f64>>> = (0..steps)
        .map(|t| {
            let v = valid?;
            let flags: Vec<f64> = (0..batch).map(|b| if v[b * steps + t] { 1.0 } else { 0.0 }).collect();
            flags.contains(&0.0).then_some(flags)
        })
        .collect();

    let dims = config.layer_dims();
    let mut final_state = LstmState {
        h: Vec::with_capacity(dims.len()),
        c: Vec::with_capacity(dims.len()),
    };
    for (l, (layer, &(_, hidden))) in bound.layers.iter().zip(&dims).enumerate() {
        let xw = tape.affine(x, layer.w_ih, Some(layer.bias))?;
        let mut u = layer.w_hh;
        if let Some(rng) = phase.rng() {
            if drop.weight_drop > 0.0 {
                let m = weight_drop_mask(tape.shape(u), drop.weight_drop, rng)?;
                u = tape.mask_mul(u, &m)?;
            }
        }
        let (h0, c0) = match state {
            Some(s) => (s.h[l].clone(), s.c[l].clone()),
            None => (Tensor::zeros(&[batch, hidden]), Tensor::zeros(&[batch, hidden])),
        };
        let mut h = tape.constant(h0);
        let mut c = tape.constant(c0);
        let mut outs = Vec::with_capacity(steps);
        for (t, step_mask) in step_masks.iter().enumerate() {
            let xt = tape.slice_rows(xw, t * batch, batch)?;
            let (h2, c2) = lstm_cell_forward(tape, xt, h, c, u)?;
            match step_mask {
                None => {
                    h = h2;
                    c = c2;
                }
                Some(flags) => {
                    let keep = lane_mask(flags, hidden, false);
                    let hold = lane_mask(flags, hidden, true);
                    h = blend(tape, h2, h, &keep, &hold)?;
                    c = blend(tape, c2, c, &keep, &hold)?;
                }
            }
            outs.push(h);
        }
        final_state.h.push(tape.value(h).clone());
        final_state.c.push(tape.value(c).clone());
        x = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 0)? };
        if l + 1 < dims.len() {
            if let Some(rng) = phase.rng() {
                if drop.hidden > 0.0 {
                    let m = variational_mask(&[batch, hidden], drop.hidden, rng)?;
                    x = tape.mask_mul(x, &tile_steps(&m, steps))?;
                }
            }
        }
    }
    Ok(EncoderOutput {
        output: x,
        steps,
        batch,
        state: final_state,
    })
}

fn lane_mask(flags: &[f64], width: usize, invert: bool) -> Tensor {
    let data = flags
        .iter()
        .flat_map(|&f| std::iter::repeat_n(if invert { 1.0 - f } else { f }, width))
        .collect();
    Tensor::new(vec![flags.len(), width], data).expect("lane mask")
}

fn blend(tape: &mut Tape, new: Var, old: Var, keep: &Tensor, hold: &Tensor) -> Result<Var> {
    let a = tape.mask_mul(new, keep)?;
    let b = tape.mask_mul(old, hold)?;
    tape.add(a, b)
}

/// `hidden · Wᵀ + bias` with `W` the embedding when weights are tied.
pub fn decode(tape: &mut Tape, bound: &Bound, hidden: Var) -> Result<Var> {
    let BoundHead::Lm { decoder, bias } = bound.head else {
        return Err(Error::invalid("language-model decoding needs an LM head"));
    };
    let w = decoder.unwrap_or(bound.embedding);
    tape.affine(hidden, w, Some(bias))
}

/// Next-token logits `[T·B × V]` (time-major), with output dropout in
/// training.
pub fn lm_decode(tape: &mut Tape, model: &Model, bound: &Bound, enc: &EncoderOutput, phase: &mut Phase<'_>) -> Result<Var> {
    let mut hidden = enc.output;
    let p = model.config.dropouts().output;
    if let Some(rng) = phase.rng() {
        if p > 0.0 {
            let m = variational_mask(&[enc.batch, model.config.output_size()], p, rng)?;
            hidden = tape.mask_mul(hidden, &tile_steps(&m, enc.steps))?;
        }
    }
    decode(tape, bound, hidden)
}

pub struct ClassifierOutput {
    /// Pre-softmax scores `[B × classes]`.
    pub logits: Var,
    /// Batch statistics from training mode, to fold into the running ones.
    pub moments: Option<BatchMoments>,
}

/// `[T × B]` float mask from a batch-major validity mask.
pub fn time_major_mask(valid: &[bool], batch: usize) -> Result<Tensor> {
    let steps = valid.len() / batch;
    let mut data = vec![0.0; valid.len()];
    for b in 0..batch {
        for t in 0..steps {
            data[t * batch + b] = if valid[b * steps + t] { 1.0 } else { 0.0 };
        }
    }
    Tensor::new(vec![steps, batch], data)
}

/// Concat pooling `[last ‖ max ‖ mean]` over the encoder output, then
/// affine → batchnorm → ReLU → dropout → affine.
pub fn classifier_forward(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    enc: &EncoderOutput,
    valid: Option<&[bool]>,
    phase: &mut Phase<'_>,
) -> Result<ClassifierOutput> {
    let (Head::Classifier(head), BoundHead::Classifier { lin1_w, lin1_b, bn_gamma, bn_beta, lin2_w, lin2_b }) =
        (&model.head, bound.head)
    else {
        return Err(Error::invalid("classification needs a classifier head"));
    };
    if enc.steps == 0 {
        return Err(Error::invalid("classifier input has no time steps"));
    }
    let d = model.config.output_size();
    let seq = tape.reshape(enc.output, &[enc.steps, enc.batch, d])?;
    let mask = valid.map(|v| time_major_mask(v, enc.batch)).transpose()?;
    let last = tape.slice_rows(enc.output, (enc.steps - 1) * enc.batch, enc.batch)?;
    let max = tape.max_over_time(seq, mask.as_ref())?;
    let mean = tape.mean_over_time(seq, mask.as_ref())?;
    let pooled = tape.concat(&[last, max, mean], 1)?;
    let z = tape.affine(pooled, lin1_w, Some(lin1_b))?;
    let stats = match phase {
        Phase::Train(_) => NormStats::Batch,
        Phase::Eval => NormStats::Fixed {
            mean: head.running_mean.data(),
            var: head.running_var.data(),
        },
    };
    let (z, moments) = tape.batchnorm(z, bn_gamma, bn_beta, stats, BATCHNORM_EPS)?;
    let mut z = tape.relu(z);
    let p = model.config.dropouts().output;
    if let Some(rng) = phase.rng() {
        if p > 0.0 {
            let m = variational_mask(&[enc.batch, model.config.head_hidden], p, rng)?;
            z = tape.mask_mul(z, &m)?;
        }
    }
    let logits = tape.affine(z, lin2_w, Some(lin2_b))?;
    Ok(ClassifierOutput { logits, moments })
}

/// Row-wise softmax of a `[N × C]` tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = *logits.shape().last().expect("non-scalar logits");
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}
