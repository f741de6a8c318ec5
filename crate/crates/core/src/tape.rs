//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive evaluates eagerly and appends one node. Nodes are only
//! ever appended after their inputs, so the tape is topologically ordered by
//! construction and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{axpy, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics used by [`Tape::batchnorm`].
#[derive(Clone, Debug)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with externally supplied running statistics.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Affine { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Relu { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Lookup { table: Var, ids: Vec<usize> },
    MaskMul { x: Var, mask: Vec<f64> },
    MeanTime { x: Var, weights: Vec<f64> },
    MaxTime { x: Var, argmax: Vec<usize> },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape { x: Var },
    Sum { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics computed by a training-mode batchnorm, for the caller to
/// fold into running averages.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a node, or `None` if it does not require gradients or was
    /// not reached from the loss.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of a node, zero-filled when the node was not reached.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Moves the raw gradient buffer out.
    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that gradients flow into.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input held fixed.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul { a, b }, rg))
    }

    /// `x[n×in] · w[out×in]ᵀ + b[out]`
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (sx, sw) = (xv.shape(), wv.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(shape_err("affine", xv, wv));
        }
        let (n, din, dout) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(shape_err("affine bias", wv, bv));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm_nt(xv.data(), wv.data(), &mut out, n, din, dout);
        let t = Tensor::new(vec![n, dout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(t, Op::Affine { x, w, b }, rg))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("multiply", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale { x, factor }, rg)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        Tensor::new(xv.shape().to_vec(), data).expect("same shape")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid { x }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        let rg = self.rg(&[x]);
        self.push(t, Op::Tanh { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu { x }, rg)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b) {
                return Err(shape_err("concat", self.value(*first), self.value(*p)));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let block = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Gathers rows of a `[rows×d]` table, giving `[ids.len()×d]`.
    pub fn lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let s = tv.shape();
        if s.len() != 2 {
            return Err(Error::invalid(format!("row lookup needs a 2-D table, got {s:?}")));
        }
        let (rows, d) = (s[0], s[1]);
        if ids.is_empty() {
            return Err(Error::invalid("row lookup with no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for (position, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(Error::TokenOutOfRange {
                    position,
                    id,
                    vocab: rows,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            t,
            Op::Lookup {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multiplies by a constant mask of the same shape.
    pub fn mask_mul(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != mask.shape() {
            return Err(shape_err("masked-multiply", xv, mask));
        }
        let data = xv.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::MaskMul {
                x,
                mask: mask.data().to_vec(),
            },
            rg,
        ))
    }

    fn time_split(&self, x: Var, valid: Option<&Tensor>, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.value(x).shape();
        if s.is_empty() {
            return Err(Error::invalid(format!("{op} needs a leading time axis")));
        }
        let steps = s[0];
        let rest: usize = s[1..].iter().product();
        // Mask granularity: one flag per (t, lane) where lane = s[1]; trailing
        // dims share the flag.
        let lanes = if let Some(m) = valid {
            if s.len() < 2 || m.shape() != [steps, s[1]] {
                return Err(shape_err(op, self.value(x), m));
            }
            s[1]
        } else {
            rest
        };
        Ok((steps, rest, lanes))
    }

    /// Mean over the leading (time) axis. `valid`, if given, is a `[T×B]`
    /// 0/1 mask restricting the average to valid positions of each lane.
    pub fn mean_over_time(&mut self, x: Var, valid: Option<&Tensor>) -> Result<Var> {
        let (steps, rest, lanes) = self.time_split(x, valid, "mean-over-time")?;
        let per_lane = rest / lanes;
        let mut weights = vec![0.0; steps * rest];
        match valid {
            None => weights.fill(1.0 / steps as f64),
            Some(m) => {
                for lane in 0..lanes {
                    let count: f64 = (0..steps).map(|t| m.data()[t * lanes + lane]).sum();
                    if count <= 0.0 {
                        return Err(Error::invalid(format!("mean-over-time: lane {lane} has no valid steps")));
                    }
                    for t in 0..steps {
                        let w = m.data()[t * lanes + lane] / count;
                        let off = t * rest + lane * per_lane;
                        weights[off..off + per_lane].fill(w);
                    }
                }
            }
        }
        let xv = self.value(x);
        let mut out = vec![0.0; rest];
        for t in 0..steps {
            let row = &xv.data()[t * rest..(t + 1) * rest];
            let w = &weights[t * rest..(t + 1) * rest];
            for j in 0..rest {
                out[j] += w[j] * row[j];
            }
        }
        let t = Tensor::new(xv.shape()[1..].to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MeanTime { x, weights }, rg))
    }

    /// Max over the leading (time) axis, restricted to valid positions when a
    /// `[T×B]` mask is given.
    pub fn max_over_time(&mut self, x: Var, valid: Option<&Tensor>) -> Result<Var> {
        let (steps, rest, lanes) = self.time_split(x, valid, "max-over-time")?;
        let per_lane = rest / lanes;
        let xv = self.value(x);
        let mut out = vec![f64::NEG_INFINITY; rest];
        let mut argmax = vec![usize::MAX; rest];
        for t in 0..steps {
            for j in 0..rest {
                if let Some(m) = valid {
                    if m.data()[t * lanes + j / per_lane] == 0.0 {
                        continue;
                    }
                }
                let v = xv.data()[t * rest + j];
                if argmax[j] == usize::MAX || v > out[j] {
                    out[j] = v;
                    argmax[j] = t;
                }
            }
        }
        if argmax.contains(&usize::MAX) {
            return Err(Error::invalid("max-over-time: a lane has no valid steps"));
        }
        let t = Tensor::new(xv.shape()[1..].to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaxTime { x, argmax }, rg))
    }

    /// Per-feature normalization of `x[N×F]` followed by `gamma * x̂ + beta`.
    /// Returns the batch moments when `stats` is [`NormStats::Batch`].
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 2 {
            return Err(Error::invalid(format!("batchnorm needs [N×F], got {s:?}")));
        }
        let (n, f) = (s[0], s[1]);
        for p in [gamma, beta] {
            if self.value(p).shape() != [f] {
                return Err(shape_err("batchnorm", xv, self.value(p)));
            }
        }
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; f];
                for r in 0..n {
                    axpy(1.0 / n as f64, xv.row(r), &mut mean);
                }
                let mut var = vec![0.0; f];
                for r in 0..n {
                    for (j, v) in xv.row(r).iter().enumerate() {
                        let d = v - mean[j];
                        var[j] += d * d / n as f64;
                    }
                }
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != f || var.len() != f {
                    return Err(Error::invalid("batchnorm running statistics have the wrong width"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * f];
        let mut out = vec![0.0; n * f];
        for r in 0..n {
            for j in 0..f {
                let h = (xv.data()[r * f + j] - mean[j]) * inv_std[j];
                xhat[r * f + j] = h;
                out[r * f + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(vec![n, f], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, batch_stats.then_some(BatchMoments { mean, var })))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(Error::invalid(format!("slice_cols {start}..{} of {s:?}", start + len)));
        }
        let (n, m) = (s[0], s[1]);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&xv.data()[r * m + start..r * m + start + len]);
        }
        let t = Tensor::new(vec![n, len], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.is_empty() || len == 0 || start + len > s[0] {
            return Err(Error::invalid(format!("slice_rows {start}..{} of {s:?}", start + len)));
        }
        let inner: usize = s[1..].iter().product();
        let mut shape = s.to_vec();
        shape[0] = len;
        let t = Tensor::new(shape, xv.data()[start * inner..(start + len) * inner].to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), Op::Sum { x }, rg)
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    /// Leading dimensions of `logits` are flattened into rows first.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let s = lv.shape();
        if s.is_empty() {
            return Err(Error::invalid("cross entropy on a scalar"));
        }
        let classes = *s.last().expect("non-empty");
        let rows = lv.len() / classes;
        if rows != targets.len() {
            return Err(Error::Shape {
                op: "cross-entropy",
                lhs: s.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            if target >= classes {
                return Err(Error::TargetOutOfRange {
                    row: r,
                    id: target,
                    classes,
                });
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * classes..(r + 1) * classes];
            let mut z = 0.0;
            for (pj, &l) in p.iter_mut().zip(row) {
                *pj = (l - max).exp();
                z += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= z;
            }
            total += z.ln() + max - row[target];
        }
        let loss = Tensor::scalar(total / rows as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every node that requires gradients
    /// and is reachable from the loss gets one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if let Some(da) = self.acc(grads, *a) {
                    // da[m×k] += g[m×n] · b[k×n]ᵀ
                    gemm_nt(g, bv.data(), da, m, n, k);
                }
                if let Some(db) = self.acc(grads, *b) {
                    // db[k×n] += a[m×k]ᵀ · g[m×n]
                    gemm_tn(av.data(), g, db, m, k, n);
                }
            }
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din, dout) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                if let Some(dx) = self.acc(grads, *x) {
                    gemm_nn(g, wv.data(), dx, n, dout, din);
                }
                if let Some(dw) = self.acc(grads, *w) {
                    gemm_tn(g, xv.data(), dw, n, dout, din);
                }
                if let Some(b) = b {
                    if let Some(db) = self.acc(grads, *b) {
                        for row in g.chunks(dout) {
                            axpy(1.0, row, db);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        axpy(1.0, g, d);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = self.acc(grads, *x) {
                    axpy(*factor, g, dx);
                }
            }
            Op::Sigmoid { x } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Tanh { x } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Relu { x } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                        if *yi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total_block = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let block = self.value(*p).shape()[*axis] * inner;
                    if let Some(dp) = self.acc(grads, *p) {
                        for o in 0..outer {
                            let src = &g[o * total_block + offset..o * total_block + offset + block];
                            axpy(1.0, src, &mut dp[o * block..(o + 1) * block]);
                        }
                    }
                    offset += block;
                }
            }
            Op::Lookup { table, ids } => {
                let d = self.value(*table).shape()[1];
                if let Some(dt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * d..(r + 1) * d], &mut dt[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::MaskMul { x, mask } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, gi), m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::MeanTime { x, weights } => {
                let rest = g.len();
                if let Some(dx) = self.acc(grads, *x) {
                    for (t, chunk) in dx.chunks_mut(rest).enumerate() {
                        let w = &weights[t * rest..(t + 1) * rest];
                        for j in 0..rest {
                            chunk[j] += g[j] * w[j];
                        }
                    }
                }
            }
            Op::MaxTime { x, argmax } => {
                let rest = g.len();
                if let Some(dx) = self.acc(grads, *x) {
                    for (j, &t) in argmax.iter().enumerate() {
                        dx[t * rest + j] += g[j];
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let f = inv_std.len();
                let n = g.len() / f;
                let mut sum_g = vec![0.0; f];
                let mut sum_gx = vec![0.0; f];
                for r in 0..n {
                    for j in 0..f {
                        sum_g[j] += g[r * f + j];
                        sum_gx[j] += g[r * f + j] * xhat[r * f + j];
                    }
                }
                if let Some(dg) = self.acc(grads, *gamma) {
                    axpy(1.0, &sum_gx, dg);
                }
                if let Some(db) = self.acc(grads, *beta) {
                    axpy(1.0, &sum_g, db);
                }
                let gam = self.value(*gamma).data();
                if let Some(dx) = self.acc(grads, *x) {
                    let nf = n as f64;
                    for r in 0..n {
                        for j in 0..f {
                            let k = r * f + j;
                            dx[k] += if *batch_stats {
                                gam[j] * inv_std[j] / nf * (nf * g[k] - sum_g[j] - xhat[k] * sum_gx[j])
                            } else {
                                gam[j] * inv_std[j] * g[k]
                            };
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let m = self.value(*x).shape()[1];
                let len = node.value.shape()[1];
                if let Some(dx) = self.acc(grads, *x) {
                    for (r, row) in g.chunks(len).enumerate() {
                        axpy(1.0, row, &mut dx[r * m + start..r * m + start + len]);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let off = start * (g.len() / node.value.shape()[0]);
                if let Some(dx) = self.acc(grads, *x) {
                    axpy(1.0, g, &mut dx[off..off + g.len()]);
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = self.acc(grads, *x) {
                    axpy(1.0, g, dx);
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let classes = probs.len() / targets.len();
                let scale = g[0] / targets.len() as f64;
                if let Some(dl) = self.acc(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut dl[r * classes..(r + 1) * classes];
                        for (d, p) in row.iter_mut().zip(&probs[r * classes..(r + 1) * classes]) {
                            *d += scale * p;
                        }
                        row[t] -= scale;
                    }
                }
            }
        }
    }
}
