//! Dense f64 tensors and a reverse-mode differentiation tape.
//!
//! Values are flat row-major `Vec<f64>` with an explicit shape. The [`Tape`]
//! records one node per executed primitive; [`Tape::backward`] replays the
//! records in reverse order and accumulates a gradient contribution for every
//! use of every input, so a value consumed twice receives both contributions.
//!
//! There is no broadcasting beyond bias addition over the last axis; every
//! backward rule is a direct transcription of the corresponding forward
//! index arithmetic, which keeps the rules auditable and lets
//! [`grad_check`] verify all of them against central finite differences.

use crate::{Error, Result};

/// Dense multi-dimensional value array with optional gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![r, c],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MinElem(Var, Var),
    MaxElem(Var, Var),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Scale(Var, f64),
    AddConst(Var),
    /// Elementwise multiply by a constant mask (dropout).
    MulMask(Var, Vec<f64>),
    /// Bias vector added to every last-axis slice.
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    Sum(Var),
    Mean(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    BilinearResize(Var),
    /// `[c, h, w]` feature map to `[h*w, c]` token rows.
    ChannelsToRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed primitives with their backward rules.
///
/// The tape is confined to one forward/backward pass; parameters live
/// outside it (see [`ParamStore`]) and are bound as leaves per pass.
pub struct Tape {
    nodes: Vec<Node>,
    /// Test hook: deliberately mis-scale the matmul backward rule so the
    /// finite-difference checker can prove it detects broken gradients.
    pub corrupt_matmul_backward: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// (outer, axis_len, inner) decomposition for slice-wise iteration.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// a[m×n] · b[k×n]ᵀ -> [m×k]
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            out[i * k + p] = s;
        }
    }
    out
}

/// a[m×k]ᵀ · b[m×n] -> [k×n]
fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

fn bilinear_coeffs(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    // (low index, high index, high weight) per destination coordinate,
    // half-pixel-center sampling clamped at the borders.
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            corrupt_matmul_backward: false,
        }
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

    /// Gradient of the last `backward` root w.r.t. `v`, if tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires: bool) -> Var {
        value.requires_grad = requires;
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Constant leaf; gradients are not tracked through it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf (a parameter binding).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        same_shape(self.value(a), self.value(b), what)?;
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.value(a).shape.clone(), data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(t, op, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn min_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "min", f64::min, Op::MinElem(a, b))
    }

    pub fn max_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "max", f64::max, Op::MaxElem(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data: Vec<f64> = self.value(x).data.iter().map(|&v| f(v)).collect();
        let t = Tensor {
            shape: self.value(x).shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        };
        let req = self.requires(x);
        self.push(t, op, req)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddConst(x))
    }

    pub fn mul_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::Shape(format!(
                "mask length {} vs tensor {:?}",
                mask.len(),
                self.value(x).shape
            )));
        }
        let data: Vec<f64> = self
            .value(x)
            .data
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let t = Tensor {
            shape: self.value(x).shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        };
        let req = self.requires(x);
        Ok(self.push(t, Op::MulMask(x, mask), req))
    }

    /// Bias vector added to every last-axis slice of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.value(x).shape.last().unwrap();
        let bt = self.value(bias);
        if bt.shape != [d] {
            return Err(Error::Shape(format!(
                "add_bias: bias {:?} vs last axis {d} of {:?}",
                bt.shape,
                self.value(x).shape
            )));
        }
        let bdata = bt.data.clone();
        let data: Vec<f64> = self
            .value(x)
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bdata[i % d])
            .collect();
        let t = Tensor {
            shape: self.value(x).shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        };
        let req = self.requires(x) || self.requires(bias);
        Ok(self.push(t, Op::AddBias(x, bias), req))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() != 2 || bt.rank() != 2 || at.shape[1] != bt.shape[0] {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                at.shape, bt.shape
            )));
        }
        let (m, k, n) = (at.shape[0], at.shape[1], bt.shape[1]);
        let data = matmul_raw(&at.data, &bt.data, m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::MatMul(a, b), req))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 2 {
            return Err(Error::Shape(format!("transpose: rank-2 only, got {:?}", xt.shape)));
        }
        let (r, c) = (xt.shape[0], xt.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xt.data[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], data)?;
        let req = self.requires(x);
        Ok(self.push(t, Op::Transpose(x), req))
    }

    /// Softmax along `axis`; every slice is max-shifted before
    /// exponentiation so arbitrarily large inputs cannot overflow.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xt = self.value(x);
        if axis >= xt.rank() {
            return Err(Error::Shape(format!(
                "softmax: axis {axis} out of range for {:?}",
                xt.shape
            )));
        }
        let (outer, len, inner) = axis_split(&xt.shape, axis);
        let mut data = xt.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for t in 0..len {
                    mx = mx.max(data[base + t * inner]);
                }
                let mut sum = 0.0;
                for t in 0..len {
                    let e = (data[base + t * inner] - mx).exp();
                    data[base + t * inner] = e;
                    sum += e;
                }
                for t in 0..len {
                    data[base + t * inner] /= sum;
                }
            }
        }
        let t = Tensor::new(xt.shape.clone(), data)?;
        let req = self.requires(x);
        Ok(self.push(t, Op::Softmax(x, axis), req))
    }

    /// Normalize the last axis to zero mean / unit variance, then apply
    /// `gain` and `bias`. Constant slices collapse to `bias` (eps floor).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = *self.value(x).shape.last().unwrap();
        for (v, role) in [(gain, "gain"), (bias, "bias")] {
            if self.value(v).shape != [d] {
                return Err(Error::Shape(format!(
                    "layer_norm: {role} {:?} vs last axis {d}",
                    self.value(v).shape
                )));
            }
        }
        let xt = self.value(x);
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut data = vec![0.0; xt.numel()];
        for (s, slice) in xt.data.chunks(d).enumerate() {
            let mean = slice.iter().sum::<f64>() / d as f64;
            let var = slice.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, &v) in slice.iter().enumerate() {
                data[s * d + j] = g[j] * (v - mean) * inv + b[j];
            }
        }
        let t = Tensor::new(xt.shape.clone(), data)?;
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, eps }, req))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let req = self.requires(x);
        self.push(Tensor::scalar(s), Op::Sum(x), req)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.value(x).data.iter().sum::<f64>() / n;
        let req = self.requires(x);
        self.push(Tensor::scalar(s), Op::Mean(x), req)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        if axis >= xt.rank() || start + len > xt.shape[axis] || len == 0 {
            return Err(Error::Shape(format!(
                "narrow: axis {axis} range {start}+{len} of {:?}",
                xt.shape
            )));
        }
        let (outer, alen, inner) = axis_split(&xt.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&xt.data[base..base + len * inner]);
        }
        let mut shape = xt.shape.clone();
        shape[axis] = len;
        let t = Tensor::new(shape, data)?;
        let req = self.requires(x);
        Ok(self.push(
            t,
            Op::Narrow {
                x,
                axis,
                start,
                len,
            },
            req,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(parts[0]).shape.clone();
        if axis >= first.len() {
            return Err(Error::Shape(format!(
                "concat: axis {axis} out of range for {first:?}"
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = &self.value(p).shape;
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape(format!("concat: {s:?} vs {first:?}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let pt = self.value(p);
                let plen = pt.shape[axis];
                data.extend_from_slice(&pt.data[o * plen * inner..(o + 1) * plen * inner]);
            }
        }
        let t = Tensor::new(shape, data)?;
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            req,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xt = self.value(x);
        if shape.iter().product::<usize>() != xt.numel() {
            return Err(Error::Shape(format!(
                "reshape: {:?} to {shape:?}",
                xt.shape
            )));
        }
        let t = Tensor::new(shape, xt.data.clone())?;
        let req = self.requires(x);
        Ok(self.push(t, Op::Reshape(x), req))
    }

    /// Weighted sum of per-row cross-entropies: Σᵢ wᵢ·(lse(rowᵢ) − rowᵢ[tᵢ]).
    pub fn cross_entropy_rows(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let lt = self.value(logits);
        if lt.rank() != 2 || lt.shape[0] != targets.len() || targets.len() != weights.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {:?}, {} targets, {} weights",
                lt.shape,
                targets.len(),
                weights.len()
            )));
        }
        let c = lt.shape[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Shape(format!("cross_entropy: target {t} >= {c}")));
        }
        let mut total = 0.0;
        for (i, row) in lt.data.chunks(c).enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            total += weights[i] * (lse - row[targets[i]]);
        }
        let req = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            req,
        ))
    }

    /// Cross-entropy of a single logit vector against a target index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = self.value(logits).numel();
        let rows = self.reshape(logits, vec![1, n])?;
        self.cross_entropy_rows(rows, &[target], &[1.0])
    }

    /// x·w + bias over row vectors.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, bias)
    }

    pub fn add_many(&mut self, vars: &[Var]) -> Result<Var> {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    /// 2D convolution over a `[c_in, h, w]` map with `[c_out, c_in, kh, kw]`
    /// weights, `[c_out]` bias, square stride and zero padding.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(weight), self.value(bias));
        if xt.rank() != 3 || wt.rank() != 4 || bt.rank() != 1 {
            return Err(Error::Shape(format!(
                "conv2d: x {:?}, w {:?}, b {:?}",
                xt.shape, wt.shape, bt.shape
            )));
        }
        let (cin, h, w) = (xt.shape[0], xt.shape[1], xt.shape[2]);
        let (cout, kcin, kh, kw) = (wt.shape[0], wt.shape[1], wt.shape[2], wt.shape[3]);
        if kcin != cin || bt.shape[0] != cout || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d: x {:?} incompatible with w {:?}, b {:?}, pad {pad}",
                xt.shape, wt.shape, bt.shape
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut data = vec![0.0; cout * oh * ow];
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bt.data[oc];
                    for ic in 0..cin {
                        for ky in 0..kh {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = ox * stride + kx;
                                if ix < pad || ix - pad >= w {
                                    continue;
                                }
                                s += wt.data[((oc * cin + ic) * kh + ky) * kw + kx]
                                    * xt.data[(ic * h + iy - pad) * w + ix - pad];
                            }
                        }
                    }
                    data[(oc * oh + oy) * ow + ox] = s;
                }
            }
        }
        let t = Tensor::new(vec![cout, oh, ow], data)?;
        let req = self.requires(x) || self.requires(weight) || self.requires(bias);
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                weight,
                bias,
                stride,
                pad,
            },
            req,
        ))
    }

    /// Bilinear resampling of a rank-2 grid to `oh × ow`.
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 2 {
            return Err(Error::Shape(format!(
                "bilinear_resize: rank-2 only, got {:?}",
                xt.shape
            )));
        }
        let (h, w) = (xt.shape[0], xt.shape[1]);
        let ys = bilinear_coeffs(h, oh);
        let xs = bilinear_coeffs(w, ow);
        let mut data = vec![0.0; oh * ow];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v00 = xt.data[y0 * w + x0];
                let v01 = xt.data[y0 * w + x1];
                let v10 = xt.data[y1 * w + x0];
                let v11 = xt.data[y1 * w + x1];
                data[oy * ow + ox] = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
            }
        }
        let t = Tensor::new(vec![oh, ow], data)?;
        let req = self.requires(x);
        Ok(self.push(t, Op::BilinearResize(x), req))
    }

    pub fn channels_to_rows(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 3 {
            return Err(Error::Shape(format!(
                "channels_to_rows: rank-3 only, got {:?}",
                xt.shape
            )));
        }
        let (c, h, w) = (xt.shape[0], xt.shape[1], xt.shape[2]);
        let mut data = vec![0.0; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                data[p * c + ch] = xt.data[ch * h * w + p];
            }
        }
        let t = Tensor::new(vec![h * w, c], data)?;
        let req = self.requires(x);
        Ok(self.push(t, Op::ChannelsToRows(x), req))
    }

    /// Reverse-mode sweep from a scalar `root`. Fills the `grad` field of
    /// every node that requires gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                self.value(root).shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..n).rev() {
            if !self.nodes[id].value.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.apply_backward(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, g) in grads.into_iter().enumerate() {
            if self.nodes[id].value.requires_grad {
                let numel = self.nodes[id].value.numel();
                self.nodes[id].value.grad = Some(g.unwrap_or_else(|| vec![0.0; numel]));
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].value.requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        match slot {
            Some(g) => {
                for (gi, &c) in g.iter_mut().zip(contrib) {
                    *gi += c;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    fn apply_backward(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                self.accumulate(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(&val(*b).data).map(|(&gi, &bv)| gi * bv).collect();
                let db: Vec<f64> = g.iter().zip(&val(*a).data).map(|(&gi, &av)| gi * av).collect();
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::Div(a, b) => {
                let (av, bv) = (&val(*a).data, &val(*b).data);
                let da: Vec<f64> = g.iter().zip(bv).map(|(&gi, &y)| gi / y).collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(&gi, (&x, &y))| -gi * x / (y * y))
                    .collect();
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::MinElem(a, b) | Op::MaxElem(a, b) => {
                let take_a: Vec<bool> = {
                    let (av, bv) = (&val(*a).data, &val(*b).data);
                    let is_min = matches!(node.op, Op::MinElem(..));
                    av.iter()
                        .zip(bv)
                        .map(|(&x, &y)| if is_min { x <= y } else { x >= y })
                        .collect()
                };
                let da: Vec<f64> = g
                    .iter()
                    .zip(&take_a)
                    .map(|(&gi, &t)| if t { gi } else { 0.0 })
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(&take_a)
                    .map(|(&gi, &t)| if t { 0.0 } else { gi })
                    .collect();
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::Abs(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&val(*x).data)
                    .map(|(&gi, &v)| gi * v.signum() * if v == 0.0 { 0.0 } else { 1.0 })
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Relu(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&val(*x).data)
                    .map(|(&gi, &v)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Sigmoid(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&node.value.data)
                    .map(|(&gi, &s)| gi * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Log(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&val(*x).data)
                    .map(|(&gi, &v)| gi / v)
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|&gi| gi * c).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::AddConst(x) => self.accumulate(grads, *x, g),
            Op::MulMask(x, mask) => {
                let dx: Vec<f64> = g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g);
                let d = val(*bias).numel();
                let mut db = vec![0.0; d];
                for (i, &gi) in g.iter().enumerate() {
                    db[i % d] += gi;
                }
                self.accumulate(grads, *bias, &db);
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (val(*a), val(*b));
                let (m, k, n) = (at.shape[0], at.shape[1], bt.shape[1]);
                let mut da = matmul_nt_raw(g, &bt.data, m, n, k);
                if self.corrupt_matmul_backward {
                    for v in &mut da {
                        *v *= 1.1;
                    }
                }
                let db = matmul_tn_raw(&at.data, g, m, k, n);
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape[0], node.value.shape[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g[i * c + j];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::Softmax(x, axis) => {
                let s = &node.value;
                let (outer, len, inner) = axis_split(&s.shape, *axis);
                let mut dx = vec![0.0; s.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for t in 0..len {
                            let idx = base + t * inner;
                            dot += g[idx] * s.data[idx];
                        }
                        for t in 0..len {
                            let idx = base + t * inner;
                            dx[idx] = s.data[idx] * (g[idx] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xt = val(*x);
                let gv = &val(*gain).data;
                let d = *xt.shape.last().unwrap();
                let slices = xt.numel() / d;
                let mut dx = vec![0.0; xt.numel()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for s in 0..slices {
                    let xs = &xt.data[s * d..(s + 1) * d];
                    let gs = &g[s * d..(s + 1) * d];
                    let mean = xs.iter().sum::<f64>() / d as f64;
                    let var = xs.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let ys: Vec<f64> = xs.iter().map(|&v| (v - mean) * inv).collect();
                    let mut m1 = 0.0; // mean of g·dout
                    let mut m2 = 0.0; // mean of g·dout·y
                    for j in 0..d {
                        let gd = gv[j] * gs[j];
                        m1 += gd;
                        m2 += gd * ys[j];
                        dg[j] += gs[j] * ys[j];
                        db[j] += gs[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dx[s * d + j] = (gv[j] * gs[j] - m1 - ys[j] * m2) * inv;
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *gain, &dg);
                self.accumulate(grads, *bias, &db);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; val(*x).numel()];
                self.accumulate(grads, *x, &dx);
            }
            Op::Mean(x) => {
                let n = val(*x).numel();
                let dx = vec![g[0] / n as f64; n];
                self.accumulate(grads, *x, &dx);
            }
            Op::Narrow {
                x,
                axis,
                start,
                len,
            } => {
                let xt = val(*x);
                let (outer, alen, inner) = axis_split(&xt.shape, *axis);
                let mut dx = vec![0.0; xt.numel()];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * alen + start) * inner;
                    for i in 0..len * inner {
                        dx[dst + i] += g[src + i];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::Concat { parts, axis } => {
                let shape = &node.value.shape;
                let (outer, _, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                let total = shape[*axis];
                for &p in parts {
                    let plen = val(p).shape[*axis];
                    if self.nodes[p.0].value.requires_grad {
                        let mut dp = vec![0.0; outer * plen * inner];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * plen * inner;
                            dp[dst..dst + plen * inner]
                                .copy_from_slice(&g[src..src + plen * inner]);
                        }
                        self.accumulate(grads, p, &dp);
                    }
                    offset += plen;
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g),
            Op::CrossEntropyRows {
                logits,
                targets,
                weights,
            } => {
                let lt = val(*logits);
                let c = lt.shape[1];
                let mut dl = vec![0.0; lt.numel()];
                for (i, row) in lt.data.chunks(c).enumerate() {
                    if weights[i] == 0.0 {
                        continue;
                    }
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for j in 0..c {
                        let p = exps[j] / sum;
                        let ind = if j == targets[i] { 1.0 } else { 0.0 };
                        dl[i * c + j] = g[0] * weights[i] * (p - ind);
                    }
                }
                self.accumulate(grads, *logits, &dl);
            }
            Op::Conv2d {
                x,
                weight,
                bias,
                stride,
                pad,
            } => {
                let (xt, wt) = (val(*x), val(*weight));
                let (cin, h, w) = (xt.shape[0], xt.shape[1], xt.shape[2]);
                let (cout, kh, kw) = (wt.shape[0], wt.shape[2], wt.shape[3]);
                let (oh, ow) = (node.value.shape[1], node.value.shape[2]);
                let mut dx = vec![0.0; xt.numel()];
                let mut dw = vec![0.0; wt.numel()];
                let mut db = vec![0.0; cout];
                for oc in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gi = g[(oc * oh + oy) * ow + ox];
                            if gi == 0.0 {
                                continue;
                            }
                            db[oc] += gi;
                            for ic in 0..cin {
                                for ky in 0..kh {
                                    let iy = oy * stride + ky;
                                    if iy < *pad || iy - pad >= h {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = ox * stride + kx;
                                        if ix < *pad || ix - pad >= w {
                                            continue;
                                        }
                                        let widx = ((oc * cin + ic) * kh + ky) * kw + kx;
                                        let xidx = (ic * h + iy - pad) * w + ix - pad;
                                        dw[widx] += gi * xt.data[xidx];
                                        dx[xidx] += gi * wt.data[widx];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *weight, &dw);
                self.accumulate(grads, *bias, &db);
            }
            Op::BilinearResize(x) => {
                let xt = val(*x);
                let (h, w) = (xt.shape[0], xt.shape[1]);
                let (oh, ow) = (node.value.shape[0], node.value.shape[1]);
                let ys = bilinear_coeffs(h, oh);
                let xs = bilinear_coeffs(w, ow);
                let mut dx = vec![0.0; h * w];
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let gi = g[oy * ow + ox];
                        dx[y0 * w + x0] += gi * (1.0 - fy) * (1.0 - fx);
                        dx[y0 * w + x1] += gi * (1.0 - fy) * fx;
                        dx[y1 * w + x0] += gi * fy * (1.0 - fx);
                        dx[y1 * w + x1] += gi * fy * fx;
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::ChannelsToRows(x) => {
                let xt = val(*x);
                let (c, h, w) = (xt.shape[0], xt.shape[1], xt.shape[2]);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for p in 0..h * w {
                        dx[ch * h * w + p] = g[p * c + ch];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
        }
    }
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named parameter tensors that persist across training steps.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, mut t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        t.requires_grad = true;
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Register every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Copy gradients off the tape back into the stored tensors.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            t.grad = tape.grad(bound.vars[i]).map(|g| g.to_vec());
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// Parameter bindings for one tape pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckOutcome {
    pub max_rel_error: f64,
    /// Parameter name and flat element index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub scalars_checked: usize,
}

/// Compare analytic gradients of a scalar-valued builder against central
/// finite differences over every scalar in `store`.
///
/// Relative error per scalar is |analytic − numeric| / max(1, |analytic|,
/// |numeric|). Non-finite evaluations are an error naming the offending
/// parameter elements.
pub fn grad_check<F>(store: &ParamStore, eps: f64, build: F) -> Result<GradCheckOutcome>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps} outside [1e-6, 1e-4]")));
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let root = build(&mut tape, &bound)?;
    if tape.value(root).numel() != 1 {
        return Err(Error::Shape("grad_check builder must return a scalar".into()));
    }
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = store
        .ids()
        .map(|id| {
            tape.grad(bound.var(id))
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; store.get(id).numel()])
        })
        .collect();

    let mut work = store.clone();
    let mut max_rel = 0.0_f64;
    let mut worst = None;
    let mut bad = Vec::new();
    let mut checked = 0;
    for (pi, id) in store.ids().enumerate() {
        for ei in 0..store.get(id).numel() {
            let orig = work.get(id).data[ei];
            let eval = |v: f64, work: &mut ParamStore| -> Result<f64> {
                work.get_mut(id).data[ei] = v;
                let mut t = Tape::new();
                let b = work.bind(&mut t);
                let r = build(&mut t, &b)?;
                Ok(t.value(r).data[0])
            };
            let fp = eval(orig + eps, &mut work)?;
            let fm = eval(orig - eps, &mut work)?;
            work.get_mut(id).data[ei] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                bad.push(format!("{}[{ei}]", store.name(id)));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi][ei];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            if rel > max_rel {
                max_rel = rel;
                worst = Some((store.name(id).to_string(), ei));
            }
            checked += 1;
        }
    }
    if !bad.is_empty() {
        return Err(Error::Numeric(format!(
            "non-finite evaluations at {}",
            bad.join(", ")
        )));
    }
    Ok(GradCheckOutcome {
        max_rel_error: max_rel,
        worst,
        scalars_checked: checked,
    })
}
