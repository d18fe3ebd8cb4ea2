//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the handles
//! of its inputs. [`Graph::backward`] walks the tape in exact reverse order,
//! so a node's gradient is complete before it is propagated further.

use super::gemm::gemm;
use super::params::{GradBuffer, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{FanError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Height/width pair used for kernels, strides and padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Size2 {
    pub h: usize,
    pub w: usize,
}

impl Size2 {
    pub const fn new(h: usize, w: usize) -> Self {
        Size2 { h, w }
    }

    pub const fn square(n: usize) -> Self {
        Size2 { h: n, w: n }
    }
}

/// Output extent of a sliding window, or `None` if the window does not fit.
pub fn window_out(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBroadcast(Var, Var),
    Gemm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: Size2,
        pad: Size2,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
    },
    NllRows {
        logp: Var,
        targets: Vec<usize>,
    },
    Gather {
        x: Var,
        index: Vec<Option<usize>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of executed operations for one forward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    track_params: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Graph whose parameter leaves require gradients.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            track_params: true,
        }
    }

    /// Graph whose parameter leaves are plain constants; backward through it
    /// yields no parameter gradients.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            track_params: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf. Shares the store's buffer; no copy is made.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let track = self.track_params;
        self.push(store.get(id).clone(), Op::Param(id), track)
    }

    fn same_len(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if self.value(a).len() != self.value(b).len() {
            return Err(FanError::shape(op, format!("operand shapes {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn check_finite(&self, op: &'static str, x: Var) -> Result<()> {
        if self.value(x).is_finite() {
            Ok(())
        } else {
            Err(FanError::NonFinite(op))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("add", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("mul", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(Tensor::from_parts(shape, data), Op::Scale(a, factor), ng)
    }

    /// `m[r, c] + v[c]` for a two-dimensional `m`.
    pub fn add_row_broadcast(&mut self, m: Var, v: Var) -> Result<Var> {
        let ms = self.shape(m).to_vec();
        if ms.len() != 2 || self.value(v).len() != ms[1] {
            return Err(FanError::shape(
                "add_row_broadcast",
                format!("matrix {ms:?} with row vector {:?}", self.shape(v)),
            ));
        }
        let cols = ms[1];
        let vd = self.value(v).data();
        let data: Vec<f64> = self
            .value(m)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vd[i % cols])
            .collect();
        let ng = self.ng(m) || self.ng(v);
        Ok(self.push(Tensor::from_parts(ms, data), Op::AddRowBroadcast(m, v), ng))
    }

    /// Matrix product of two-dimensional operands, optionally transposed.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(FanError::shape("matmul", format!("need 2-D operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(FanError::shape(
                "matmul",
                format!("inner dimension {k} of {sa:?} does not match {k2} of {sb:?}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::Gemm {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            },
            ng,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `w·x + b` for a vector `x` of length n and `w` of shape m×n.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let n = self.value(x).len();
        if ws.len() != 2 || ws[1] != n {
            return Err(FanError::shape(
                "affine",
                format!("weight {ws:?} cannot multiply input of length {n}"),
            ));
        }
        let m = ws[0];
        if let Some(b) = b {
            if self.value(b).len() != m {
                return Err(FanError::shape(
                    "affine",
                    format!("bias length {} does not match output dimension {m}", self.value(b).len()),
                ));
            }
        }
        let mut out = match b {
            Some(b) => self.value(b).data().to_vec(),
            None => vec![0.0; m],
        };
        gemm(m, n, 1, self.value(w).data(), false, self.value(x).data(), false, 1.0, &mut out);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::from_parts(vec![m], out), Op::Affine { x, w, b }, ng))
    }

    /// Two-dimensional convolution of a `C_i×H×W` input with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: Size2, pad: Size2) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 {
            return Err(FanError::shape("conv2d", format!("input must be C×H×W, got {xs:?}")));
        }
        if ws.len() != 4 {
            return Err(FanError::shape("conv2d", format!("weights must be C_o×C_i×k_H×k_W, got {ws:?}")));
        }
        if ws[1] != xs[0] {
            return Err(FanError::shape(
                "conv2d",
                format!("input channels: weights expect {}, input has {}", ws[1], xs[0]),
            ));
        }
        if self.value(b).len() != ws[0] {
            return Err(FanError::shape(
                "conv2d",
                format!("bias length {} does not match output channels {}", self.value(b).len(), ws[0]),
            ));
        }
        let geo = ConvGeom::new(xs[0], xs[1], xs[2], ws[2], ws[3], stride, pad)?;
        let col = geo.im2col(self.value(x).data());
        let co = ws[0];
        let p = geo.ho * geo.wo;
        let bd = self.value(b).data();
        let mut out = vec![0.0; co * p];
        for (o, row) in out.chunks_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = bd[o]);
        }
        gemm(co, geo.ck(), p, self.value(w).data(), false, &col, false, 1.0, &mut out);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            Tensor::from_parts(vec![co, geo.ho, geo.wo], out),
            Op::Conv2d { x, w, b, stride, pad },
            ng,
        ))
    }

    /// Max pooling over a `C×H×W` input; padded cells act as −∞.
    pub fn maxpool2d(&mut self, x: Var, kernel: Size2, stride: Size2, pad: Size2) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(FanError::shape("maxpool2d", format!("input must be C×H×W, got {xs:?}")));
        }
        if pad.h >= kernel.h || pad.w >= kernel.w {
            return Err(FanError::shape(
                "maxpool2d",
                format!("padding {pad:?} must be smaller than kernel {kernel:?}"),
            ));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let ho = window_out(h, kernel.h, stride.h, pad.h).ok_or_else(|| {
            FanError::shape("maxpool2d", format!("height: window {} exceeds padded input {}", kernel.h, h + 2 * pad.h))
        })?;
        let wo = window_out(w, kernel.w, stride.w, pad.w).ok_or_else(|| {
            FanError::shape("maxpool2d", format!("width: window {} exceeds padded input {}", kernel.w, w + 2 * pad.w))
        })?;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..kernel.h {
                        let iy = (oy * stride.h + ky) as isize - pad.h as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel.w {
                            let ix = (ox * stride.w + kx) as isize - pad.w as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if xd[idx] > best || best_i == usize::MAX {
                                best = xd[idx];
                                best_i = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![c, ho, wo], out),
            Op::MaxPool2d { x, argmax },
            ng,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, data), op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.check_finite("tanh", x)?;
        Ok(self.unary(x, f64::tanh, Op::Tanh(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check_finite("sigmoid", x)?;
        Ok(self.unary(x, sigmoid, Op::Sigmoid(x)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite("softmax", x)?;
        let shape = self.shape(x).to_vec();
        let last = *shape.last().unwrap();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(last) {
            softmax_in_place(row);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax(x), ng))
    }

    /// Log-softmax over the last axis, computed in max-shifted form.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite("log_softmax", x)?;
        let shape = self.shape(x).to_vec();
        let last = *shape.last().unwrap();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(last) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::LogSoftmax(x), ng))
    }

    /// Flat concatenation into a vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(FanError::shape("concat", "no operands"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).len()).sum();
        let mut data = Vec::with_capacity(total);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_parts(vec![total], data), Op::Concat(parts.to_vec()), ng))
    }

    /// Contiguous range of the flattened value, as a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.value(x).len();
        if len == 0 || start + len > n {
            return Err(FanError::shape(
                "slice",
                format!("range {start}..{} outside length {n}", start + len),
            ));
        }
        let data = self.value(x).data()[start..start + len].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![len], data), Op::Slice { x, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(FanError::shape("transpose", format!("need 2-D input, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let xd = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xd[i * c + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// `−log_softmax(logits)[target]` for a vector of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        self.check_finite("cross_entropy", logits)?;
        let k = self.value(logits).len();
        if target >= k {
            return Err(FanError::invalid(format!("target class {target} outside 0..{k}")));
        }
        let d = self.value(logits).data();
        let loss = log_sum_exp(d) - d[target];
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target }, ng))
    }

    /// `−Σ_r logp[r, targets[r]]` for a two-dimensional log-probability table.
    pub fn nll_rows(&mut self, logp: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logp).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(FanError::shape(
                "nll_rows",
                format!("table {s:?} with {} targets", targets.len()),
            ));
        }
        let k = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(FanError::invalid(format!("target class {bad} outside 0..{k}")));
        }
        let d = self.value(logp).data();
        let loss = -targets.iter().enumerate().map(|(r, &t)| d[r * k + t]).sum::<f64>();
        let ng = self.ng(logp);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::NllRows {
                logp,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// `out[i] = x[index[i]]`, or zero where the index is `None`.
    pub fn gather(&mut self, x: Var, index: Vec<Option<usize>>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != index.len() || shape.contains(&0) {
            return Err(FanError::shape(
                "gather",
                format!("{} indices cannot fill shape {shape:?}", index.len()),
            ));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= n) {
            return Err(FanError::shape("gather", format!("index {bad} outside length {n}")));
        }
        let xd = self.value(x).data();
        let data = index.iter().map(|i| i.map_or(0.0, |i| xd[i])).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Gather { x, index }, ng))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(FanError::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.slot(v, grads) {
                        axpy(g, dy, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(g) = self.slot(*a, grads) {
                    g.iter_mut().zip(dy.iter().zip(bv)).for_each(|(g, (d, b))| *g += d * b);
                }
                if let Some(g) = self.slot(*b, grads) {
                    g.iter_mut().zip(dy.iter().zip(av)).for_each(|(g, (d, a))| *g += d * a);
                }
            }
            Op::Scale(a, f) => {
                if let Some(g) = self.slot(*a, grads) {
                    axpy(g, dy, *f);
                }
            }
            Op::AddRowBroadcast(m, v) => {
                if let Some(g) = self.slot(*m, grads) {
                    axpy(g, dy, 1.0);
                }
                if let Some(g) = self.slot(*v, grads) {
                    let cols = g.len();
                    for row in dy.chunks(cols) {
                        axpy(g, row, 1.0);
                    }
                }
            }
            &Op::Gemm {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if let Some(g) = self.slot(a, grads) {
                    if ta {
                        gemm(k, n, m, bd, tb, dy, true, 1.0, g);
                    } else {
                        gemm(m, n, k, dy, false, bd, !tb, 1.0, g);
                    }
                }
                if let Some(g) = self.slot(b, grads) {
                    if tb {
                        gemm(n, m, k, dy, true, ad, ta, 1.0, g);
                    } else {
                        gemm(k, m, n, ad, !ta, dy, false, 1.0, g);
                    }
                }
            }
            &Op::Affine { x, w, b } => {
                let m = dy.len();
                let xv = self.value(x).data();
                let n = xv.len();
                if let Some(g) = self.slot(w, grads) {
                    for (r, &d) in dy.iter().enumerate() {
                        if d != 0.0 {
                            axpy(&mut g[r * n..(r + 1) * n], xv, d);
                        }
                    }
                }
                if let Some(g) = self.slot(x, grads) {
                    gemm(n, m, 1, self.value(w).data(), true, dy, false, 1.0, g);
                }
                if let Some(b) = b {
                    if let Some(g) = self.slot(b, grads) {
                        axpy(g, dy, 1.0);
                    }
                }
            }
            &Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.shape(x);
                let ws = self.shape(w);
                let geo = ConvGeom::new(xs[0], xs[1], xs[2], ws[2], ws[3], stride, pad)
                    .expect("geometry validated in forward");
                let co = ws[0];
                let p = geo.ho * geo.wo;
                if let Some(g) = self.slot(b, grads) {
                    for (o, row) in dy.chunks(p).enumerate() {
                        g[o] += row.iter().sum::<f64>();
                    }
                }
                let need_w = self.ng(w);
                let need_x = self.ng(x);
                if need_w {
                    let col = geo.im2col(self.value(x).data());
                    let g = self.slot(w, grads).expect("needs grad");
                    gemm(co, p, geo.ck(), dy, false, &col, true, 1.0, g);
                }
                if need_x {
                    let mut dcol = vec![0.0; geo.ck() * p];
                    gemm(geo.ck(), co, p, self.value(w).data(), true, dy, false, 0.0, &mut dcol);
                    let g = self.slot(x, grads).expect("needs grad");
                    geo.col2im_add(&dcol, g);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if let Some(g) = self.slot(*x, grads) {
                    for (&src, &d) in argmax.iter().zip(dy) {
                        g[src] += d;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(g) = self.slot(*x, grads) {
                    for ((g, &d), &v) in g.iter_mut().zip(dy).zip(xv) {
                        if v > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(g) = self.slot(*x, grads) {
                    for ((g, &d), &y) in g.iter_mut().zip(dy).zip(y) {
                        *g += d * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(g) = self.slot(*x, grads) {
                    for ((g, &d), &y) in g.iter_mut().zip(dy).zip(y) {
                        *g += d * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let last = *node.value.shape().last().unwrap();
                if let Some(g) = self.slot(*x, grads) {
                    for ((g, d), y) in g.chunks_mut(last).zip(dy.chunks(last)).zip(y.chunks(last)) {
                        let dot: f64 = d.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..last {
                            g[j] += y[j] * (d[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let last = *node.value.shape().last().unwrap();
                if let Some(g) = self.slot(*x, grads) {
                    for ((g, d), y) in g.chunks_mut(last).zip(dy.chunks(last)).zip(y.chunks(last)) {
                        let total: f64 = d.iter().sum();
                        for j in 0..last {
                            g[j] += d[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(g) = self.slot(p, grads) {
                        axpy(g, &dy[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            &Op::Slice { x, start } => {
                if let Some(g) = self.slot(x, grads) {
                    axpy(&mut g[start..start + dy.len()], dy, 1.0);
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = self.slot(*x, grads) {
                    axpy(g, dy, 1.0);
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                if let Some(g) = self.slot(*x, grads) {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += dy[j * r + i];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.slot(*x, grads) {
                    g.iter_mut().for_each(|v| *v += dy[0]);
                }
            }
            &Op::CrossEntropy { logits, target } => {
                let lv = self.value(logits).data().to_vec();
                if let Some(g) = self.slot(logits, grads) {
                    let mut p = lv;
                    softmax_in_place(&mut p);
                    for (j, (g, p)) in g.iter_mut().zip(&p).enumerate() {
                        let onehot = if j == target { 1.0 } else { 0.0 };
                        *g += dy[0] * (p - onehot);
                    }
                }
            }
            Op::Gather { x, index } => {
                if let Some(g) = self.slot(*x, grads) {
                    for (i, d) in index.iter().zip(dy) {
                        if let Some(i) = i {
                            g[*i] += d;
                        }
                    }
                }
            }
            Op::NllRows { logp, targets } => {
                let k = self.shape(*logp)[1];
                if let Some(g) = self.slot(*logp, grads) {
                    for (r, &t) in targets.iter().enumerate() {
                        g[r * k + t] -= dy[0];
                    }
                }
            }
        }
    }

    /// Gradient buffer for `v`, allocated on first use; `None` when `v` does
    /// not take gradients.
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut [f64]> {
        if !self.ng(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros if `v` was not reached.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        let shape = graph.shape(v).to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    /// Whether a gradient buffer was populated for `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads.get(v.0).is_some_and(Option::is_some)
    }

    /// Add every parameter leaf's gradient into `buf`.
    pub fn accumulate(&self, graph: &Graph, buf: &mut GradBuffer) {
        for (i, node) in graph.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(Some(g)) = self.grads.get(i) {
                    axpy(buf.get_mut(id), g, 1.0);
                }
            }
        }
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    debug_assert_eq!(y.len(), x.len());
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Geometry of one convolution, shared by forward and backward.
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: Size2,
    pad: Size2,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: Size2, pad: Size2) -> Result<Self> {
        if stride.h == 0 || stride.w == 0 {
            return Err(FanError::shape("conv2d", "stride must be positive"));
        }
        let ho = window_out(h, kh, stride.h, pad.h).ok_or_else(|| {
            FanError::shape("conv2d", format!("height: kernel {kh} exceeds padded input {}", h + 2 * pad.h))
        })?;
        let wo = window_out(w, kw, stride.w, pad.w).ok_or_else(|| {
            FanError::shape("conv2d", format!("width: kernel {kw} exceeds padded input {}", w + 2 * pad.w))
        })?;
        Ok(ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn ck(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Visit every (column row, output position, input index) triple that
    /// lands inside the unpadded input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let p = self.ho * self.wo;
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride.h + ky) as isize - self.pad.h as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let in_row = (ch * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride.w + kx) as isize - self.pad.w as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row * p + oy * self.wo + ox, in_row + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut col = vec![0.0; self.ck() * self.ho * self.wo];
        self.for_each_tap(|ci, xi| col[ci] = x[xi]);
        col
    }

    fn col2im_add(&self, dcol: &[f64], dx: &mut [f64]) {
        self.for_each_tap(|ci, xi| dx[xi] += dcol[ci]);
    }
}
