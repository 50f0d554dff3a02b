// SPDX-License-Identifier: Apache-2.0

//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] borrows one [`ParamVector`]; parameter leaves are views into it
//! (no copies), and their gradients are scattered straight into a flat
//! [`Gradient`] aligned with that vector. Nodes are appended in evaluation
//! order, so reverse iteration is a valid topological order.

use crate::ops::{self, ConvGeom};
use crate::params::{Gradient, ParamSlot, ParamVector};
use crate::{shape_err, NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param {
        offset: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Powf(usize, f64),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        n: usize,
        inp: usize,
        out: usize,
    },
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        g: ConvGeom,
    },
    AvgPool {
        x: usize,
        c: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    },
    SoftmaxRows {
        x: usize,
        rows: usize,
        cols: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        n: usize,
        k: usize,
        m: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Concat(Vec<usize>),
    ConcatCols {
        parts: Vec<(usize, usize)>,
        rows: usize,
    },
    Slice {
        a: usize,
        start: usize,
    },
    ColSlice {
        a: usize,
        rows: usize,
        cols: usize,
        start: usize,
        width: usize,
    },
    Reshape(usize),
    Sum(usize),
    MeanRows {
        a: usize,
        rows: usize,
        cols: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param { .. } => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Powf(..) => "powf",
            Op::Linear { .. } => "linear",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool { .. } => "avg_pool",
            Op::SoftmaxRows { .. } => "softmax",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Concat(_) => "concat",
            Op::ConcatCols { .. } => "concat_cols",
            Op::Slice { .. } => "slice",
            Op::ColSlice { .. } => "col_slice",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::MeanRows { .. } => "mean_rows",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    len: usize,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
    labels: Vec<(usize, String)>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamVector) -> Self {
        Self {
            params: params.values(),
            nodes: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param { offset } => &self.params[offset..offset + node.len],
            _ => &node.value,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn size(&self, v: Var) -> usize {
        self.nodes[v.0].len
    }

    /// Attach a human-readable name used in non-finite diagnostics.
    pub fn label(&mut self, v: Var, name: impl Into<String>) {
        self.labels.push((v.0, name.into()));
    }

    fn push(&mut self, value: Vec<f64>, op: Op, parents: &[usize]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        let len = value.len();
        self.nodes.push(Node { value, len, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Vec<f64>) -> Var {
        let len = value.len();
        self.nodes.push(Node {
            value,
            len,
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, slot: ParamSlot) -> Var {
        self.nodes.push(Node {
            value: Vec::new(),
            len: slot.len,
            op: Op::Param { offset: slot.offset },
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_len(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.size(a) != self.size(b) {
            return Err(shape_err(op, format!("{} elements", self.size(a)), format!("{} elements", self.size(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("add", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(v, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("sub", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(v, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("mul", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(v, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * k).collect();
        self.push(v, Op::Scale(a.0, k), &[a.0])
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).iter().map(|x| x + k).collect();
        self.push(v, Op::Offset(a.0), &[a.0])
    }

    /// Elementwise `a^p`; inputs are expected positive.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).iter().map(|x| x.powf(p)).collect();
        self.push(v, Op::Powf(a.0, p), &[a.0])
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(v, op, &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), ops::sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    /// Natural log; non-positive inputs surface as non-finite values at `backward`.
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a.0), f64::ln)
    }

    pub fn activation(&mut self, a: Var, act: ops::Activation) -> Var {
        match act {
            ops::Activation::Relu => self.relu(a),
            ops::Activation::Tanh => self.tanh(a),
            ops::Activation::Identity => a,
        }
    }

    /// `x: n×inp` times `w: out×inp` transposed, plus optional bias `b: out`.
    pub fn linear(&mut self, x: Var, n: usize, w: Var, out: usize, b: Option<Var>) -> Result<Var> {
        let xl = self.size(x);
        if n == 0 || !xl.is_multiple_of(n) {
            return Err(shape_err("linear", format!("input divisible into {n} rows"), format!("{xl} elements")));
        }
        let inp = xl / n;
        if self.size(w) != out * inp {
            return Err(shape_err("linear", format!("weights {out}x{inp}"), format!("{} elements", self.size(w))));
        }
        if let Some(b) = b {
            if self.size(b) != out {
                return Err(shape_err("linear", format!("bias of length {out}"), format!("{}", self.size(b))));
            }
        }
        let mut y = vec![0.0; n * out];
        ops::linear_into(self.value(x), n, inp, self.value(w), out, b.map(|b| self.value(b)), &mut y);
        let mut parents = vec![x.0, w.0];
        if let Some(b) = b {
            parents.push(b.0);
        }
        Ok(self.push(
            y,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                n,
                inp,
                out,
            },
            &parents,
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, g: ConvGeom) -> Result<Var> {
        g.check()?;
        if self.size(x) != g.c * g.h * g.w {
            return Err(shape_err(
                "conv2d",
                format!("{}x{}x{} input", g.c, g.h, g.w),
                format!("{} elements", self.size(x)),
            ));
        }
        if self.size(w) != g.k * g.c * g.kh * g.kw {
            return Err(shape_err(
                "conv2d",
                format!("{}x{}x{}x{} kernels", g.k, g.c, g.kh, g.kw),
                format!("{} elements", self.size(w)),
            ));
        }
        let mut y = vec![0.0; g.k * g.out_h() * g.out_w()];
        ops::conv2d_into(self.value(x), self.value(w), b.map(|b| self.value(b)), g, &mut y);
        let mut parents = vec![x.0, w.0];
        if let Some(b) = b {
            parents.push(b.0);
        }
        Ok(self.push(
            y,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                g,
            },
            &parents,
        ))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Result<Var> {
        if self.size(x) != c * h * w || oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(shape_err(
                "adaptive_avg_pool",
                format!("{c}x{h}x{w} input pooled to ≤ its size"),
                format!("{} elements to {oh}x{ow}", self.size(x)),
            ));
        }
        let mut y = vec![0.0; c * oh * ow];
        ops::adaptive_avg_pool_into(self.value(x), c, h, w, oh, ow, &mut y);
        Ok(self.push(y, Op::AvgPool { x: x.0, c, h, w, oh, ow }, &[x.0]))
    }

    pub fn softmax_rows(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        if self.size(x) != rows * cols {
            return Err(shape_err("softmax", format!("{rows}x{cols}"), format!("{}", self.size(x))));
        }
        let mut y = vec![0.0; rows * cols];
        ops::softmax_rows_into(self.value(x), rows, cols, &mut y);
        Ok(self.push(y, Op::SoftmaxRows { x: x.0, rows, cols }, &[x.0]))
    }

    pub fn matmul(&mut self, a: Var, b: Var, n: usize, k: usize, m: usize) -> Result<Var> {
        if self.size(a) != n * k || self.size(b) != k * m {
            return Err(shape_err(
                "matmul",
                format!("{n}x{k} by {k}x{m}"),
                format!("{} and {} elements", self.size(a), self.size(b)),
            ));
        }
        let mut y = vec![0.0; n * m];
        ops::matmul_into(self.value(a), self.value(b), n, k, m, &mut y);
        Ok(self.push(y, Op::MatMul { a: a.0, b: b.0, n, k, m }, &[a.0, b.0]))
    }

    pub fn transpose(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        if self.size(a) != rows * cols {
            return Err(shape_err("transpose", format!("{rows}x{cols}"), format!("{}", self.size(a))));
        }
        let y = ops::transpose(self.value(a), rows, cols);
        Ok(self.push(y, Op::Transpose { a: a.0, rows, cols }, &[a.0]))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut y = Vec::with_capacity(parts.iter().map(|p| self.size(*p)).sum());
        for p in parts {
            y.extend_from_slice(self.value(*p));
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(y, Op::Concat(ids.clone()), &ids)
    }

    /// Concatenate `rows×w_i` matrices side by side.
    pub fn concat_cols(&mut self, parts: &[Var], rows: usize) -> Result<Var> {
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.size(*p);
            if rows == 0 || !s.is_multiple_of(rows) {
                return Err(shape_err("concat_cols", format!("{rows} rows"), format!("{s} elements")));
            }
            widths.push(s / rows);
        }
        let total: usize = widths.iter().sum();
        let mut y = vec![0.0; rows * total];
        let mut col = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let v = self.value(*p);
            for r in 0..rows {
                y[r * total + col..r * total + col + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let pairs: Vec<(usize, usize)> = parts.iter().map(|p| p.0).zip(widths).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(y, Op::ConcatCols { parts: pairs, rows }, &ids))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.size(a) {
            return Err(shape_err(
                "slice",
                format!("range within {}", self.size(a)),
                format!("{start}..{}", start + len),
            ));
        }
        let y = self.value(a)[start..start + len].to_vec();
        Ok(self.push(y, Op::Slice { a: a.0, start }, &[a.0]))
    }

    pub fn col_slice(&mut self, a: Var, rows: usize, cols: usize, start: usize, width: usize) -> Result<Var> {
        if self.size(a) != rows * cols || start + width > cols {
            return Err(shape_err(
                "col_slice",
                format!("{rows}x{cols}"),
                format!("cols {start}..{}", start + width),
            ));
        }
        let v = self.value(a);
        let mut y = Vec::with_capacity(rows * width);
        for r in 0..rows {
            y.extend_from_slice(&v[r * cols + start..r * cols + start + width]);
        }
        Ok(self.push(
            y,
            Op::ColSlice {
                a: a.0,
                rows,
                cols,
                start,
                width,
            },
            &[a.0],
        ))
    }

    /// Same values, new logical owner; used to bound a parameter view.
    pub fn reshape(&mut self, a: Var) -> Var {
        let y = self.value(a).to_vec();
        self.push(y, Op::Reshape(a.0), &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![s], Op::Sum(a.0), &[a.0])
    }

    pub fn mean_rows(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        if self.size(a) != rows * cols || rows == 0 {
            return Err(shape_err("mean_rows", format!("{rows}x{cols}"), format!("{}", self.size(a))));
        }
        let v = self.value(a);
        let mut y = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                y[c] += v[r * cols + c];
            }
        }
        let inv = 1.0 / rows as f64;
        y.iter_mut().for_each(|x| *x *= inv);
        Ok(self.push(y, Op::MeanRows { a: a.0, rows, cols }, &[a.0]))
    }

    /// First node holding a non-finite value, described with the nearest label.
    fn first_non_finite(&self) -> Option<String> {
        let idx = (0..self.nodes.len()).find(|&i| self.value(Var(i)).iter().any(|v| !v.is_finite()))?;
        let label = self
            .labels
            .iter()
            .filter(|(n, _)| *n >= idx)
            .min_by_key(|(n, _)| *n)
            .map(|(_, l)| l.as_str())
            .unwrap_or("<unlabelled>");
        Some(format!(
            "node #{idx} ({}) first non-finite; feeds term `{label}`",
            self.nodes[idx].op.name()
        ))
    }

    /// Backpropagate from scalar `loss`; gradient is aligned with the borrowed parameters.
    pub fn backward(&self, loss: Var) -> Result<Gradient> {
        if self.size(loss) != 1 {
            return Err(shape_err("backward", "scalar loss", format!("{} elements", self.size(loss))));
        }
        if !self.scalar(loss).is_finite() {
            let why = self.first_non_finite().unwrap_or_default();
            return Err(NnError::NonFinite(format!("loss is {}; {why}", self.scalar(loss))));
        }
        let mut flat = vec![0.0; self.params.len()];
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &gout, &mut grads, &mut flat);
        }
        Gradient::from_values(flat)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], flat: &mut [f64], p: usize, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[p];
        if !node.needs_grad {
            return;
        }
        match node.op {
            Op::Param { offset } => f(&mut flat[offset..offset + node.len]),
            _ => {
                let buf = grads[p].get_or_insert_with(|| vec![0.0; node.len]);
                f(buf)
            }
        }
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], flat: &mut [f64]) {
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Input | Op::Param { .. } => {}
            Op::Add(a, b) => {
                self.accumulate(grads, flat, *a, |d| add_into(d, g));
                self.accumulate(grads, flat, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, flat, *a, |d| add_into(d, g));
                self.accumulate(grads, flat, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(Var(*a)), self.value(Var(*b)));
                self.accumulate(grads, flat, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * bv[k];
                    }
                });
                self.accumulate(grads, flat, *b, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * av[k];
                    }
                });
            }
            Op::Scale(a, k) => self.accumulate(grads, flat, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += k * g)),
            Op::Offset(a) | Op::Reshape(a) => self.accumulate(grads, flat, *a, |d| add_into(d, g)),
            Op::Powf(a, p) => {
                let av = self.value(Var(*a));
                self.accumulate(grads, flat, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * p * av[k].powf(p - 1.0);
                    }
                })
            }
            Op::Tanh(a) => self.accumulate(grads, flat, *a, |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }),
            Op::Sigmoid(a) => self.accumulate(grads, flat, *a, |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }),
            Op::Exp(a) => self.accumulate(grads, flat, *a, |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * y[k];
                }
            }),
            Op::Ln(a) => {
                let av = self.value(Var(*a));
                self.accumulate(grads, flat, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / av[k];
                    }
                })
            }
            Op::Relu(a) => {
                let av = self.value(Var(*a));
                self.accumulate(grads, flat, *a, |d| {
                    for k in 0..d.len() {
                        if av[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                })
            }
            Op::Linear { x, w, b, n, inp, out } => {
                let (n, inp, out) = (*n, *inp, *out);
                let (xv, wv) = (self.value(Var(*x)), self.value(Var(*w)));
                self.accumulate(grads, flat, *x, |d| {
                    for r in 0..n {
                        for j in 0..out {
                            let gj = g[r * out + j];
                            if gj == 0.0 {
                                continue;
                            }
                            let wrow = &wv[j * inp..(j + 1) * inp];
                            let drow = &mut d[r * inp..(r + 1) * inp];
                            drow.iter_mut().zip(wrow).for_each(|(d, w)| *d += gj * w);
                        }
                    }
                });
                self.accumulate(grads, flat, *w, |d| {
                    for r in 0..n {
                        let xrow = &xv[r * inp..(r + 1) * inp];
                        for j in 0..out {
                            let gj = g[r * out + j];
                            if gj == 0.0 {
                                continue;
                            }
                            let drow = &mut d[j * inp..(j + 1) * inp];
                            drow.iter_mut().zip(xrow).for_each(|(d, x)| *d += gj * x);
                        }
                    }
                });
                if let Some(b) = b {
                    self.accumulate(grads, flat, *b, |d| {
                        for r in 0..n {
                            add_into(d, &g[r * out..(r + 1) * out]);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, g: geo } => {
                let geo = *geo;
                let (oh, ow) = (geo.out_h(), geo.out_w());
                let (xv, wv) = (self.value(Var(*x)), self.value(Var(*w)));
                self.accumulate(grads, flat, *x, |d| {
                    for k in 0..geo.k {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g[(k * oh + oy) * ow + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                for c in 0..geo.c {
                                    for dy in 0..geo.kh {
                                        let row = c * geo.h * geo.w + (oy * geo.stride + dy) * geo.w + ox * geo.stride;
                                        let wrow = ((k * geo.c + c) * geo.kh + dy) * geo.kw;
                                        for dx in 0..geo.kw {
                                            d[row + dx] += go * wv[wrow + dx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, flat, *w, |d| {
                    for k in 0..geo.k {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g[(k * oh + oy) * ow + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                for c in 0..geo.c {
                                    for dy in 0..geo.kh {
                                        let row = c * geo.h * geo.w + (oy * geo.stride + dy) * geo.w + ox * geo.stride;
                                        let wrow = ((k * geo.c + c) * geo.kh + dy) * geo.kw;
                                        for dx in 0..geo.kw {
                                            d[wrow + dx] += go * xv[row + dx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    self.accumulate(grads, flat, *b, |d| {
                        for k in 0..geo.k {
                            d[k] += g[k * oh * ow..(k + 1) * oh * ow].iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::AvgPool { x, c, h, w, oh, ow } => {
                let (c, h, w, oh, ow) = (*c, *h, *w, *oh, *ow);
                self.accumulate(grads, flat, *x, |d| {
                    for ch in 0..c {
                        for i in 0..oh {
                            let (y0, y1) = ops::adaptive_bin(i, h, oh);
                            for j in 0..ow {
                                let (x0, x1) = ops::adaptive_bin(j, w, ow);
                                let share = g[(ch * oh + i) * ow + j] / ((y1 - y0) * (x1 - x0)) as f64;
                                for yy in y0..y1 {
                                    let base = (ch * h + yy) * w;
                                    d[base + x0..base + x1].iter_mut().for_each(|v| *v += share);
                                }
                            }
                        }
                    }
                });
            }
            Op::SoftmaxRows { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                self.accumulate(grads, flat, *x, |d| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            d[r * cols + c] += yr[c] * (gr[c] - s);
                        }
                    }
                });
            }
            Op::MatMul { a, b, n, k, m } => {
                let (n, k, m) = (*n, *k, *m);
                let (av, bv) = (self.value(Var(*a)), self.value(Var(*b)));
                self.accumulate(grads, flat, *a, |d| {
                    for i in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += g[i * m + j] * bv[p * m + j];
                            }
                            d[i * k + p] += s;
                        }
                    }
                });
                self.accumulate(grads, flat, *b, |d| {
                    for i in 0..n {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for j in 0..m {
                                d[p * m + j] += aip * g[i * m + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose { a, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                self.accumulate(grads, flat, *a, |d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            d[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].len;
                    self.accumulate(grads, flat, p, |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|(_, w)| w).sum();
                let mut col = 0;
                for &(p, w) in parts {
                    self.accumulate(grads, flat, p, |d| {
                        for r in 0..*rows {
                            add_into(&mut d[r * w..(r + 1) * w], &g[r * total + col..r * total + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::Slice { a, start } => {
                let start = *start;
                self.accumulate(grads, flat, *a, |d| add_into(&mut d[start..start + g.len()], g));
            }
            Op::ColSlice { a, rows, cols, start, width } => {
                let (rows, cols, start, width) = (*rows, *cols, *start, *width);
                self.accumulate(grads, flat, *a, |d| {
                    for r in 0..rows {
                        add_into(&mut d[r * cols + start..r * cols + start + width], &g[r * width..(r + 1) * width]);
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.accumulate(grads, flat, *a, |d| d.iter_mut().for_each(|v| *v += g0));
            }
            Op::MeanRows { a, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let inv = 1.0 / rows as f64;
                self.accumulate(grads, flat, *a, |d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            d[r * cols + c] += g[c] * inv;
                        }
                    }
                });
            }
        }
    }
}

#[inline]
fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

/// Evaluate `loss_fn` on a fresh tape over `at` and return the loss with `∂loss/∂at`.
///
/// A non-finite loss is rejected; the error names the first non-finite node
/// and the labelled term it feeds (see [`Graph::label`]).
pub fn gradient_of<F>(at: &ParamVector, loss_fn: F) -> Result<(f64, Gradient)>
where
    F: FnOnce(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(at);
    let loss = loss_fn(&mut g)?;
    let grad = g.backward(loss)?;
    Ok((g.scalar(loss), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::LayoutBuilder;

    fn vec_params(n: usize, seed: u64) -> (ParamVector, ParamSlot) {
        let mut b = LayoutBuilder::new();
        let slot = b.register("theta", &[n]);
        let mut pv = ParamVector::zeros(b.finish());
        for (i, v) in pv.values_mut().iter_mut().enumerate() {
            *v = ((i as u64 * 2654435761 + seed) % 1000) as f64 / 500.0 - 1.0;
        }
        (pv, slot)
    }

    #[test]
    fn quadratic_gradient_is_theta() {
        let (pv, slot) = vec_params(7, 3);
        let (loss, grad) = gradient_of(&pv, |g| {
            let t = g.param(slot);
            let sq = g.mul(t, t)?;
            let s = g.sum(sq);
            Ok(g.scale(s, 0.5))
        })
        .unwrap();
        assert!(loss > 0.0);
        for (a, b) in grad.values().iter().zip(pv.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let (pv, slot) = vec_params(4, 1);
        let (_, grad) = gradient_of(&pv, |g| {
            let _t = g.param(slot);
            let c = g.input(vec![3.5]);
            Ok(g.sum(c))
        })
        .unwrap();
        assert!(grad.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_loss_names_term() {
        let (pv, slot) = vec_params(3, 1);
        let err = gradient_of(&pv, |g| {
            let t = g.param(slot);
            let big = g.scale(t, 1e308);
            let e = g.exp(big);
            g.label(e, "blowup_term");
            Ok(g.sum(e))
        })
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("blowup_term"), "{msg}");
    }
}
