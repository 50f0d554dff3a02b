// SPDX-License-Identifier: Apache-2.0

//! Plain forward kernels.
//!
//! Everything here works on row-major `f64` slices. The tape in
//! [`crate::graph`] calls the same kernels, so a value computed through the
//! tape is bitwise equal to the plain evaluation.

use serde::{Deserialize, Serialize};

use crate::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

/// Borrowed row-major matrix.
#[derive(Debug, Clone, Copy)]
pub struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "matrix",
                format!("{rows}x{cols} = {} values", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { data, rows, cols })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorise; order is fixed so results
    // stay deterministic.
    let n = a.len().min(b.len());
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

/// `y[i, j] = Σ_k x[i, k]·w[j, k] + b[j]` for `x: n×inp`, `w: out×inp`.
pub fn linear_into(x: &[f64], n: usize, inp: usize, w: &[f64], out: usize, b: Option<&[f64]>, y: &mut [f64]) {
    debug_assert_eq!(x.len(), n * inp);
    debug_assert_eq!(w.len(), out * inp);
    debug_assert_eq!(y.len(), n * out);
    for i in 0..n {
        let xi = &x[i * inp..(i + 1) * inp];
        let yi = &mut y[i * out..(i + 1) * out];
        for j in 0..out {
            let acc = dot(xi, &w[j * inp..(j + 1) * inp]);
            yi[j] = match b {
                Some(b) => acc + b[j],
                None => acc,
            };
        }
    }
}

/// `output[j] = act(Σ_k W[j,k]·input[k] + b[j])`.
pub fn dense_forward(input: &[f64], weights: Mat<'_>, bias: &[f64], activation: Activation) -> Result<Vec<f64>> {
    if weights.cols != input.len() || bias.len() != weights.rows {
        return Err(shape_err(
            "dense_forward",
            format!("input of length {} and bias of length {}", weights.cols, weights.rows),
            format!(
                "weights {}x{}, input of length {}, bias of length {}",
                weights.rows,
                weights.cols,
                input.len(),
                bias.len()
            ),
        ));
    }
    let mut y = vec![0.0; weights.rows];
    linear_into(input, 1, weights.cols, weights.data, weights.rows, Some(bias), &mut y);
    for v in &mut y {
        *v = activation.apply(*v);
    }
    Ok(y)
}

/// Geometry of a valid (no padding) strided 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - self.kw) / self.stride + 1
    }

    pub fn check(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(shape_err("conv2d", "stride ≥ 1", "stride 0"));
        }
        if self.kh > self.h || self.kw > self.w || self.kh == 0 || self.kw == 0 {
            return Err(shape_err(
                "conv2d",
                format!("kernel no larger than input {}x{}", self.h, self.w),
                format!("kernel {}x{}", self.kh, self.kw),
            ));
        }
        Ok(())
    }
}

pub fn conv2d_into(x: &[f64], wts: &[f64], b: Option<&[f64]>, g: ConvGeom, y: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for k in 0..g.k {
        let bias = b.map_or(0.0, |b| b[k]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..g.c {
                    let wbase = ((k * g.c + c) * g.kh) * g.kw;
                    let xbase = c * g.h * g.w;
                    for dy in 0..g.kh {
                        let row = xbase + (oy * g.stride + dy) * g.w + ox * g.stride;
                        let wrow = wbase + dy * g.kw;
                        acc += dot(&x[row..row + g.kw], &wts[wrow..wrow + g.kw]);
                    }
                }
                y[(k * oh + oy) * ow + ox] = acc + bias;
            }
        }
    }
}

/// Valid cross-correlation of a `C×H×W` input with `K×C×kh×kw` kernels.
pub fn conv2d_forward(
    input: &[f64],
    dims: (usize, usize, usize),
    kernels: &[f64],
    kdims: (usize, usize, usize, usize),
    stride: usize,
) -> Result<Vec<f64>> {
    let (c, h, w) = dims;
    let (k, kc, kh, kw) = kdims;
    if input.len() != c * h * w {
        return Err(shape_err("conv2d", format!("{c}x{h}x{w} input"), format!("{} values", input.len())));
    }
    if kc != c || kernels.len() != k * kc * kh * kw {
        return Err(shape_err(
            "conv2d",
            format!("kernels with {c} input channels"),
            format!("{k}x{kc}x{kh}x{kw} ({} values)", kernels.len()),
        ));
    }
    let g = ConvGeom { c, h, w, k, kh, kw, stride };
    g.check()?;
    let mut y = vec![0.0; k * g.out_h() * g.out_w()];
    conv2d_into(input, kernels, None, g, &mut y);
    Ok(y)
}

/// Bin `[start, end)` used by adaptive average pooling for output index `i`.
#[inline]
pub fn adaptive_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = (i * input) / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

pub fn adaptive_avg_pool_into(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize, y: &mut [f64]) {
    for ch in 0..c {
        for i in 0..oh {
            let (y0, y1) = adaptive_bin(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = adaptive_bin(j, w, ow);
                let mut acc = 0.0;
                for yy in y0..y1 {
                    let base = (ch * h + yy) * w;
                    acc += x[base + x0..base + x1].iter().sum::<f64>();
                }
                y[(ch * oh + i) * ow + j] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
}

pub fn softmax_rows_into(x: &[f64], rows: usize, cols: usize, y: &mut [f64]) {
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let yr = &mut y[r * cols..(r + 1) * cols];
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in yr.iter_mut() {
            *o /= sum;
        }
    }
}

/// `a: n×k`, `b: k×m` → `n×m`.
pub fn matmul_into(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, y: &mut [f64]) {
    y.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..n {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            let yrow = &mut y[i * m..(i + 1) * m];
            for (o, bv) in yrow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Per-head scaled dot-product attention on already-projected inputs.
///
/// `q: n×d`, `k, v: m×d`; returns (`n×d` head outputs concatenated, the
/// `heads×n×m` attention weights).
pub fn scaled_dot_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, m: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut weights = vec![0.0; heads * n * m];
    let mut scores = vec![0.0; n * m];
    for h in 0..heads {
        for i in 0..n {
            for j in 0..m {
                let qi = &q[i * d + h * dh..i * d + (h + 1) * dh];
                let kj = &k[j * d + h * dh..j * d + (h + 1) * dh];
                scores[i * m + j] = dot(qi, kj) * scale;
            }
        }
        let wh = &mut weights[h * n * m..(h + 1) * n * m];
        softmax_rows_into(&scores, n, m, wh);
        for i in 0..n {
            for j in 0..m {
                let a = wh[i * m + j];
                for c in 0..dh {
                    out[i * d + h * dh + c] += a * v[j * d + h * dh + c];
                }
            }
        }
    }
    (out, weights)
}

/// Recurrent cell flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

/// Borrowed parameters of one recurrent direction.
///
/// LSTM: gates ordered `[i, f, g, o]`, `w_ih: 4H×d`, `w_hh: 4H×H`, one bias `b_ih: 4H`.
/// GRU: gates ordered `[r, z, n]`, `w_ih: 3H×d`, `w_hh: 3H×H`, `b_ih`, `b_hh: 3H`.
#[derive(Debug, Clone, Copy)]
pub struct CellParams<'a> {
    pub kind: CellKind,
    pub input: usize,
    pub hidden: usize,
    pub w_ih: &'a [f64],
    pub w_hh: &'a [f64],
    pub b_ih: &'a [f64],
    pub b_hh: Option<&'a [f64]>,
}

/// Scratch-free single step; updates `h` (and `c` for LSTM) in place.
pub fn cell_step(p: &CellParams<'_>, x: &[f64], h: &mut [f64], c: &mut [f64], scratch: &mut Vec<f64>) {
    let hd = p.hidden;
    let g = p.kind.gates() * hd;
    scratch.resize(2 * g, 0.0);
    let (gx, gh) = scratch.split_at_mut(g);
    linear_into(x, 1, p.input, p.w_ih, g, Some(p.b_ih), gx);
    linear_into(h, 1, hd, p.w_hh, g, p.b_hh, gh);
    match p.kind {
        CellKind::Lstm => {
            for j in 0..hd {
                let i = sigmoid(gx[j] + gh[j]);
                let f = sigmoid(gx[hd + j] + gh[hd + j]);
                let gg = (gx[2 * hd + j] + gh[2 * hd + j]).tanh();
                let o = sigmoid(gx[3 * hd + j] + gh[3 * hd + j]);
                c[j] = f * c[j] + i * gg;
                h[j] = o * c[j].tanh();
            }
        }
        CellKind::Gru => {
            for j in 0..hd {
                let r = sigmoid(gx[j] + gh[j]);
                let z = sigmoid(gx[hd + j] + gh[hd + j]);
                let n = (gx[2 * hd + j] + r * gh[2 * hd + j]).tanh();
                h[j] = (1.0 - z) * n + z * h[j];
            }
        }
    }
}

/// Final hidden state of one direction over `seq: T×d`.
pub fn run_direction(p: &CellParams<'_>, seq: &[f64], steps: usize, reverse: bool) -> Vec<f64> {
    let mut h = vec![0.0; p.hidden];
    let mut c = vec![0.0; p.hidden];
    let mut scratch = Vec::new();
    for s in 0..steps {
        let t = if reverse { steps - 1 - s } else { s };
        cell_step(p, &seq[t * p.input..(t + 1) * p.input], &mut h, &mut c, &mut scratch);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity() {
        let w = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let y = dense_forward(&[1.0, 2.0, 3.0], Mat::new(&w, 3, 3).unwrap(), &[0.0; 3], Activation::Identity).unwrap();
        assert_eq!(y, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn dense_relu_clamps() {
        let w = [1.0, 0.0, 0.0, 1.0];
        let y = dense_forward(&[-1.0, 4.0], Mat::new(&w, 2, 2).unwrap(), &[0.0; 2], Activation::Relu).unwrap();
        assert_eq!(y, vec![0.0, 4.0]);
    }

    #[test]
    fn dense_hand_arithmetic() {
        // [[1,1],[1,-1]]·(2,3) + (0.5,0) = (5.5, -1)
        let w = [1.0, 1.0, 1.0, -1.0];
        let y = dense_forward(&[2.0, 3.0], Mat::new(&w, 2, 2).unwrap(), &[0.5, 0.0], Activation::Identity).unwrap();
        assert_eq!(y, vec![5.5, -1.0]);
    }

    #[test]
    fn dense_shape_error_mentions_both_shapes() {
        let w = [0.0; 6];
        let err = dense_forward(&[1.0, 2.0], Mat::new(&w, 2, 3).unwrap(), &[0.0; 2], Activation::Identity).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("length 2"), "{msg}");
    }

    #[test]
    fn conv_all_ones() {
        let y = conv2d_forward(&[1.0; 9], (1, 3, 3), &[1.0; 4], (1, 1, 2, 2), 1).unwrap();
        assert_eq!(y, vec![4.0; 4]);
    }

    #[test]
    fn conv_zero_kernel_and_stride_shape() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let y = conv2d_forward(&x, (1, 4, 4), &[0.0; 4], (1, 1, 2, 2), 2).unwrap();
        assert_eq!(y.len(), 4);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_kernel_larger_than_input() {
        assert!(conv2d_forward(&[1.0; 4], (1, 2, 2), &[1.0; 9], (1, 1, 3, 3), 1).is_err());
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 2 channels, 4x5 input, 3 kernels of 2x3, stride 1; compare against naive loops.
        let x: Vec<f64> = (0..40).map(|v| ((v * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..36).map(|v| ((v * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let y = conv2d_forward(&x, (2, 4, 5), &w, (3, 2, 2, 3), 1).unwrap();
        for k in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..3 {
                                s += x[c * 20 + (oy + dy) * 5 + ox + dx] * w[((k * 2 + c) * 2 + dy) * 3 + dx];
                            }
                        }
                    }
                    assert!((y[(k * 3 + oy) * 3 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn adaptive_pool_bins_cover_input() {
        for (inp, out) in [(7, 3), (36, 4), (5, 5), (4, 1)] {
            let mut covered = vec![false; inp];
            for i in 0..out {
                let (s, e) = adaptive_bin(i, inp, out);
                assert!(s < e && e <= inp);
                covered[s..e].iter_mut().for_each(|c| *c = true);
            }
            assert!(covered.iter().all(|&c| c));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = [1.0, 2.0, 3.0, -100.0, 0.0, 100.0];
        let mut y = [0.0; 6];
        softmax_rows_into(&x, 2, 3, &mut y);
        assert!((y[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((y[3..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let q = [0.3, -1.2, 0.5, 2.0];
        let k = [0.7, 0.1, 0.2, -0.4, 0.7, 0.1, 0.2, -0.4];
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let (_, w) = scaled_dot_attention(&q, &k, &v, 1, 2, 4, 2);
        for a in w {
            assert!((a - 0.5).abs() < 1e-15);
        }
    }
}
