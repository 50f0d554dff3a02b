// SPDX-License-Identifier: Apache-2.0

//! Layers as parameter-slot bundles.
//!
//! A layer registers its tensors with a [`LayoutBuilder`] at construction and
//! keeps only the resulting [`ParamSlot`]s. The same layer can then be run on
//! a tape ([`Graph`]) or plainly against any [`ParamVector`] with a matching
//! layout.

use crate::graph::{Graph, Var};
use crate::ops::{self, Activation, CellKind, CellParams, ConvGeom};
use crate::params::{LayoutBuilder, ParamSlot, ParamVector};
use crate::{shape_err, NnError, Result};

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamSlot,
    pub bias: ParamSlot,
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn new(b: &mut LayoutBuilder, name: &str, input: usize, output: usize, activation: Activation) -> Self {
        b.push_scope(name);
        let weight = b.register("weight", &[output, input]);
        let bias = b.register("bias", &[output]);
        b.pop_scope();
        Self {
            weight,
            bias,
            input,
            output,
            activation,
        }
    }

    /// `x: n×input` → `n×output`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, n: usize) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.linear(x, n, w, self.output, Some(b))?;
        Ok(g.activation(y, self.activation))
    }

    pub fn forward_plain(&self, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
        if !x.len().is_multiple_of(self.input) {
            return Err(shape_err("dense", format!("rows of {}", self.input), format!("{}", x.len())));
        }
        let n = x.len() / self.input;
        let mut y = vec![0.0; n * self.output];
        ops::linear_into(
            x,
            n,
            self.input,
            params.tensor(self.weight),
            self.output,
            Some(params.tensor(self.bias)),
            &mut y,
        );
        y.iter_mut().for_each(|v| *v = self.activation.apply(*v));
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamSlot,
    pub bias: ParamSlot,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(b: &mut LayoutBuilder, name: &str, in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        b.push_scope(name);
        let weight = b.register("weight", &[out_channels, in_channels, kernel, kernel]);
        let bias = b.register("bias", &[out_channels]);
        b.pop_scope();
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom {
            c: self.in_channels,
            h,
            w,
            k: self.out_channels,
            kh: self.kernel,
            kw: self.kernel,
            stride: self.stride,
        }
    }

    /// Returns the output and its spatial size.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, h: usize, w: usize) -> Result<(Var, usize, usize)> {
        let geo = self.geom(h, w);
        let wt = g.param(self.weight);
        let bias = g.param(self.bias);
        let y = g.conv2d(x, wt, Some(bias), geo)?;
        Ok((y, geo.out_h(), geo.out_w()))
    }
}

/// Parameters of one recurrent direction.
#[derive(Debug, Clone)]
pub struct RnnCell {
    pub kind: CellKind,
    pub input: usize,
    pub hidden: usize,
    pub w_ih: ParamSlot,
    pub w_hh: ParamSlot,
    pub b_ih: ParamSlot,
    pub b_hh: Option<ParamSlot>,
}

impl RnnCell {
    pub fn new(b: &mut LayoutBuilder, name: &str, kind: CellKind, input: usize, hidden: usize) -> Self {
        let g = kind.gates() * hidden;
        b.push_scope(name);
        let w_ih = b.register("w_ih", &[g, input]);
        let w_hh = b.register("w_hh", &[g, hidden]);
        let b_ih = b.register("b_ih", &[g]);
        let b_hh = match kind {
            CellKind::Gru => Some(b.register("b_hh", &[g])),
            CellKind::Lstm => None,
        };
        b.pop_scope();
        Self {
            kind,
            input,
            hidden,
            w_ih,
            w_hh,
            b_ih,
            b_hh,
        }
    }

    pub fn borrow<'a>(&self, params: &'a ParamVector) -> CellParams<'a> {
        CellParams {
            kind: self.kind,
            input: self.input,
            hidden: self.hidden,
            w_ih: params.tensor(self.w_ih),
            w_hh: params.tensor(self.w_hh),
            b_ih: params.tensor(self.b_ih),
            b_hh: self.b_hh.map(|s| params.tensor(s)),
        }
    }

    /// Final hidden state over `seq: steps×input` on the tape.
    fn run(&self, g: &mut Graph<'_>, seq: Var, steps: usize, reverse: bool) -> Result<Var> {
        let hd = self.hidden;
        let gates = self.kind.gates() * hd;
        let w_ih = g.param(self.w_ih);
        let w_hh = g.param(self.w_hh);
        let b_ih = g.param(self.b_ih);
        let b_hh = self.b_hh.map(|s| g.param(s));
        let gx_all = g.linear(seq, steps, w_ih, gates, Some(b_ih))?;
        let mut h = g.input(vec![0.0; hd]);
        let mut c = g.input(vec![0.0; hd]);
        for s in 0..steps {
            let t = if reverse { steps - 1 - s } else { s };
            let gx = g.slice(gx_all, t * gates, gates)?;
            let gh = g.linear(h, 1, w_hh, gates, b_hh)?;
            match self.kind {
                CellKind::Lstm => {
                    let pre = g.add(gx, gh)?;
                    let i = g.slice(pre, 0, hd)?;
                    let i = g.sigmoid(i);
                    let f = g.slice(pre, hd, hd)?;
                    let f = g.sigmoid(f);
                    let gg = g.slice(pre, 2 * hd, hd)?;
                    let gg = g.tanh(gg);
                    let o = g.slice(pre, 3 * hd, hd)?;
                    let o = g.sigmoid(o);
                    let fc = g.mul(f, c)?;
                    let ig = g.mul(i, gg)?;
                    c = g.add(fc, ig)?;
                    let tc = g.tanh(c);
                    h = g.mul(o, tc)?;
                }
                CellKind::Gru => {
                    let xr = g.slice(gx, 0, hd)?;
                    let hr = g.slice(gh, 0, hd)?;
                    let r = g.add(xr, hr)?;
                    let r = g.sigmoid(r);
                    let xz = g.slice(gx, hd, hd)?;
                    let hz = g.slice(gh, hd, hd)?;
                    let z = g.add(xz, hz)?;
                    let z = g.sigmoid(z);
                    let xn = g.slice(gx, 2 * hd, hd)?;
                    let hn = g.slice(gh, 2 * hd, hd)?;
                    let rhn = g.mul(r, hn)?;
                    let n = g.add(xn, rhn)?;
                    let n = g.tanh(n);
                    let neg_z = g.scale(z, -1.0);
                    let one_minus_z = g.offset(neg_z, 1.0);
                    let a = g.mul(one_minus_z, n)?;
                    let b = g.mul(z, h)?;
                    h = g.add(a, b)?;
                }
            }
        }
        Ok(h)
    }
}

/// Bidirectional recurrent encoder returning `[h_fwd_final; h_bwd_final]`.
#[derive(Debug, Clone)]
pub struct BiRnn {
    pub forward_cell: RnnCell,
    pub backward_cell: RnnCell,
}

impl BiRnn {
    pub fn new(b: &mut LayoutBuilder, name: &str, kind: CellKind, input: usize, hidden: usize) -> Self {
        b.push_scope(name);
        let forward_cell = RnnCell::new(b, "fwd", kind, input, hidden);
        let backward_cell = RnnCell::new(b, "bwd", kind, input, hidden);
        b.pop_scope();
        Self { forward_cell, backward_cell }
    }

    /// Both directions read the same tensors.
    pub fn new_shared(b: &mut LayoutBuilder, name: &str, kind: CellKind, input: usize, hidden: usize) -> Self {
        b.push_scope(name);
        let cell = RnnCell::new(b, "shared", kind, input, hidden);
        b.pop_scope();
        Self {
            forward_cell: cell.clone(),
            backward_cell: cell,
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward_cell.hidden
    }

    pub fn input(&self) -> usize {
        self.forward_cell.input
    }

    fn check(&self, len: usize) -> Result<usize> {
        let d = self.input();
        if len == 0 {
            return Err(NnError::Config("bidirectional encoder needs at least one timestep".into()));
        }
        if !len.is_multiple_of(d) {
            return Err(shape_err("birnn", format!("T×{d} sequence"), format!("{len} values")));
        }
        Ok(len / d)
    }

    /// Plain evaluation over `seq: T×input`; output has length `2·hidden`.
    pub fn forward_plain(&self, params: &ParamVector, seq: &[f64]) -> Result<Vec<f64>> {
        let steps = self.check(seq.len())?;
        let mut out = ops::run_direction(&self.forward_cell.borrow(params), seq, steps, false);
        out.extend(ops::run_direction(&self.backward_cell.borrow(params), seq, steps, true));
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph<'_>, seq: Var) -> Result<Var> {
        let steps = self.check(g.size(seq))?;
        let hf = self.forward_cell.run(g, seq, steps, false)?;
        let hb = self.backward_cell.run(g, seq, steps, true)?;
        Ok(g.concat(&[hf, hb]))
    }
}

/// Multi-head attention with learned Q/K/V/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub dim: usize,
    pub heads: usize,
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub out: Dense,
}

impl MultiHeadAttention {
    pub fn new(b: &mut LayoutBuilder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(NnError::Config(format!("model dim {dim} not divisible by {heads} heads")));
        }
        b.push_scope(name);
        let q = Dense::new(b, "q", dim, dim, Activation::Identity);
        let k = Dense::new(b, "k", dim, dim, Activation::Identity);
        let v = Dense::new(b, "v", dim, dim, Activation::Identity);
        let out = Dense::new(b, "out", dim, dim, Activation::Identity);
        b.pop_scope();
        Ok(Self { dim, heads, q, k, v, out })
    }

    fn rows(&self, len: usize) -> Result<usize> {
        if len == 0 || !len.is_multiple_of(self.dim) {
            return Err(shape_err("attention", format!("rows of {}", self.dim), format!("{len} values")));
        }
        Ok(len / self.dim)
    }

    /// `queries: n×d`, `keys_values: m×d` → `n×d`.
    pub fn forward(&self, g: &mut Graph<'_>, queries: Var, keys_values: Var) -> Result<Var> {
        let n = self.rows(g.size(queries))?;
        let m = self.rows(g.size(keys_values))?;
        self.forward_qkv(g, queries, keys_values, keys_values, n, m)
    }

    pub fn forward_qkv(&self, g: &mut Graph<'_>, queries: Var, keys: Var, values: Var, n: usize, m: usize) -> Result<Var> {
        let (d, dh) = (self.dim, self.dim / self.heads);
        let q = self.q.forward(g, queries, n)?;
        let k = self.k.forward(g, keys, m)?;
        let v = self.v.forward(g, values, m)?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.col_slice(q, n, d, h * dh, dh)?;
            let kh = g.col_slice(k, m, d, h * dh, dh)?;
            let vh = g.col_slice(v, m, d, h * dh, dh)?;
            let kt = g.transpose(kh, m, dh)?;
            let s = g.matmul(qh, kt, n, dh, m)?;
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = g.softmax_rows(s, n, m)?;
            heads.push(g.matmul(a, vh, n, m, dh)?);
        }
        let cat = g.concat_cols(&heads, n)?;
        self.out.forward(g, cat, n)
    }

    /// Plain evaluation; also returns the `heads×n×m` softmax weights.
    pub fn forward_plain(&self, params: &ParamVector, queries: &[f64], keys: &[f64], values: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.rows(queries.len())?;
        let m = self.rows(keys.len())?;
        if values.len() != keys.len() {
            return Err(shape_err("attention", format!("{m}x{} values", self.dim), format!("{}", values.len())));
        }
        let q = self.q.forward_plain(params, queries)?;
        let k = self.k.forward_plain(params, keys)?;
        let v = self.v.forward_plain(params, values)?;
        let (cat, weights) = ops::scaled_dot_attention(&q, &k, &v, n, m, self.dim, self.heads);
        let out = self.out.forward_plain(params, &cat)?;
        Ok((out, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::gradient_of;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomize(pv: &mut ParamVector, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in pv.values_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_graph_matches_plain() {
        let mut b = LayoutBuilder::new();
        let mha = MultiHeadAttention::new(&mut b, "mha", 8, 2).unwrap();
        let mut pv = ParamVector::zeros(b.finish());
        randomize(&mut pv, 5, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kv: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (plain, weights) = mha.forward_plain(&pv, &q, &kv, &kv).unwrap();
        for row in weights.chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mut g = Graph::new(&pv);
        let qv = g.input(q.clone());
        let kvv = g.input(kv.clone());
        let y = mha.forward(&mut g, qv, kvv).unwrap();
        for (a, b) in g.value(y).iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut b = LayoutBuilder::new();
        assert!(MultiHeadAttention::new(&mut b, "mha", 10, 4).is_err());
    }

    #[test]
    fn single_key_attention_ignores_query() {
        let mut b = LayoutBuilder::new();
        let mha = MultiHeadAttention::new(&mut b, "mha", 4, 2).unwrap();
        let mut pv = ParamVector::zeros(b.finish());
        randomize(&mut pv, 1, 0.7);
        let kv = [0.2, -0.3, 0.9, 0.1];
        let (a, _) = mha.forward_plain(&pv, &[1.0, 2.0, 3.0, 4.0], &kv, &kv).unwrap();
        let (b2, _) = mha.forward_plain(&pv, &[-5.0, 0.0, 0.5, 9.0], &kv, &kv).unwrap();
        let v = mha.v.forward_plain(&pv, &kv).unwrap();
        let expected = mha.out.forward_plain(&pv, &v).unwrap();
        for i in 0..4 {
            assert!((a[i] - b2[i]).abs() < 1e-15);
            assert!((a[i] - expected[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn birnn_zero_params_zero_output() {
        for kind in [CellKind::Lstm, CellKind::Gru] {
            let mut b = LayoutBuilder::new();
            let rnn = BiRnn::new(&mut b, "rnn", kind, 3, 5);
            let pv = ParamVector::zeros(b.finish());
            let out = rnn.forward_plain(&pv, &[0.4, -1.0, 2.0, 0.3, 0.3, 0.1]).unwrap();
            assert_eq!(out.len(), 10);
            // GRU with zero weights: n = 0, z = 0.5 → h stays 0. LSTM: g = 0 → c = 0.
            assert!(out.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn birnn_empty_sequence_rejected() {
        let mut b = LayoutBuilder::new();
        let rnn = BiRnn::new(&mut b, "rnn", CellKind::Lstm, 2, 3);
        let pv = ParamVector::zeros(b.finish());
        assert!(rnn.forward_plain(&pv, &[]).is_err());
    }

    #[test]
    fn birnn_reverse_swaps_halves_with_shared_cells() {
        for kind in [CellKind::Lstm, CellKind::Gru] {
            let mut b = LayoutBuilder::new();
            let rnn = BiRnn::new_shared(&mut b, "rnn", kind, 2, 4);
            let mut pv = ParamVector::zeros(b.finish());
            randomize(&mut pv, 17, 0.6);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let seq: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let rev: Vec<f64> = seq.chunks(2).rev().flatten().copied().collect();
            let a = rnn.forward_plain(&pv, &seq).unwrap();
            let b2 = rnn.forward_plain(&pv, &rev).unwrap();
            assert_eq!(&a[..4], &b2[4..]);
            assert_eq!(&a[4..], &b2[..4]);
        }
    }

    #[test]
    fn birnn_single_step_halves_match_with_shared_cells() {
        let mut b = LayoutBuilder::new();
        let rnn = BiRnn::new_shared(&mut b, "rnn", CellKind::Lstm, 3, 4);
        let mut pv = ParamVector::zeros(b.finish());
        randomize(&mut pv, 2, 0.5);
        let out = rnn.forward_plain(&pv, &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(&out[..4], &out[4..]);
    }

    #[test]
    fn birnn_graph_matches_plain_bitwise() {
        for kind in [CellKind::Lstm, CellKind::Gru] {
            let mut b = LayoutBuilder::new();
            let rnn = BiRnn::new(&mut b, "rnn", kind, 3, 5);
            let mut pv = ParamVector::zeros(b.finish());
            randomize(&mut pv, 23, 0.5);
            let seq: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
            let plain = rnn.forward_plain(&pv, &seq).unwrap();
            let mut g = Graph::new(&pv);
            let s = g.input(seq.clone());
            let y = rnn.forward(&mut g, s).unwrap();
            assert_eq!(g.value(y), plain.as_slice());
        }
    }

    #[test]
    fn lstm_gradient_matches_finite_differences() {
        let mut b = LayoutBuilder::new();
        let rnn = BiRnn::new(&mut b, "rnn", CellKind::Lstm, 2, 3);
        let mut pv = ParamVector::zeros(b.finish());
        randomize(&mut pv, 31, 0.8);
        let seq = vec![0.5, -0.2, 0.9, 0.4, -0.7, 0.1];
        let loss = |p: &ParamVector| -> f64 { rnn.forward_plain(p, &seq).unwrap().iter().map(|v| v * v).sum() };
        let (_, grad) = gradient_of(&pv, |g| {
            let s = g.input(seq.clone());
            let y = rnn.forward(g, s)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        for i in (0..pv.len()).step_by(7) {
            let h = 1e-6;
            let mut plus = pv.clone();
            plus.values_mut()[i] += h;
            let mut minus = pv.clone();
            minus.values_mut()[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((fd - grad.values()[i]).abs() < 1e-7, "param {i}: fd {fd} vs {}", grad.values()[i]);
        }
    }
}
