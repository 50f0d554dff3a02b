// SPDX-License-Identifier: Apache-2.0

use cart_nn::layers::{BiRnn, Conv2d, Dense, MultiHeadAttention};
use cart_nn::ops::{Activation, CellKind};
use cart_nn::{gradient_of, Graph, LayoutBuilder, ParamVector, Result, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Directional derivative by central differences with a step relative to ‖θ‖.
fn fd_directional(at: &ParamVector, dir: &[f64], f: &dyn Fn(&ParamVector) -> f64) -> f64 {
    let scale = at.values().iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    let h = 1e-5 * scale;
    let mut plus = at.clone();
    let mut minus = at.clone();
    for ((p, m), d) in plus.values_mut().iter_mut().zip(minus.values_mut()).zip(dir) {
        *p += h * d;
        *m -= h * d;
    }
    (f(&plus) - f(&minus)) / (2.0 * h)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn unit_direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    d.into_iter().map(|v| v / norm).collect()
}

struct Mlp3 {
    layers: [Dense; 3],
}

impl Mlp3 {
    fn new(b: &mut LayoutBuilder) -> Self {
        Self {
            layers: [
                Dense::new(b, "l0", 6, 12, Activation::Tanh),
                Dense::new(b, "l1", 12, 12, Activation::Tanh),
                Dense::new(b, "l2", 12, 3, Activation::Identity),
            ],
        }
    }

    fn loss_graph(&self, g: &mut Graph<'_>, x: &[f64], target: &[f64]) -> Result<Var> {
        let mut h = g.input(x.to_vec());
        for l in &self.layers {
            h = l.forward(g, h, 1)?;
        }
        let t = g.input(target.to_vec());
        let d = g.sub(h, t)?;
        let sq = g.mul(d, d)?;
        Ok(g.sum(sq))
    }

    fn loss_plain(&self, p: &ParamVector, x: &[f64], target: &[f64]) -> f64 {
        let mut h = x.to_vec();
        for l in &self.layers {
            h = l.forward_plain(p, &h).unwrap();
        }
        h.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn mlp_gradient_matches_central_differences(seed in any::<u64>()) {
        let mut b = LayoutBuilder::new();
        let net = Mlp3::new(&mut b);
        let layout = b.finish();
        prop_assert!(layout.total_len() <= 500);
        let mut pv = ParamVector::init_glorot(layout, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for v in pv.values_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (loss, grad) = gradient_of(&pv, |g| net.loss_graph(g, &x, &t)).unwrap();
        prop_assert_eq!(loss, net.loss_plain(&pv, &x, &t));
        let dir = unit_direction(&mut rng, pv.len());
        let fd = fd_directional(&pv, &dir, &|p| net.loss_plain(p, &x, &t));
        let an = grad.dot(&dir);
        prop_assert!(rel_err(an, fd) <= 1e-4, "analytic {} vs fd {}", an, fd);
    }

    #[test]
    fn conv_attention_rnn_gradient_matches_central_differences(seed in any::<u64>()) {
        let mut b = LayoutBuilder::new();
        let conv = Conv2d::new(&mut b, "conv", 2, 2, 3, 1);
        let rnn = BiRnn::new(&mut b, "rnn", if seed % 2 == 0 { CellKind::Lstm } else { CellKind::Gru }, 2, 2);
        let mha = MultiHeadAttention::new(&mut b, "mha", 4, 2).unwrap();
        let layout = b.finish();
        prop_assert!(layout.total_len() <= 500);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pv = ParamVector::init_glorot(layout, seed);
        for v in pv.values_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
        let img: Vec<f64> = (0..2 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let seq: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let build = |g: &mut Graph<'_>| -> Result<Var> {
            let x = g.input(img.clone());
            let (y, oh, ow) = conv.forward(g, x, 4, 4)?;
            let y = g.relu(y);
            let pooled = g.adaptive_avg_pool(y, 2, oh, ow, 1, 2)?;
            let s = g.input(seq.clone());
            let r = rnn.forward(g, s)?;
            let stack = g.concat(&[pooled, r]);
            let a = mha.forward(g, stack, stack)?;
            let m = g.mean_rows(a, 2, 4)?;
            let sq = g.mul(m, m)?;
            Ok(g.sum(sq))
        };
        let f = |p: &ParamVector| -> f64 {
            let mut g = Graph::new(p);
            let l = build(&mut g).unwrap();
            g.scalar(l)
        };
        let (_, grad) = gradient_of(&pv, build).unwrap();
        let dir = unit_direction(&mut rng, pv.len());
        let fd = fd_directional(&pv, &dir, &f);
        let an = grad.dot(&dir);
        prop_assert!(rel_err(an, fd) <= 1e-4, "analytic {} vs fd {}", an, fd);
    }

    #[test]
    fn flatten_unflatten_round_trip_is_bitwise(seed in any::<u64>()) {
        let mut b = LayoutBuilder::new();
        Conv2d::new(&mut b, "c", 3, 4, 3, 2);
        BiRnn::new(&mut b, "r", CellKind::Gru, 5, 3);
        MultiHeadAttention::new(&mut b, "a", 8, 4).unwrap();
        Dense::new(&mut b, "d", 8, 2, Activation::Relu);
        let pv = ParamVector::init_glorot(b.finish(), seed);
        let back = ParamVector::flatten(&pv.unflatten()).unwrap();
        let bits = |p: &ParamVector| p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&pv), bits(&back));
        prop_assert_eq!(pv.layout(), back.layout());
    }

    #[test]
    fn attention_softmax_rows_sum_to_one(seed in any::<u64>(), n in 1usize..5, m in 1usize..6) {
        let mut b = LayoutBuilder::new();
        let mha = MultiHeadAttention::new(&mut b, "a", 8, 2).unwrap();
        let pv = ParamVector::init_glorot(b.finish(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..n * 8).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let kv: Vec<f64> = (0..m * 8).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (_, w) = mha.forward_plain(&pv, &q, &kv, &kv).unwrap();
        prop_assert_eq!(w.len(), 2 * n * m);
        for row in w.chunks(m) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let mut b = LayoutBuilder::new();
        let rnn = BiRnn::new(&mut b, "r", CellKind::Lstm, 3, 4);
        let pv = ParamVector::init_glorot(b.finish(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = rnn.forward_plain(&pv, &seq).unwrap();
        let c = rnn.forward_plain(&pv, &seq).unwrap();
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), c.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn identical_keys_give_uniform_weights() {
    let mut b = LayoutBuilder::new();
    let mha = MultiHeadAttention::new(&mut b, "a", 4, 2).unwrap();
    let pv = ParamVector::init_glorot(b.finish(), 7);
    let kv = [0.3, -0.2, 0.8, 0.1, 0.3, -0.2, 0.8, 0.1];
    let (_, w) = mha.forward_plain(&pv, &[1.0, 0.5, -0.5, 2.0], &kv, &kv).unwrap();
    for x in w {
        assert!((x - 0.5).abs() < 1e-15);
    }
}
