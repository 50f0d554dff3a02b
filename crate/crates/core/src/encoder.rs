// SPDX-License-Identifier: Apache-2.0

//! Visual, mesh and proprioceptive encoders plus attention fusion.

use cart_nn::layers::{BiRnn, Conv2d, Dense, MultiHeadAttention};
use cart_nn::ops::{self, Activation, CellKind};
use cart_nn::{Graph, LayoutBuilder, ParamVector, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::types::{ContextState, Observation, MESH_DIM, PROPRIO_DIM, RGBD_CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Width of z_v, z_m, z_p and c_t.
    pub latent: usize,
    pub conv_channels: [usize; 3],
    pub conv_kernels: [usize; 3],
    pub conv_strides: [usize; 3],
    pub pool: [usize; 2],
    pub mesh_hidden: usize,
    pub mesh_activation: Activation,
    /// Per direction; `2 * proprio_hidden` must equal `latent`.
    pub proprio_hidden: usize,
    pub attention_heads: usize,
    pub depth_max: f64,
    pub zero_mean_visual: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            latent: 256,
            conv_channels: [16, 32, 32],
            conv_kernels: [5, 3, 3],
            conv_strides: [2, 2, 2],
            pool: [4, 4],
            mesh_hidden: 256,
            mesh_activation: Activation::Relu,
            proprio_hidden: 128,
            attention_heads: 4,
            depth_max: 10.0,
            zero_mean_visual: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.latent == 0 || self.mesh_hidden == 0 || self.proprio_hidden == 0 {
            return bad("encoder widths must be positive".into());
        }
        if 2 * self.proprio_hidden != self.latent {
            return bad(format!(
                "proprio_hidden {} gives a {}-wide z_p but latent is {}",
                self.proprio_hidden,
                2 * self.proprio_hidden,
                self.latent
            ));
        }
        if self.attention_heads == 0 || !self.latent.is_multiple_of(self.attention_heads) {
            return bad(format!("latent {} not divisible by {} heads", self.latent, self.attention_heads));
        }
        if self.conv_channels.contains(&0) || self.conv_kernels.contains(&0) || self.conv_strides.contains(&0) {
            return bad("conv channels, kernels and strides must be positive".into());
        }
        if self.pool.contains(&0) {
            return bad("pool size must be positive".into());
        }
        if !(self.depth_max > 0.0) {
            return bad("depth_max must be positive".into());
        }
        Ok(())
    }
}

/// Which exteroceptive path feeds c_t.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Full,
    /// c_t is held at zero; only z_p informs the head.
    ProprioOnly,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Full => "full",
            Modality::ProprioOnly => "proprio-only",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Modality::Full),
            "proprio-only" | "proprio_only" => Ok(Modality::ProprioOnly),
            other => Err(CoreError::Config(format!("unknown modality `{other}` (full | proprio-only)"))),
        }
    }
}

/// Per-channel standardisation of proprio records, frozen after fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProprioNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for ProprioNormalizer {
    fn default() -> Self {
        Self {
            mean: vec![0.0; PROPRIO_DIM],
            std: vec![1.0; PROPRIO_DIM],
        }
    }
}

impl ProprioNormalizer {
    pub fn fit<'a>(records: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; PROPRIO_DIM];
        let mut sq = vec![0.0; PROPRIO_DIM];
        for r in records {
            n += 1;
            for (i, &v) in r.iter().enumerate().take(PROPRIO_DIM) {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        if n == 0 {
            return Self::default();
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / nf - m * m).max(0.0);
                if var < 1e-12 {
                    1.0
                } else {
                    var.sqrt()
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, matrix: &[f64]) -> Vec<f64> {
        matrix
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = i % PROPRIO_DIM;
                (v - self.mean[c]) / self.std[c]
            })
            .collect()
    }
}

/// Observation converted to network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInput {
    pub visual: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub mesh: Vec<f64>,
    /// Standardised `T×40`.
    pub proprio: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ContextEncoder {
    cfg: EncoderConfig,
    convs: Vec<Conv2d>,
    visual_proj: Dense,
    mesh: [Dense; 2],
    proprio: BiRnn,
    attention: MultiHeadAttention,
}

impl ContextEncoder {
    /// Registers scopes `visual`, `mesh`, `proprio`, `attention` in that order.
    pub fn register(b: &mut LayoutBuilder, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        b.push_scope("visual");
        let mut convs = Vec::with_capacity(3);
        let mut c_in = RGBD_CHANNELS;
        for i in 0..3 {
            convs.push(Conv2d::new(
                b,
                &format!("conv{i}"),
                c_in,
                cfg.conv_channels[i],
                cfg.conv_kernels[i],
                cfg.conv_strides[i],
            ));
            c_in = cfg.conv_channels[i];
        }
        let flat = c_in * cfg.pool[0] * cfg.pool[1];
        let visual_proj = Dense::new(b, "proj", flat, cfg.latent, Activation::Identity);
        b.pop_scope();

        b.push_scope("mesh");
        let mesh = [
            Dense::new(b, "l0", MESH_DIM, cfg.mesh_hidden, cfg.mesh_activation),
            Dense::new(b, "l1", cfg.mesh_hidden, cfg.latent, cfg.mesh_activation),
        ];
        b.pop_scope();

        let proprio = BiRnn::new(b, "proprio", CellKind::Lstm, PROPRIO_DIM, cfg.proprio_hidden);
        let attention = MultiHeadAttention::new(b, "attention", cfg.latent, cfg.attention_heads)?;
        Ok(Self {
            cfg: cfg.clone(),
            convs,
            visual_proj,
            mesh,
            proprio,
            attention,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn latent(&self) -> usize {
        self.cfg.latent
    }

    /// Depth scaling and optional per-channel de-meaning.
    pub fn prepare_visual(&self, rgbd: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
        let plane = height * width;
        if rgbd.len() != RGBD_CHANNELS * plane || plane == 0 {
            return Err(CoreError::Shape(format!(
                "visual input must have 4 channels of {height}x{width}, got {} values",
                rgbd.len()
            )));
        }
        self.conv_chain_dims(height, width)?;
        let mut x = rgbd.to_vec();
        for v in &mut x[3 * plane..] {
            *v /= self.cfg.depth_max;
        }
        if self.cfg.zero_mean_visual {
            for ch in x.chunks_mut(plane) {
                let mean = ch.iter().sum::<f64>() / plane as f64;
                ch.iter_mut().for_each(|v| *v -= mean);
            }
        }
        Ok(x)
    }

    pub fn prepare(&self, obs: &Observation, norm: &ProprioNormalizer) -> Result<PreparedInput> {
        obs.validate()?;
        Ok(PreparedInput {
            visual: self.prepare_visual(&obs.rgbd, obs.height, obs.width)?,
            height: obs.height,
            width: obs.width,
            mesh: obs.mesh_features.clone(),
            proprio: norm.apply(&obs.proprio_matrix()),
        })
    }

    fn conv_chain_dims(&self, height: usize, width: usize) -> Result<Vec<(usize, usize)>> {
        let (mut h, mut w) = (height, width);
        let mut dims = vec![];
        for c in &self.convs {
            let g = c.geom(h, w);
            g.check().map_err(CoreError::from)?;
            h = g.out_h();
            w = g.out_w();
            dims.push((h, w));
        }
        Ok(dims)
    }

    /// `rgbd` must already be prepared.
    pub fn encode_visual(&self, p: &ParamVector, rgbd: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
        if rgbd.len() != RGBD_CHANNELS * height * width {
            return Err(CoreError::Shape(format!(
                "expected 4 channels, got {} values for {height}x{width}",
                rgbd.len()
            )));
        }
        let dims = self.conv_chain_dims(height, width)?;
        let mut x = rgbd.to_vec();
        let (mut h, mut w) = (height, width);
        for (c, &(oh, ow)) in self.convs.iter().zip(&dims) {
            let mut y = vec![0.0; c.out_channels * oh * ow];
            ops::conv2d_into(&x, p.tensor(c.weight), Some(p.tensor(c.bias)), c.geom(h, w), &mut y);
            y.iter_mut().for_each(|v| *v = v.max(0.0));
            x = y;
            h = oh;
            w = ow;
        }
        let ch = self.convs[2].out_channels;
        let [ph, pw] = self.cfg.pool;
        let mut pooled = vec![0.0; ch * ph * pw];
        ops::adaptive_avg_pool_into(&x, ch, h, w, ph, pw, &mut pooled);
        Ok(self.visual_proj.forward_plain(p, &pooled)?)
    }

    pub fn encode_mesh(&self, p: &ParamVector, mesh: &[f64]) -> Result<Vec<f64>> {
        if mesh.len() != MESH_DIM {
            return Err(CoreError::Shape(format!("mesh features must have length {MESH_DIM}, got {}", mesh.len())));
        }
        let h = self.mesh[0].forward_plain(p, mesh)?;
        Ok(self.mesh[1].forward_plain(p, &h)?)
    }

    /// `window` is a standardised `T×40` matrix.
    pub fn encode_proprio(&self, p: &ParamVector, window: &[f64]) -> Result<Vec<f64>> {
        if window.is_empty() {
            return Err(CoreError::Shape("proprio window is empty".into()));
        }
        Ok(self.proprio.forward_plain(p, window)?)
    }

    /// Self-attention over the stacked pair, then the mean of the two rows.
    pub fn fuse(&self, p: &ParamVector, z_v: &[f64], z_m: &[f64]) -> Result<Vec<f64>> {
        Ok(self.fuse_with_weights(p, z_v, z_m)?.0)
    }

    /// Also returns the `heads×2×2` attention weights.
    pub fn fuse_with_weights(&self, p: &ParamVector, z_v: &[f64], z_m: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.cfg.latent;
        if z_v.len() != d || z_m.len() != d {
            return Err(CoreError::Shape(format!("fusion inputs must both have length {d}")));
        }
        let stack = [z_v, z_m].concat();
        let (out, weights) = self.attention.forward_plain(p, &stack, &stack, &stack)?;
        let mut c = vec![0.0; d];
        for row in out.chunks(d) {
            c.iter_mut().zip(row).for_each(|(c, r)| *c += r);
        }
        c.iter_mut().for_each(|x| *x *= 0.5);
        Ok((c, weights))
    }

    pub fn context(&self, p: &ParamVector, input: &PreparedInput, modality: Modality) -> Result<ContextState> {
        let d = self.cfg.latent;
        let z_p = self.encode_proprio(p, &input.proprio)?;
        let (z_v, z_m, c_t) = match modality {
            Modality::Full => {
                let z_v = self.encode_visual(p, &input.visual, input.height, input.width)?;
                let z_m = self.encode_mesh(p, &input.mesh)?;
                let c_t = self.fuse(p, &z_v, &z_m)?;
                (z_v, z_m, c_t)
            }
            Modality::ProprioOnly => (vec![0.0; d], vec![0.0; d], vec![0.0; d]),
        };
        let s_hat = [c_t.as_slice(), z_p.as_slice()].concat();
        for (name, v) in [("z_v", &z_v), ("z_m", &z_m), ("z_p", &z_p), ("c_t", &c_t)] {
            if let Some(x) = v.iter().find(|x| !x.is_finite()) {
                return Err(CoreError::NonFinite {
                    term: name.into(),
                    value: *x,
                });
            }
        }
        Ok(ContextState { z_v, z_m, z_p, c_t, s_hat })
    }

    /// Ŝ on the tape.
    pub fn context_graph(&self, g: &mut Graph<'_>, input: &PreparedInput, modality: Modality) -> Result<Var> {
        let d = self.cfg.latent;
        let seq = g.input(input.proprio.clone());
        let z_p = self.proprio.forward(g, seq)?;
        g.label(z_p, "z_p");
        let c_t = match modality {
            Modality::Full => {
                let mut x = g.input(input.visual.clone());
                let (mut h, mut w) = (input.height, input.width);
                for c in &self.convs {
                    let (y, oh, ow) = c.forward(g, x, h, w)?;
                    x = g.relu(y);
                    h = oh;
                    w = ow;
                }
                let ch = self.convs[2].out_channels;
                let pooled = g.adaptive_avg_pool(x, ch, h, w, self.cfg.pool[0], self.cfg.pool[1])?;
                let z_v = self.visual_proj.forward(g, pooled, 1)?;
                g.label(z_v, "z_v");
                let m = g.input(input.mesh.clone());
                let hm = self.mesh[0].forward(g, m, 1)?;
                let z_m = self.mesh[1].forward(g, hm, 1)?;
                g.label(z_m, "z_m");
                let stack = g.concat(&[z_v, z_m]);
                let att = self.attention.forward(g, stack, stack)?;
                let c_t = g.mean_rows(att, 2, d)?;
                g.label(c_t, "c_t");
                c_t
            }
            Modality::ProprioOnly => g.input(vec![0.0; d]),
        };
        Ok(g.concat(&[c_t, z_p]))
    }
}
