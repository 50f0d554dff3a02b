// SPDX-License-Identifier: Apache-2.0

//! High-level command policy: encoders followed by a two-layer head.

use std::ops::Range;
use std::path::Path;

use cart_nn::checkpoint::Checkpoint;
use cart_nn::layers::Dense;
use cart_nn::ops::Activation;
use cart_nn::{Graph, Layout, LayoutBuilder, ParamVector, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::{ContextEncoder, EncoderConfig, Modality, PreparedInput, ProprioNormalizer};
use crate::error::{CoreError, Result};
use crate::types::{BaseCommand, CommandBounds, ContextState, Observation};

/// Scope prefix of the head tensors inside the flat parameter vector.
pub const HEAD_SCOPE: &str = "head.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub encoder: EncoderConfig,
    pub head_hidden: usize,
    pub bounds: CommandBounds,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head_hidden: 128,
            bounds: CommandBounds::default(),
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.head_hidden == 0 {
            return Err(CoreError::Config("head_hidden must be positive".into()));
        }
        let b = &self.bounds;
        if !(b.v_max > 0.0) || !(b.h_min < b.h_max) || !(b.h_min > 0.0) {
            return Err(CoreError::Config("command bounds need v_max > 0 and 0 < h_min < h_max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Policy {
    cfg: PolicyConfig,
    encoder: ContextEncoder,
    hidden: Dense,
    output: Dense,
    layout: Layout,
}

impl Policy {
    pub fn new(cfg: &PolicyConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = LayoutBuilder::new();
        let encoder = ContextEncoder::register(&mut b, &cfg.encoder)?;
        let s_dim = 2 * cfg.encoder.latent;
        b.push_scope("head");
        let hidden = Dense::new(&mut b, "l0", s_dim, cfg.head_hidden, Activation::Tanh);
        let output = Dense::new(&mut b, "l1", cfg.head_hidden, 4, Activation::Identity);
        b.pop_scope();
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            hidden,
            output,
            layout: b.finish(),
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &ContextEncoder {
        &self.encoder
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn s_hat_dim(&self) -> usize {
        2 * self.cfg.encoder.latent
    }

    /// Flat index range of the command head, the region segment libraries draw from.
    pub fn head_range(&self) -> Range<usize> {
        self.layout.prefix_range(HEAD_SCOPE).expect("head registered")
    }

    /// Glorot init. Proprio-only policies start with zero c_t columns in the
    /// first head layer; those columns only ever see zeros, so they stay zero.
    pub fn init_params(&self, seed: u64, modality: Modality) -> ParamVector {
        let mut p = ParamVector::init_glorot(self.layout.clone(), seed);
        if modality == Modality::ProprioOnly {
            let d = self.cfg.encoder.latent;
            let w = p.tensor_mut(self.hidden.weight);
            for row in w.chunks_mut(2 * d) {
                row[..d].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        p
    }

    pub fn check_params(&self, p: &ParamVector) -> Result<()> {
        let diff = self.layout.diff(p.layout());
        if diff.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Config(format!("parameter layout mismatch:\n  {}", diff.join("\n  "))))
        }
    }

    fn squash(&self, o: [f64; 4]) -> BaseCommand {
        let b = &self.cfg.bounds;
        let (center, half) = ((b.h_min + b.h_max) / 2.0, (b.h_max - b.h_min) / 2.0);
        BaseCommand::new(
            b.v_max * o[0].tanh(),
            b.v_max * o[1].tanh(),
            b.v_max * o[2].tanh(),
            center + half * o[3].tanh(),
        )
    }

    pub fn head_plain(&self, p: &ParamVector, s_hat: &[f64]) -> Result<BaseCommand> {
        if s_hat.len() != self.s_hat_dim() {
            return Err(CoreError::Shape(format!(
                "context must have length {}, got {}",
                self.s_hat_dim(),
                s_hat.len()
            )));
        }
        let h = self.hidden.forward_plain(p, s_hat)?;
        let o = self.output.forward_plain(p, &h)?;
        Ok(self.squash([o[0], o[1], o[2], o[3]]))
    }

    /// Squashed `[v_x, v_y, v_z, h]` on the tape.
    pub fn head_graph(&self, g: &mut Graph<'_>, s_hat: Var) -> Result<Var> {
        let b = self.cfg.bounds;
        let h = self.hidden.forward(g, s_hat, 1)?;
        let o = self.output.forward(g, h, 1)?;
        let t = g.tanh(o);
        let v = g.slice(t, 0, 3)?;
        let v = g.scale(v, b.v_max);
        let hh = g.slice(t, 3, 1)?;
        let hh = g.scale(hh, (b.h_max - b.h_min) / 2.0);
        let hh = g.offset(hh, (b.h_min + b.h_max) / 2.0);
        let a = g.concat(&[v, hh]);
        g.label(a, "command");
        Ok(a)
    }

    pub fn prepare(&self, obs: &Observation, norm: &ProprioNormalizer) -> Result<PreparedInput> {
        self.encoder.prepare(obs, norm)
    }

    pub fn context(&self, p: &ParamVector, input: &PreparedInput, modality: Modality) -> Result<ContextState> {
        self.encoder.context(p, input, modality)
    }

    pub fn act(&self, p: &ParamVector, input: &PreparedInput, modality: Modality) -> Result<BaseCommand> {
        let ctx = self.context(p, input, modality)?;
        self.head_plain(p, &ctx.s_hat)
    }
}

/// A policy together with everything needed to run it on raw observations.
#[derive(Debug, Clone)]
pub struct TrainedPolicy {
    pub policy: Policy,
    pub params: ParamVector,
    pub normalizer: ProprioNormalizer,
    pub modality: Modality,
}

#[derive(Serialize, Deserialize)]
struct PolicyMeta {
    policy_config: PolicyConfig,
    modality: Modality,
    normalizer: ProprioNormalizer,
    #[serde(default)]
    extra: serde_json::Value,
}

impl TrainedPolicy {
    pub fn context(&self, obs: &Observation) -> Result<ContextState> {
        let input = self.policy.prepare(obs, &self.normalizer)?;
        self.policy.context(&self.params, &input, self.modality)
    }

    pub fn act(&self, obs: &Observation) -> Result<BaseCommand> {
        let ctx = self.context(obs)?;
        self.policy.head_plain(&self.params, &ctx.s_hat)
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let meta = PolicyMeta {
            policy_config: self.policy.config().clone(),
            modality: self.modality,
            normalizer: self.normalizer.clone(),
            extra,
        };
        let metadata = serde_json::to_value(meta).map_err(|e| CoreError::Runtime(e.to_string()))?;
        Ok(Checkpoint::new(self.params.clone(), metadata))
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let meta: PolicyMeta =
            serde_json::from_value(ck.metadata).map_err(|e| CoreError::Config(format!("checkpoint metadata is not a policy description: {e}")))?;
        let policy = Policy::new(&meta.policy_config)?;
        policy.check_params(&ck.params)?;
        Ok(Self {
            policy,
            params: ck.params,
            normalizer: meta.normalizer,
            modality: meta.modality,
        })
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra)?.save(path).map_err(CoreError::from)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path).map_err(|e| CoreError::data(path, e.to_string()))?;
        Self::from_checkpoint(ck)
    }
}
