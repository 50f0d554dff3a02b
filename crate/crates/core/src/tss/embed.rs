// SPDX-License-Identifier: Apache-2.0

//! Fixed random bidirectional-GRU embedder for parameter segments.

use cart_nn::layers::{BiRnn, Dense};
use cart_nn::ops::{Activation, CellKind};
use cart_nn::{LayoutBuilder, ParamVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const EMBED_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub hidden: usize,
    /// Segment values are multiplied by this before entering the GRU.
    pub input_scale: f64,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            input_scale: 10.0,
            seed: 0x5e9_e3b,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SegmentEmbedder {
    cfg: EmbedderConfig,
    rnn: BiRnn,
    proj: Dense,
    params: ParamVector,
}

impl SegmentEmbedder {
    pub fn new(cfg: EmbedderConfig) -> Result<Self> {
        if cfg.hidden == 0 || !cfg.input_scale.is_finite() {
            return Err(CoreError::Config("embedder hidden size must be positive and input_scale finite".into()));
        }
        let mut b = LayoutBuilder::new();
        let rnn = BiRnn::new(&mut b, "embed.gru", CellKind::Gru, 1, cfg.hidden);
        let proj = Dense::new(&mut b, "embed.proj", 2 * cfg.hidden, EMBED_DIM, Activation::Identity);
        let mut params = ParamVector::init_glorot(b.finish(), cfg.seed);
        // Non-zero biases so that constant segments still map to distinct directions.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let biases: Vec<_> = params
            .layout()
            .entries()
            .iter()
            .filter(|e| e.shape.len() == 1)
            .map(|e| e.range())
            .collect();
        for r in biases {
            for v in &mut params.values_mut()[r] {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        Ok(Self { cfg, rnn, proj, params })
    }

    pub fn config(&self) -> EmbedderConfig {
        self.cfg
    }

    /// Unit-norm 128-vector. A zero projection maps to the first basis vector.
    pub fn embed(&self, values: &[f64]) -> Result<Vec<f64>> {
        let seq: Vec<f64> = values.iter().map(|v| v * self.cfg.input_scale).collect();
        let h = self.rnn.forward_plain(&self.params, &seq)?;
        let mut z = self.proj.forward_plain(&self.params, &h)?;
        let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 && n.is_finite() {
            z.iter_mut().for_each(|v| *v /= n);
        } else {
            z = vec![0.0; EMBED_DIM];
            z[0] = 1.0;
        }
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_norm_and_length() {
        let e = SegmentEmbedder::new(EmbedderConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for len in [1, 5, 13, 20] {
            let vals: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let z = e.embed(&vals).unwrap();
            assert_eq!(z.len(), EMBED_DIM);
            let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_segments_identical_embeddings() {
        let e = SegmentEmbedder::new(EmbedderConfig::default()).unwrap();
        let v = [0.1, -0.2, 0.3, 0.0, 0.05];
        assert_eq!(e.embed(&v).unwrap(), e.embed(&v).unwrap());
        assert_ne!(e.embed(&v).unwrap(), e.embed(&[0.0; 5]).unwrap());
    }

    #[test]
    fn empty_segment_rejected() {
        let e = SegmentEmbedder::new(EmbedderConfig::default()).unwrap();
        assert!(e.embed(&[]).is_err());
    }
}
