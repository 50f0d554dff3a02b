// SPDX-License-Identifier: Apache-2.0

use cart_core::dataset::{collect_dataset, read_dataset, samples_from, write_dataset, CollectConfig};
use cart_core::encoder::Modality;
use cart_core::objective::{ObjectiveConfig, TrainConfig};
use cart_core::pipeline::{compact_policy_config, train_on_samples};
use cart_core::policy::{Policy, PolicyConfig, TrainedPolicy};
use cart_core::sim::{RolloutConfig, TerrainKind};
use cart_core::types::{Observation, ProprioState, MESH_DIM};
use cart_core::CoreError;

fn observation(height: usize, width: usize) -> Observation {
    let plane = height * width;
    let mut rgbd = vec![0.0; 4 * plane];
    for (i, v) in rgbd.iter_mut().enumerate() {
        *v = if i >= 3 * plane {
            1.0 + (i % 97) as f64 * 0.05
        } else {
            (i % 251) as f64 / 250.0
        };
    }
    Observation {
        rgbd,
        height,
        width,
        mesh_features: (0..MESH_DIM).map(|i| (i as f64 * 0.1).cos() * 0.02).collect(),
        proprio_window: vec![ProprioState::default(); 5],
    }
}

#[test]
fn full_size_encoder_on_a_360_by_640_frame() {
    let cfg = PolicyConfig::default();
    let policy = Policy::new(&cfg).unwrap();
    let live = TrainedPolicy {
        params: policy.init_params(1, Modality::Full),
        normalizer: Default::default(),
        modality: Modality::Full,
        policy,
    };
    let latent = cfg.encoder.latent;
    let ctx = live.context(&observation(360, 640)).unwrap();
    assert_eq!(
        [ctx.z_v.len(), ctx.z_m.len(), ctx.z_p.len(), ctx.c_t.len(), ctx.s_hat.len()],
        [latent, latent, latent, latent, 2 * latent]
    );
    assert!(ctx.s_hat.iter().all(|v| v.is_finite()));
    assert_eq!(&ctx.s_hat[..latent], &ctx.c_t[..]);
    assert_eq!(&ctx.s_hat[latent..], &ctx.z_p[..]);
    let small = live.context(&observation(90, 160)).unwrap();
    assert_eq!(small.s_hat.len(), 2 * latent);
    let cmd = live.act(&observation(360, 640)).unwrap();
    assert!(cfg.bounds.contains(&cmd), "{cmd:?}");

    let mut bad = observation(360, 640);
    bad.rgbd.pop();
    assert!(matches!(live.context(&bad), Err(CoreError::Shape(_))));
}

#[test]
fn dataset_round_trip_and_smoke_training() {
    let collect = CollectConfig {
        terrains: vec![TerrainKind::Rough, TerrainKind::SlopeUp],
        difficulties: vec![0.5],
        control_steps: 20,
        seed: 11,
        ..Default::default()
    };
    let episodes = collect_dataset(&collect).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &episodes).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), episodes.len());
    for (a, b) in episodes.iter().zip(&back) {
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.commands, b.commands);
        assert_eq!(a.proprio, b.proprio);
    }

    let window = RolloutConfig::default().proprio_window;
    let samples = samples_from(&back, window);
    assert!(samples.len() >= 20);
    let tc = TrainConfig {
        epochs: 5,
        learning_rate: 0.02,
        seed: 2,
        ..Default::default()
    };
    let (policy, report) = train_on_samples(&compact_policy_config(), &samples, Modality::Full, &ObjectiveConfig::default(), &tc).unwrap();
    assert!(report.aborted.is_none());
    assert_eq!(report.epochs.len(), 5);
    let last = report.epochs.last().unwrap().mean_loss;
    assert!(last < report.initial_loss, "loss {} -> {last}", report.initial_loss);
    assert!(policy.params.values().iter().all(|v| v.is_finite()));
}
