#![allow(dead_code)]

pub mod reference;

use p2i_core::dataset::TrajectoryDataset;
use p2i_core::networks::NetworkConfig;
use p2i_core::oracle::{generate_dataset, make_trajectory, Intrinsics, OracleScene, TrajectoryKind, TrajectorySpec};

/// Small rendered circle dataset; the directory must outlive the call.
pub fn circle_dataset(dir: &std::path::Path, resolution: u32, frames: usize, radii: &[f64]) -> TrajectoryDataset {
    let scene = OracleScene::new([2.0, 1.5, 2.0], 1.0, 7).unwrap();
    let trajectories: Vec<_> = radii
        .iter()
        .map(|r| {
            let spec = TrajectorySpec {
                kind: TrajectoryKind::Circle {
                    center: [0.0; 3],
                    radius: *r,
                    start_deg: 0.0,
                },
                target: [0.0; 3],
            };
            make_trajectory(&spec, frames, &scene).unwrap()
        })
        .collect();
    generate_dataset(&scene, &trajectories, &Intrinsics::square(resolution, 60.0), dir).unwrap()
}

/// Tiny network for resolution-8 data.
pub fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        resolution: 8,
        g_channels: vec![8, 6],
        d_channels: vec![16],
        latent_dim: 16,
        head_hidden: 8,
        enet_blocks: 1,
        enet_channels: 4,
        ..NetworkConfig::default()
    }
}
