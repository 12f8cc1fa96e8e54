#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use p2i_core::checkpoint::save_checkpoint;
use p2i_core::networks::{ModelBundle, NetworkConfig, SceneMeta};
use p2i_core::pose::SceneBounds;

pub fn tiny_config(resolution: usize) -> NetworkConfig {
    let stages = resolution.trailing_zeros() as usize - 2;
    NetworkConfig {
        resolution,
        g_channels: std::iter::once(8).chain(std::iter::repeat_n(6, stages)).collect(),
        d_channels: std::iter::repeat_n(12, stages - 1).chain(std::iter::once(16)).collect(),
        latent_dim: 16,
        head_hidden: 8,
        enet_blocks: 1,
        enet_channels: 4,
        ..NetworkConfig::default()
    }
}

/// Untrained checkpoint; returns its id.
pub fn tiny_checkpoint(dir: &Path, resolution: usize) -> String {
    let scene = SceneMeta {
        bounds: SceneBounds::new([0.0; 3], [1.0, 0.5, 1.0]).unwrap(),
        depth_max_m: 3.5,
    };
    let b = ModelBundle::<f32>::new(tiny_config(resolution), scene, 4).unwrap();
    save_checkpoint(&b, dir).unwrap().checkpoint_id
}

pub fn p2i(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_p2i"))
        .args(args)
        .env_remove("P2I_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn stderr_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("JSON error line");
    serde_json::from_str(line).unwrap()
}
