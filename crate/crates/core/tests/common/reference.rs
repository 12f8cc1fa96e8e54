//! Independent reference computations and fixtures. Also compiled into the
//! acceptance suite of the command-line crate.
#![allow(dead_code)]

use std::collections::BTreeSet;

use image::{ImageBuffer, Rgb, RgbImage};
use p2i_core::dataset::{RGBDFrame, Sequence, TrajectoryDataset};
use p2i_core::networks::{ModelBundle, NetworkConfig, SceneMeta};
use p2i_core::oracle::Intrinsics;
use p2i_core::pose::{Pose7, SceneBounds};
use p2i_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Placeholder frames: only ids matter.
pub fn id_only_dataset(lengths: &[u32]) -> TrajectoryDataset {
    let sequences = lengths
        .iter()
        .enumerate()
        .map(|(id, len)| Sequence {
            id,
            frames: (1..=*len)
                .map(|frame_id| RGBDFrame {
                    rgb: RgbImage::new(1, 1),
                    depth: ImageBuffer::new(1, 1),
                    pose: Pose7::IDENTITY,
                    seq_id: id,
                    frame_id,
                })
                .collect(),
        })
        .collect();
    TrajectoryDataset {
        sequences,
        intrinsics: Intrinsics::square(1, 60.0),
        bounds: SceneBounds::new([0.0; 3], [1.0; 3]).unwrap(),
        depth_max: 1.0,
    }
}

/// Direct enumeration: frame k (1-based) is held out iff some m >= 1 and
/// 1 <= j <= N give k = 100m + j with 100m + N <= length.
pub fn missing_by_enumeration(length: u32, n: u32) -> BTreeSet<u32> {
    (1..=length)
        .filter(|k| (1..=length / 100).any(|m| (1..=n).any(|j| *k == 100 * m + j) && 100 * m + n <= length))
        .collect()
}

/// Textbook SSIM: explicit 2-D Gaussian window, centered second moments,
/// product form of the index, mean over fully contained windows.
pub fn reference_ssim(a: &RgbImage, b: &RgbImage) -> f64 {
    let gray = |img: &RgbImage| -> Vec<Vec<f64>> {
        (0..img.height())
            .map(|y| {
                (0..img.width())
                    .map(|x| {
                        let p = img.get_pixel(x, y);
                        (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0
                    })
                    .collect()
            })
            .collect()
    };
    let (x, y) = (gray(a), gray(b));
    let mut w = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2);
            *v = (-d2 / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, wd) = (x.len(), x[0].len());
    let mut acc = 0.0;
    let mut count = 0;
    for r in 0..=h - 11 {
        for c in 0..=wd - 11 {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    mx += w[i][j] / total * x[r + i][c + j];
                    my += w[i][j] / total * y[r + i][c + j];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = w[i][j] / total;
                    let dx = x[r + i][c + j] - mx;
                    let dy = y[r + i][c + j] - my;
                    vx += k * dx * dx;
                    vy += k * dy * dy;
                    cxy += k * dx * dy;
                }
            }
            acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

/// A random image and a noisy copy of it.
pub fn random_pair(rng: &mut ChaCha8Rng) -> (RgbImage, RgbImage) {
    let w = rng.random_range(11..28);
    let h = rng.random_range(11..28);
    let a = RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
    let amp: f64 = rng.random_range(0.0..120.0);
    let b = RgbImage::from_fn(w, h, |x, y| {
        let p = a.get_pixel(x, y);
        Rgb(std::array::from_fn(|c| {
            (p[c] as f64 + rng.random_range(-amp..=amp)).round().clamp(0.0, 255.0) as u8
        }))
    });
    (a, b)
}

/// Resolution 8, latent 16, batch 2: the gradient-check setting.
pub fn gradient_fixture() -> (ModelBundle<f64>, Tensor<f64>, Tensor<f64>) {
    let cfg = NetworkConfig {
        resolution: 8,
        g_channels: vec![8, 6],
        d_channels: vec![16],
        latent_dim: 16,
        head_hidden: 8,
        enet_blocks: 1,
        enet_channels: 4,
        ..NetworkConfig::default()
    };
    let scene = SceneMeta {
        bounds: SceneBounds::new([0.0; 3], [1.0; 3]).unwrap(),
        depth_max_m: 3.0,
    };
    let b = ModelBundle::<f64>::new(cfg, scene, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let y = Tensor::from_vec(&[2, 7], (0..14).map(|_| rng.random_range(-0.9..0.9)).collect());
    let real = Tensor::from_vec(&[2, 4, 8, 8], (0..512).map(|_| rng.random_range(-0.9..0.9)).collect());
    (b, y, real)
}

fn conv(cin: usize, cout: usize) -> usize {
    9 * cin * cout + cout
}

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

fn attention(c: usize) -> usize {
    let h = (c / 8).max(4);
    linear(c, h) + linear(h, c)
}

pub const COMPONENTS: [&str; 6] = ["g", "d_trunk", "m_d", "m_p", "m_l", "enet"];

/// Parameter counts per component derived from the layer shapes, in the
/// order of [`COMPONENTS`].
pub fn expected_param_counts(cfg: &NetworkConfig) -> [usize; 6] {
    let g = &cfg.g_channels;
    let mut gen = linear(7, g[0] * 16);
    for w in g.windows(2) {
        gen += conv(w[0], w[1]);
    }
    gen += conv(*g.last().unwrap(), cfg.in_channels);
    let mut d = 0;
    let mut cin = cfg.in_channels;
    for c in &cfg.d_channels {
        d += conv(cin, *c) + if cfg.use_attention { attention(*c) } else { 0 };
        cin = *c;
    }
    let (l, h) = (cfg.latent_dim, cfg.head_hidden);
    let e = cfg.enet_channels;
    let enet = conv(cfg.in_channels, e) + cfg.enet_blocks * 2 * conv(e, e) + conv(e, 3);
    [
        gen,
        d,
        linear(l, 1),
        if cfg.use_projection { linear(7, h) + linear(h, l) } else { 0 },
        if cfg.use_pose_regressor { linear(l, h) + linear(h, 7) } else { 0 },
        if cfg.use_enet { enet } else { 0 },
    ]
}

/// Small network for the ablation structure checks.
pub fn ablation_base() -> NetworkConfig {
    NetworkConfig {
        resolution: 16,
        g_channels: vec![32, 16, 8],
        d_channels: vec![16, 24],
        latent_dim: 24,
        head_hidden: 12,
        enet_blocks: 1,
        enet_channels: 4,
        ..NetworkConfig::default()
    }
}
