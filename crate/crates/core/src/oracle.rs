//! Synthetic RGBD oracle: a pinhole camera inside an axis-aligned box room
//! with checkerboard walls.
//!
//! Rendering is a per-pixel ray cast against the six wall planes. It is
//! pure and bit-deterministic, so any pose can be rendered as ground truth.

use std::path::Path;

use image::{ImageBuffer, Luma, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, RGBDFrame, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::pose::{Pose7, Vec3};

/// Pinhole intrinsics. Pixel `(u, v)` has its center at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Square image with the principal point at the center pixel and the
    /// given horizontal field of view.
    pub fn square(resolution: u32, fov_deg: f64) -> Self {
        let f = 0.5 * resolution as f64 / (0.5 * fov_deg.to_radians()).tan();
        Intrinsics {
            fx: f,
            fy: f,
            cx: (resolution / 2) as f64,
            cy: (resolution / 2) as f64,
            width: resolution,
            height: resolution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("invalid intrinsics {self:?}")))
        }
    }
}

/// Checker texture of one wall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallTexture {
    pub base: [u8; 3],
    pub alt: [u8; 3],
    /// Checker cell size in meters.
    pub checker: f64,
}

/// Box room centered at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleScene {
    pub room_half_extent: Vec3,
    /// Walls in order `-x, +x, -y, +y, -z, +z`.
    pub walls: [WallTexture; 6],
    pub seed: u64,
}

const PALETTE: [[u8; 3]; 6] = [
    [200, 60, 50],
    [60, 170, 70],
    [50, 90, 200],
    [220, 200, 60],
    [170, 70, 190],
    [60, 190, 200],
];

impl OracleScene {
    /// Room with six distinct wall colors assigned by `seed`.
    pub fn new(room_half_extent: Vec3, checker: f64, seed: u64) -> Result<Self> {
        if room_half_extent.iter().any(|h| !(*h > 0.0)) || !(checker > 0.0) {
            return Err(Error::InvalidParams(format!(
                "room half extent {room_half_extent:?} and checker {checker} must be positive"
            )));
        }
        let mut colors = PALETTE;
        colors.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let walls = colors.map(|base| WallTexture {
            base,
            alt: base.map(|c| (c as u16 * 11 / 20) as u8),
            checker,
        });
        Ok(OracleScene {
            room_half_extent,
            walls,
            seed,
        })
    }

    /// Same texture on every wall (used for symmetry checks).
    pub fn uniform(room_half_extent: Vec3, texture: WallTexture) -> Self {
        OracleScene {
            room_half_extent,
            walls: [texture; 6],
            seed: 0,
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a].abs() < self.room_half_extent[a])
    }

    pub fn diagonal(&self) -> f64 {
        2.0 * crate::pose::norm3(self.room_half_extent)
    }

    /// Color and z-depth scale of the nearest wall hit along `dir` from `origin`.
    fn trace(&self, origin: &Vec3, dir: &Vec3) -> ([u8; 3], f64) {
        let mut best_t = f64::INFINITY;
        let mut best_wall = 0;
        for a in 0..3 {
            let d = dir[a];
            if d == 0.0 {
                continue;
            }
            let (plane, wall) = if d > 0.0 {
                (self.room_half_extent[a], 2 * a + 1)
            } else {
                (-self.room_half_extent[a], 2 * a)
            };
            let t = (plane - origin[a]) / d;
            if t > 0.0 && t < best_t {
                best_t = t;
                best_wall = wall;
            }
        }
        let axis = best_wall / 2;
        let p = [
            origin[0] + best_t * dir[0],
            origin[1] + best_t * dir[1],
            origin[2] + best_t * dir[2],
        ];
        let tex = &self.walls[best_wall];
        // Cells are centered on the wall axes so the pattern is symmetric
        // under sign flips of either in-plane coordinate.
        let parity: i64 = (0..3)
            .filter(|b| *b != axis)
            .map(|b| (p[b] / tex.checker).round() as i64)
            .sum();
        let color = if parity.rem_euclid(2) == 0 { tex.base } else { tex.alt };
        (color, best_t)
    }
}

/// Renders the view from `pose`. Depth is the z-depth along the camera axis
/// in millimeters.
pub fn render_view(scene: &OracleScene, pose: &Pose7, k: &Intrinsics) -> Result<RGBDFrame> {
    k.validate()?;
    if !scene.contains(&pose.t) {
        return Err(Error::InvalidPose(format!(
            "camera at {:?} is not strictly inside the room",
            pose.t
        )));
    }
    let (w, h) = (k.width, k.height);
    let r = pose.rotation_matrix();
    let mut rgb = RgbImage::new(w, h);
    let mut depth = ImageBuffer::<Luma<u16>, Vec<u16>>::new(w, h);
    for v in 0..h {
        let cy = (v as f64 - k.cy) / k.fy;
        for u in 0..w {
            let cx = (u as f64 - k.cx) / k.fx;
            // Camera ray with unit z, so the hit parameter is the z-depth.
            let dir = [
                r[0][0] * cx + r[0][1] * cy + r[0][2],
                r[1][0] * cx + r[1][1] * cy + r[1][2],
                r[2][0] * cx + r[2][1] * cy + r[2][2],
            ];
            let (color, z) = scene.trace(&pose.t, &dir);
            rgb.put_pixel(u, v, image::Rgb(color));
            depth.put_pixel(u, v, Luma([depth_to_mm(z)]));
        }
    }
    Ok(RGBDFrame {
        rgb,
        depth,
        pose: *pose,
        seq_id: 0,
        frame_id: 1,
    })
}

pub fn depth_to_mm(z_m: f64) -> u16 {
    (z_m * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16
}

/// Camera path shapes. Circles and arcs lie in a horizontal plane
/// (constant `y`) around `center`; angles are measured from `+x` toward `+z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TrajectoryKind {
    Circle { center: Vec3, radius: f64, start_deg: f64 },
    Arc { center: Vec3, radius: f64, start_deg: f64, end_deg: f64 },
    Line { start: Vec3, end: Vec3 },
}

/// A trajectory plus the point every camera looks at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    #[serde(flatten)]
    pub kind: TrajectoryKind,
    pub target: Vec3,
}

pub const WORLD_UP: Vec3 = [0.0, 1.0, 0.0];

/// `n` look-at poses evenly spaced along the trajectory.
pub fn make_trajectory(spec: &TrajectorySpec, n: usize, scene: &OracleScene) -> Result<Vec<Pose7>> {
    if n < 2 {
        return Err(Error::InvalidParams(format!("trajectory needs n >= 2, got {n}")));
    }
    let ring = |center: &Vec3, radius: f64, deg: f64| {
        let a = deg.to_radians();
        [center[0] + radius * a.cos(), center[1], center[2] + radius * a.sin()]
    };
    let positions: Vec<Vec3> = match &spec.kind {
        TrajectoryKind::Circle {
            center,
            radius,
            start_deg,
        } => (0..n)
            .map(|i| ring(center, *radius, start_deg + 360.0 * i as f64 / n as f64))
            .collect(),
        TrajectoryKind::Arc {
            center,
            radius,
            start_deg,
            end_deg,
        } => (0..n)
            .map(|i| {
                let s = i as f64 / (n - 1) as f64;
                ring(center, *radius, start_deg + (end_deg - start_deg) * s)
            })
            .collect(),
        TrajectoryKind::Line { start, end } => (0..n)
            .map(|i| {
                if i == 0 {
                    return *start;
                }
                if i == n - 1 {
                    return *end;
                }
                let s = i as f64 / (n - 1) as f64;
                [
                    start[0] + (end[0] - start[0]) * s,
                    start[1] + (end[1] - start[1]) * s,
                    start[2] + (end[2] - start[2]) * s,
                ]
            })
            .collect(),
    };
    positions
        .into_iter()
        .map(|p| {
            if !scene.contains(&p) {
                return Err(Error::InvalidParams(format!("trajectory point {p:?} leaves the room")));
            }
            Pose7::look_at(p, spec.target, WORLD_UP).map_err(|e| Error::InvalidParams(e.to_string()))
        })
        .collect()
}

/// Renders every trajectory, writes the dataset directory and loads it back.
pub fn generate_dataset(
    scene: &OracleScene,
    trajectories: &[Vec<Pose7>],
    k: &Intrinsics,
    out_root: &Path,
) -> Result<TrajectoryDataset> {
    let mut sequences = Vec::with_capacity(trajectories.len());
    for (seq_id, poses) in trajectories.iter().enumerate() {
        let mut frames = Vec::with_capacity(poses.len());
        for (i, pose) in poses.iter().enumerate() {
            let mut f = render_view(scene, pose, k)?;
            f.seq_id = seq_id;
            f.frame_id = i as u32 + 1;
            frames.push(f);
        }
        sequences.push(dataset::Sequence { id: seq_id, frames });
    }
    let all_poses = sequences.iter().flat_map(|s| s.frames.iter().map(|f| &f.pose.t));
    let bounds = crate::pose::SceneBounds::from_translations(all_poses)?;
    let depth_max = dataset::depth_percentile_m(&sequences, dataset::DEPTH_MAX_PERCENTILE)
        .ok_or_else(|| Error::InvalidParams("no valid depth rendered".into()))?;
    let ds = TrajectoryDataset {
        sequences,
        intrinsics: *k,
        bounds,
        depth_max,
    };
    dataset::write_dataset(&ds, out_root)?;
    dataset::load_dataset(out_root, dataset::DatasetFormat::Cp2v2)
}

/// Trajectory families of the standard scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryShape {
    Circle,
    Arc,
    Line,
}

impl std::str::FromStr for TrajectoryShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circle" => Ok(TrajectoryShape::Circle),
            "arc" => Ok(TrajectoryShape::Arc),
            "line" => Ok(TrajectoryShape::Line),
            other => Err(Error::InvalidParams(format!("unknown trajectory {other:?}"))),
        }
    }
}

pub const STANDARD_ROOM: Vec3 = [2.0, 1.5, 2.0];
pub const STANDARD_CHECKER_M: f64 = 1.0;
pub const STANDARD_FOV_DEG: f64 = 60.0;
pub const STANDARD_RADIUS_M: f64 = 1.0;
/// Relative radius (or offset) increase between consecutive sequences.
pub const SEQUENCE_SPACING: f64 = 0.1;

pub fn standard_scene(seed: u64) -> Result<OracleScene> {
    OracleScene::new(STANDARD_ROOM, STANDARD_CHECKER_M, seed)
}

/// Sequence `index` of a family of parallel trajectories around the room
/// center. Each sequence lies 10% farther out than the previous one.
pub fn standard_trajectory(shape: TrajectoryShape, index: usize) -> TrajectorySpec {
    let r = STANDARD_RADIUS_M * (1.0 + SEQUENCE_SPACING * index as f64);
    let kind = match shape {
        TrajectoryShape::Circle => TrajectoryKind::Circle {
            center: [0.0; 3],
            radius: r,
            start_deg: 0.0,
        },
        TrajectoryShape::Arc => TrajectoryKind::Arc {
            center: [0.0; 3],
            radius: r,
            start_deg: 0.0,
            end_deg: 180.0,
        },
        TrajectoryShape::Line => TrajectoryKind::Line {
            start: [-1.2, 0.0, -r],
            end: [1.2, 0.0, -r],
        },
    };
    let target = match shape {
        TrajectoryShape::Line => [0.0, 0.0, 1.0],
        _ => [0.0; 3],
    };
    TrajectorySpec { kind, target }
}

/// Renders `sequences` parallel trajectories of `frames` views each.
pub fn generate_standard(
    shape: TrajectoryShape,
    sequences: usize,
    frames: usize,
    resolution: u32,
    seed: u64,
    out_root: &Path,
) -> Result<TrajectoryDataset> {
    if sequences == 0 {
        return Err(Error::InvalidParams("need at least one sequence".into()));
    }
    let scene = standard_scene(seed)?;
    let trajectories = (0..sequences)
        .map(|i| make_trajectory(&standard_trajectory(shape, i), frames, &scene))
        .collect::<Result<Vec<_>>>()?;
    generate_dataset(&scene, &trajectories, &Intrinsics::square(resolution, STANDARD_FOV_DEG), out_root)
}
