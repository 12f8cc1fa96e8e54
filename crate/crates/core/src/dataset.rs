//! Pose-annotated RGBD trajectory datasets: on-disk layouts, experimental
//! splits and conversion to network tensors.
//!
//! Two layouts are readable:
//!
//! * `cp2v2` (also written by the oracle):
//!   `meta.json`, and per sequence `seq_{k:03}/frame_{i:06}.color.png`,
//!   `seq_{k:03}/frame_{i:06}.depth.png` (16-bit millimeters) and
//!   `seq_{k:03}/poses.txt` with lines `i tx ty tz qw qx qy qz`.
//! * `sevenscenes`: `seq-XX/frame-XXXXXX.{color.png,depth.png,pose.txt}`,
//!   where the pose file holds a row-major 4×4 camera-to-world matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::Intrinsics;
use crate::pose::{matrix_to_quat, Pose7, SceneBounds};
use crate::tensor::Tensor;

pub type DepthImage = ImageBuffer<Luma<u16>, Vec<u16>>;

/// Millimeters per meter in stored depth maps.
pub const DEPTH_SCALE: f64 = 1000.0;
/// Percentile of valid depths used as the normalization ceiling.
pub const DEPTH_MAX_PERCENTILE: f64 = 99.9;
/// Frame spacing of the missing-frame setting.
pub const MISSING_RUN_PERIOD: u32 = 100;

/// One pose-annotated RGBD sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RGBDFrame {
    pub rgb: RgbImage,
    /// Millimeters; 0 marks missing depth.
    pub depth: DepthImage,
    pub pose: Pose7,
    pub seq_id: usize,
    /// 1-based index within the trajectory.
    pub frame_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: usize,
    /// Ordered by `frame_id`.
    pub frames: Vec<RGBDFrame>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub sequences: Vec<Sequence>,
    pub intrinsics: Intrinsics,
    pub bounds: SceneBounds,
    /// Depth mapped to +1 by [`normalize_frame`], in meters.
    pub depth_max: f64,
}

/// `(seq_id, frame_id)`.
pub type FrameRef = (usize, u32);

impl TrajectoryDataset {
    pub fn sequence(&self, id: usize) -> Option<&Sequence> {
        self.sequences.iter().find(|s| s.id == id)
    }

    pub fn frame(&self, r: FrameRef) -> Option<&RGBDFrame> {
        self.sequence(r.0)?.frames.iter().find(|f| f.frame_id == r.1)
    }

    pub fn frames(&self) -> impl Iterator<Item = &RGBDFrame> {
        self.sequences.iter().flat_map(|s| s.frames.iter())
    }

    pub fn len(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(width, height)` shared by all frames.
    pub fn resolution(&self) -> (u32, u32) {
        (self.intrinsics.width, self.intrinsics.height)
    }

    /// Center-crops every frame to a square and resizes it to `size` pixels,
    /// adjusting the intrinsics to match.
    pub fn resize_square(&self, size: u32) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidParams("resize to zero pixels".into()));
        }
        let (w, h) = self.resolution();
        let side = w.min(h);
        let (ox, oy) = ((w - side) / 2, (h - side) / 2);
        let scale = size as f64 / side as f64;
        let mut out = self.clone();
        for seq in &mut out.sequences {
            for f in &mut seq.frames {
                let rgb = image::imageops::crop_imm(&f.rgb, ox, oy, side, side).to_image();
                f.rgb = image::imageops::resize(&rgb, size, size, image::imageops::FilterType::Triangle);
                let depth = image::imageops::crop_imm(&f.depth, ox, oy, side, side).to_image();
                f.depth = image::imageops::resize(&depth, size, size, image::imageops::FilterType::Nearest);
            }
        }
        let k = &self.intrinsics;
        out.intrinsics = Intrinsics {
            fx: k.fx * scale,
            fy: k.fy * scale,
            cx: ((k.cx - ox as f64) * scale).clamp(0.0, size as f64 - 1.0),
            cy: ((k.cy - oy as f64) * scale).clamp(0.0, size as f64 - 1.0),
            width: size,
            height: size,
        };
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Cp2v2,
    Sevenscenes,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cp2v2" | "oracle" => Ok(DatasetFormat::Cp2v2),
            "sevenscenes" | "7scenes" | "7-scenes" => Ok(DatasetFormat::Sevenscenes),
            other => Err(Error::InvalidParams(format!("unknown dataset format {other:?}"))),
        }
    }
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub depth_scale: f64,
    pub depth_max_m: f64,
    pub bounds: SceneBounds,
}

fn seq_dir(root: &Path, id: usize) -> PathBuf {
    root.join(format!("seq_{id:03}"))
}

fn write_png(path: &Path, encode: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    encode(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::load(path, other),
    })
}

/// Writes `ds` in the cp2v2 layout under `root`.
pub fn write_dataset(ds: &TrajectoryDataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let k = &ds.intrinsics;
    let meta = Meta {
        width: k.width,
        height: k.height,
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        depth_scale: DEPTH_SCALE,
        depth_max_m: ds.depth_max,
        bounds: ds.bounds,
    };
    let meta_path = root.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    for seq in &ds.sequences {
        let dir = seq_dir(root, seq.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut poses = String::new();
        for f in &seq.frames {
            let stem = format!("frame_{:06}", f.frame_id);
            write_png(&dir.join(format!("{stem}.color.png")), |p| f.rgb.save(p))?;
            write_png(&dir.join(format!("{stem}.depth.png")), |p| f.depth.save(p))?;
            let [tx, ty, tz, qw, qx, qy, qz] = f.pose.to_array();
            poses.push_str(&format!("{} {tx} {ty} {tz} {qw} {qx} {qy} {qz}\n", f.frame_id));
        }
        let pose_path = dir.join("poses.txt");
        fs::write(&pose_path, poses).map_err(|e| Error::io(&pose_path, e))?;
    }
    Ok(())
}

pub fn load_dataset(root: &Path, format: DatasetFormat) -> Result<TrajectoryDataset> {
    if !root.is_dir() {
        return Err(Error::load(root, "dataset root is not a directory"));
    }
    match format {
        DatasetFormat::Cp2v2 => load_cp2v2(root),
        DatasetFormat::Sevenscenes => load_seven_scenes(root),
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    Ok(entries)
}

fn file_name(p: &Path) -> &str {
    p.file_name().and_then(|s| s.to_str()).unwrap_or("")
}

/// Indexes `prefix{digits}{suffix}` files of `dir` by their numeric part.
fn index_files(dir: &Path, prefix: &str, suffix: &str) -> Result<BTreeMap<u32, PathBuf>> {
    let mut out = BTreeMap::new();
    for p in read_dir_sorted(dir)? {
        let name = file_name(&p);
        if let Some(num) = name.strip_prefix(prefix).and_then(|s| s.strip_suffix(suffix)) {
            if let Ok(i) = num.parse::<u32>() {
                out.insert(i, p);
            }
        }
    }
    Ok(out)
}

fn keys<V>(m: &BTreeMap<u32, V>) -> BTreeSet<u32> {
    m.keys().copied().collect()
}

fn read_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path).map(|im| im.to_rgb8()).map_err(|e| Error::load(path, e))
}

fn read_depth(path: &Path) -> Result<DepthImage> {
    let im = image::open(path).map_err(|e| Error::load(path, e))?;
    match im {
        image::DynamicImage::ImageLuma16(d) => Ok(d),
        other => Err(Error::load(
            path,
            format!("expected 16-bit single-channel depth, got {:?}", other.color()),
        )),
    }
}

/// Checks that every index present in one file family is present in all.
fn check_paired(families: &[(&str, BTreeSet<u32>, &dyn Fn(u32) -> PathBuf)]) -> Result<BTreeSet<u32>> {
    let all: BTreeSet<u32> = families.iter().flat_map(|(_, m, _)| m.iter().copied()).collect();
    for i in &all {
        for (what, m, path_of) in families {
            if !m.contains(i) {
                return Err(Error::load(path_of(*i), format!("missing {what} for frame {i}")));
            }
        }
    }
    Ok(all)
}

fn check_resolution(path: &Path, rgb: &RgbImage, depth: &DepthImage, want: (u32, u32)) -> Result<()> {
    if rgb.dimensions() != want || depth.dimensions() != want {
        return Err(Error::load(
            path,
            format!(
                "frame resolution color {:?} / depth {:?} differs from {:?}",
                rgb.dimensions(),
                depth.dimensions(),
                want
            ),
        ));
    }
    Ok(())
}

fn load_cp2v2(root: &Path) -> Result<TrajectoryDataset> {
    let meta_path = root.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::load(&meta_path, e))?;
    let intrinsics = Intrinsics {
        fx: meta.fx,
        fy: meta.fy,
        cx: meta.cx,
        cy: meta.cy,
        width: meta.width,
        height: meta.height,
    };
    intrinsics.validate().map_err(|e| Error::load(&meta_path, e))?;
    meta.bounds.validate().map_err(|e| Error::load(&meta_path, e))?;
    if !(meta.depth_scale > 0.0) || !(meta.depth_max_m > 0.0) {
        return Err(Error::load(&meta_path, "depth_scale and depth_max_m must be positive"));
    }
    let depth_rescale = DEPTH_SCALE / meta.depth_scale;

    let mut sequences = Vec::new();
    for dir in read_dir_sorted(root)? {
        let Some(id) = file_name(&dir).strip_prefix("seq_").and_then(|s| s.parse::<usize>().ok()) else {
            continue;
        };
        if !dir.is_dir() {
            continue;
        }
        let poses_path = dir.join("poses.txt");
        let poses = read_pose_list(&poses_path)?;
        let colors = index_files(&dir, "frame_", ".color.png")?;
        let depths = index_files(&dir, "frame_", ".depth.png")?;
        let color_of = |i: u32| dir.join(format!("frame_{i:06}.color.png"));
        let depth_of = |i: u32| dir.join(format!("frame_{i:06}.depth.png"));
        let pose_of = |_: u32| poses_path.clone();
        let ids = check_paired(&[
            ("color image", keys(&colors), &color_of),
            ("depth image", keys(&depths), &depth_of),
            ("pose line", keys(&poses), &pose_of),
        ])?;
        let mut frames = Vec::with_capacity(ids.len());
        for i in ids {
            if i == 0 {
                return Err(Error::load(&color_of(i), "frame ids are 1-based"));
            }
            let rgb = read_rgb(&colors[&i])?;
            let mut depth = read_depth(&depths[&i])?;
            check_resolution(&colors[&i], &rgb, &depth, (meta.width, meta.height))?;
            if depth_rescale != 1.0 {
                for d in depth.iter_mut() {
                    *d = (*d as f64 * depth_rescale).round().min(u16::MAX as f64) as u16;
                }
            }
            frames.push(RGBDFrame {
                rgb,
                depth,
                pose: poses[&i],
                seq_id: id,
                frame_id: i,
            });
        }
        sequences.push(Sequence { id, frames });
    }
    if sequences.is_empty() {
        return Err(Error::load(root, "no seq_XXX directories"));
    }
    Ok(TrajectoryDataset {
        sequences,
        intrinsics,
        bounds: meta.bounds,
        depth_max: meta.depth_max_m,
    })
}

fn read_pose_list(path: &Path) -> Result<BTreeMap<u32, Pose7>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| Error::PoseFormat {
            path: path.to_path_buf(),
            reason: format!("line {}: {reason}", lineno + 1),
        };
        let mut parts = line.split_whitespace();
        let id: u32 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing frame index".into()))?;
        let vals: Vec<f64> = parts
            .map(|s| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}"))))
            .collect::<Result<_>>()?;
        let arr: [f64; 7] = vals
            .try_into()
            .map_err(|v: Vec<f64>| bad(format!("expected 7 pose values, got {}", v.len())))?;
        let pose = Pose7::from_array(arr).map_err(|e| bad(e.to_string()))?;
        if out.insert(id, pose).is_some() {
            return Err(bad(format!("duplicate frame index {id}")));
        }
    }
    Ok(out)
}

/// Default intrinsics of the 7-Scenes Kinect frames at 640×480.
const SEVEN_SCENES_FOCAL: f64 = 585.0;

fn load_seven_scenes(root: &Path) -> Result<TrajectoryDataset> {
    let mut sequences = Vec::new();
    let mut resolution: Option<(u32, u32)> = None;
    for dir in read_dir_sorted(root)? {
        let Some(id) = file_name(&dir).strip_prefix("seq-").and_then(|s| s.parse::<usize>().ok()) else {
            continue;
        };
        if !dir.is_dir() {
            continue;
        }
        let colors = index_files(&dir, "frame-", ".color.png")?;
        let depths = index_files(&dir, "frame-", ".depth.png")?;
        let poses = index_files(&dir, "frame-", ".pose.txt")?;
        let color_of = |i: u32| dir.join(format!("frame-{i:06}.color.png"));
        let depth_of = |i: u32| dir.join(format!("frame-{i:06}.depth.png"));
        let pose_of = |i: u32| dir.join(format!("frame-{i:06}.pose.txt"));
        let ids = check_paired(&[
            ("color image", keys(&colors), &color_of),
            ("depth image", keys(&depths), &depth_of),
            ("pose file", keys(&poses), &pose_of),
        ])?;
        let mut frames = Vec::with_capacity(ids.len());
        for i in ids {
            let rgb = read_rgb(&colors[&i])?;
            let mut depth = read_depth(&depths[&i])?;
            let want = *resolution.get_or_insert(rgb.dimensions());
            check_resolution(&colors[&i], &rgb, &depth, want)?;
            // 65535 marks invalid Kinect depth.
            for d in depth.iter_mut() {
                if *d == u16::MAX {
                    *d = 0;
                }
            }
            frames.push(RGBDFrame {
                rgb,
                depth,
                pose: read_pose_matrix(&poses[&i])?,
                seq_id: id,
                // Files are numbered from 0.
                frame_id: i + 1,
            });
        }
        sequences.push(Sequence { id, frames });
    }
    let (w, h) = resolution.ok_or_else(|| Error::load(root, "no seq-XX frames found"))?;
    let s = w as f64 / 640.0;
    let intrinsics = Intrinsics {
        fx: SEVEN_SCENES_FOCAL * s,
        fy: SEVEN_SCENES_FOCAL * s,
        cx: (w / 2) as f64,
        cy: (h / 2) as f64,
        width: w,
        height: h,
    };
    let bounds = SceneBounds::from_translations(sequences.iter().flat_map(|q| q.frames.iter().map(|f| &f.pose.t)))?;
    let depth_max = depth_percentile_m(&sequences, DEPTH_MAX_PERCENTILE)
        .ok_or_else(|| Error::load(root, "no valid depth values"))?;
    Ok(TrajectoryDataset {
        sequences,
        intrinsics,
        bounds,
        depth_max,
    })
}

/// Reads a 4×4 row-major camera-to-world matrix.
pub fn read_pose_matrix(path: &Path) -> Result<Pose7> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pose_matrix(&text).map_err(|reason| Error::PoseFormat {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn parse_pose_matrix(text: &str) -> std::result::Result<Pose7, String> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if vals.len() != 16 {
        return Err(format!("expected 16 values, got {}", vals.len()));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err("non-finite matrix entry".into());
    }
    let r = [
        [vals[0], vals[1], vals[2]],
        [vals[4], vals[5], vals[6]],
        [vals[8], vals[9], vals[10]],
    ];
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let rtr: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let id = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((rtr - id).abs());
        }
    }
    if worst > 1e-3 {
        return Err(format!("rotation is not orthonormal (|RᵀR − I|∞ = {worst:.3e})"));
    }
    Pose7::new([vals[3], vals[7], vals[11]], matrix_to_quat(&r)).map_err(|e| e.to_string())
}

/// Given percentile of nonzero depths across all frames, in meters.
pub fn depth_percentile_m(sequences: &[Sequence], percentile: f64) -> Option<f64> {
    let mut hist = vec![0u64; u16::MAX as usize + 1];
    let mut total = 0u64;
    for f in sequences.iter().flat_map(|s| s.frames.iter()) {
        for d in f.depth.iter().filter(|d| **d > 0) {
            hist[*d as usize] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return None;
    }
    let need = ((percentile / 100.0) * total as f64 - 1e-9).ceil().max(1.0) as u64;
    let mut acc = 0;
    for (v, c) in hist.iter().enumerate() {
        acc += c;
        if acc >= need {
            return Some(v as f64 / DEPTH_SCALE);
        }
    }
    None
}

/// Experimental settings: (a) missing frames on the training trajectory,
/// (b) a held-out adjacent trajectory, (c) several held-out trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    A,
    B,
    C,
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Setting::A),
            "b" => Ok(Setting::B),
            "c" => Ok(Setting::C),
            other => Err(Error::InvalidParams(format!("unknown setting {other:?}"))),
        }
    }
}

/// Train/test assignment of frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub setting: Setting,
    /// Missing-run length (setting a); 0 otherwise.
    #[serde(rename = "N")]
    pub n: u32,
    pub train: Vec<FrameRef>,
    pub test: Vec<FrameRef>,
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        let train: BTreeSet<_> = self.train.iter().collect();
        if let Some(dup) = self.test.iter().find(|r| train.contains(r)) {
            return Err(Error::InvalidSplit(format!("frame {dup:?} is in both train and test")));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("split serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: SplitPlan = serde_json::from_str(&text).map_err(|e| Error::load(path, e))?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Frame ids held out under setting (a) for a sequence of `length` frames:
/// `100m+1 ..= 100m+n` for `m = 1..=M`, `M` the largest with `100M + n <= length`.
pub fn missing_frame_ids(length: u32, n: u32) -> Vec<u32> {
    let mut out = Vec::new();
    let mut m = 1;
    while MISSING_RUN_PERIOD * m + n <= length {
        out.extend((1..=n).map(|j| MISSING_RUN_PERIOD * m + j));
        m += 1;
    }
    out.dedup();
    out
}

pub fn make_split(ds: &TrajectoryDataset, setting: Setting, n: u32, test_seqs: &[usize]) -> Result<SplitPlan> {
    for s in test_seqs {
        if ds.sequence(*s).is_none() {
            return Err(Error::InvalidSplit(format!("sequence {s} not in dataset")));
        }
    }
    let all_of = |seq: &Sequence| seq.frames.iter().map(|f| (seq.id, f.frame_id)).collect::<Vec<_>>();
    let (train, test) = match setting {
        Setting::A => {
            if n == 0 {
                return Err(Error::InvalidParams("missing-run length N must be >= 1".into()));
            }
            let mut train = Vec::new();
            let mut test = Vec::new();
            for seq in &ds.sequences {
                let selected = test_seqs.is_empty() || test_seqs.contains(&seq.id);
                let length = seq.frames.iter().map(|f| f.frame_id).max().unwrap_or(0);
                let held: BTreeSet<u32> = if selected {
                    missing_frame_ids(length, n).into_iter().collect()
                } else {
                    BTreeSet::new()
                };
                for f in &seq.frames {
                    if held.contains(&f.frame_id) {
                        test.push((seq.id, f.frame_id));
                    } else {
                        train.push((seq.id, f.frame_id));
                    }
                }
            }
            if test.is_empty() {
                return Err(Error::EmptyTest(format!(
                    "no sequence has at least {} frames",
                    MISSING_RUN_PERIOD + n
                )));
            }
            (train, test)
        }
        Setting::B => {
            let [held] = test_seqs else {
                return Err(Error::InvalidSplit(format!(
                    "setting b holds out exactly one sequence, got {test_seqs:?}"
                )));
            };
            let pos = ds.sequences.iter().position(|s| s.id == *held).expect("checked above");
            let neighbour = if pos > 0 {
                &ds.sequences[pos - 1]
            } else {
                ds.sequences
                    .get(pos + 1)
                    .ok_or_else(|| Error::InvalidSplit("setting b needs an adjacent training sequence".into()))?
            };
            (all_of(neighbour), all_of(&ds.sequences[pos]))
        }
        Setting::C => {
            if test_seqs.is_empty() {
                return Err(Error::InvalidSplit("setting c needs held-out sequences".into()));
            }
            let mut train = Vec::new();
            let mut test = Vec::new();
            for seq in &ds.sequences {
                if test_seqs.contains(&seq.id) {
                    test.extend(all_of(seq));
                } else {
                    train.extend(all_of(seq));
                }
            }
            if train.is_empty() {
                return Err(Error::InvalidSplit("every sequence is held out".into()));
            }
            (train, test)
        }
    };
    let plan = SplitPlan {
        setting,
        n: if setting == Setting::A { n } else { 0 },
        train,
        test,
    };
    plan.validate()?;
    Ok(plan)
}

/// `[4, H, W]` tensor in `[-1, 1]`, channels `(R, G, B, D)`.
pub fn normalize_frame(f: &RGBDFrame, depth_max: f64) -> Tensor<f32> {
    assert!(depth_max > 0.0, "depth_max must be positive");
    let (w, h) = f.rgb.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![0f32; 4 * plane];
    for (i, px) in f.rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    for (i, d) in f.depth.iter().enumerate() {
        let m = *d as f64 / DEPTH_SCALE;
        data[3 * plane + i] = ((m / depth_max).clamp(0.0, 1.0) * 2.0 - 1.0) as f32;
    }
    Tensor::from_vec(&[4, h as usize, w as usize], data)
}

/// Quantized images recovered from a `[C, H, W]` network tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenormalizedFrame {
    pub rgb: RgbImage,
    /// Present when the tensor has a fourth (depth) channel.
    pub depth: Option<DepthImage>,
}

pub fn denormalize_frame(t: &Tensor<f32>, depth_max: f64) -> DenormalizedFrame {
    let shape = t.shape();
    assert!(shape.len() == 3 && shape[0] >= 3, "expected [C, H, W], got {shape:?}");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let plane = h * w;
    let d = t.data();
    let mut rgb = RgbImage::new(w as u32, h as u32);
    for (i, px) in rgb.pixels_mut().enumerate() {
        for ch in 0..3 {
            px[ch] = ((d[ch * plane + i] as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        }
    }
    let depth = (c >= 4).then(|| {
        let mut im = DepthImage::new(w as u32, h as u32);
        for (i, px) in im.pixels_mut().enumerate() {
            let mm = (d[3 * plane + i] as f64 + 1.0) * 0.5 * depth_max * DEPTH_SCALE;
            px[0] = mm.round().clamp(0.0, u16::MAX as f64) as u16;
        }
        im
    });
    DenormalizedFrame { rgb, depth }
}
