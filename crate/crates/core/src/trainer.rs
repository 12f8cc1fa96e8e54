//! Two-phase training: alternating adversarial updates of the
//! discriminator side and the generator, then the enhancement network
//! against the frozen generator.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::dataset::{normalize_frame, FrameRef, SplitPlan, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::losses::{enet_loss, DLossBreakdown, LossWeights};
use crate::networks::{Ablation, ModelBundle, NetworkConfig, SceneMeta};
use crate::nn::{Adam, Module};
use crate::objective::{discriminator_pass, enet_pass_generated, generator_pass_cached, param_hash, DTermWeights};
use crate::pose::{encode_pose, POSE_DIM};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_enet: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_g: 1e-4,
            lr_d: 2e-4,
            lr_enet: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps_phase1: usize,
    pub steps_phase2: usize,
    pub d_steps_per_g: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub weights: LossWeights,
    pub ablation: Ablation,
    /// Record every n-th step.
    pub log_every: usize,
    /// Validation snapshot every n-th step; 0 disables.
    pub snapshot_every: usize,
    /// Intermediate checkpoint every n-th step; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Verify via parameter hashes that each update touches only its side.
    pub debug_alternation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            steps_phase1: 20_000,
            steps_phase2: 5_000,
            d_steps_per_g: 1,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            weights: LossWeights::default(),
            ablation: Ablation::default(),
            log_every: 1,
            snapshot_every: 0,
            checkpoint_every: 0,
            debug_alternation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if [o.lr_g, o.lr_d, o.lr_enet].iter().any(|lr| !(*lr > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.d_steps_per_g == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size, d_steps_per_g and log_every must be >= 1".into()));
        }
        self.weights.validate()
    }
}

/// Full run configuration as read from a config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

/// One JSON-lines record. Fields that the step did not compute are null.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_pro: Option<f64>,
    pub l_pe_real: Option<f64>,
    pub l_pe_fake: Option<f64>,
    pub gamma: Option<f64>,
    pub diff: Option<f64>,
    pub l_g: Option<f64>,
    pub l_enet: Option<f64>,
    pub wallclock_s: f64,
}

impl StepRecord {
    /// Loss fields only, for comparing runs regardless of timing.
    pub fn losses(&self) -> [Option<f64>; 7] {
        [
            self.l_pro,
            self.l_pe_real,
            self.l_pe_fake,
            self.gamma,
            self.diff,
            self.l_g,
            self.l_enet,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: u64,
    /// Enhancement loss on the fixed validation frame (phase 2 only).
    pub val_l_enet: Option<f64>,
    /// Generator RGB error on the fixed validation frame, as PSNR.
    pub val_psnr_db: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<Snapshot>,
    pub wallclock_s: f64,
    pub checkpoint: Option<PathBuf>,
}

/// Encoded poses and normalized images of the training frames.
pub struct TrainingSet {
    pub ids: Vec<FrameRef>,
    pub poses: Vec<[f32; POSE_DIM]>,
    pub images: Vec<Tensor<f32>>,
}

impl TrainingSet {
    pub fn new(ds: &TrajectoryDataset, refs: &[FrameRef], scene: &SceneMeta, cfg: &NetworkConfig) -> Result<Self> {
        if refs.is_empty() {
            return Err(Error::InvalidSplit("no training frames".into()));
        }
        let (w, h) = ds.resolution();
        if w as usize != cfg.resolution || h as usize != cfg.resolution {
            return Err(Error::Config(format!(
                "dataset resolution {w}×{h} differs from network resolution {}",
                cfg.resolution
            )));
        }
        let mut poses = Vec::with_capacity(refs.len());
        let mut images = Vec::with_capacity(refs.len());
        for r in refs {
            let f = ds
                .frame(*r)
                .ok_or_else(|| Error::InvalidSplit(format!("frame {r:?} not in dataset")))?;
            poses.push(encode_pose(&f.pose, &scene.bounds)?.map(|v| v as f32));
            let t = normalize_frame(f, scene.depth_max_m);
            let t = if cfg.in_channels == 3 {
                t.reshape(&[1, 4, h as usize, w as usize]).leading_channels(3).reshape(&[3, h as usize, w as usize])
            } else {
                t
            };
            images.push(t);
        }
        Ok(TrainingSet {
            ids: refs.to_vec(),
            poses,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
        let y = Tensor::from_vec(&[idx.len(), POSE_DIM], idx.iter().flat_map(|i| self.poses[*i]).collect());
        let imgs: Vec<Tensor<f32>> = idx.iter().map(|i| self.images[*i].clone()).collect();
        (y, Tensor::stack(&imgs))
    }
}

/// Epoch-wise shuffled batches from one seeded stream.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    n: usize,
}

impl Sampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Sampler {
            rng,
            order: Vec::new(),
            pos: 0,
            n,
        }
    }

    fn next(&mut self, batch: usize) -> Vec<usize> {
        (0..batch)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = (0..self.n).collect();
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Scene metadata of a dataset.
pub fn scene_meta(ds: &TrajectoryDataset) -> SceneMeta {
    SceneMeta {
        bounds: ds.bounds,
        depth_max_m: ds.depth_max,
    }
}

/// Fresh bundle for `network` with the run's ablation applied.
pub fn init_bundle(network: &NetworkConfig, train: &TrainConfig, ds: &TrajectoryDataset) -> Result<ModelBundle<f32>> {
    ModelBundle::new(train.ablation.apply(network), scene_meta(ds), train.seed)
}

/// Appends records to a JSON-lines file.
struct ReportSink {
    file: Option<(PathBuf, File)>,
}

impl ReportSink {
    fn open(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?;
                Some((p.to_path_buf(), f))
            }
            None => None,
        };
        Ok(ReportSink { file })
    }

    fn write(&mut self, r: &StepRecord) -> Result<()> {
        if let Some((p, f)) = &mut self.file {
            let line = serde_json::to_string(r).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(&*p, e))?;
        }
        Ok(())
    }
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct Outputs {
    /// Checkpoint directory.
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines report file.
    pub report: Option<PathBuf>,
}

fn non_finite(step: u64, ids: &[FrameRef], idx: &[usize], what: String) -> Error {
    Error::NonFinite {
        step: step as usize,
        batch: idx.iter().map(|i| ids[*i]).collect(),
        breakdown: what,
    }
}

fn breakdown_finite(b: &DLossBreakdown) -> bool {
    [Some(b.l_pro), b.l_pe_real, b.l_pe_fake, Some(b.total), Some(b.diff), b.gamma]
        .iter()
        .flatten()
        .all(|v| v.is_finite())
}

fn psnr_tensor(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((*x as f64 - *y as f64) / 2.0).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        100.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(100.0)
    }
}

fn snapshot(bundle: &ModelBundle<f32>, set: &TrainingSet, w: &LossWeights, with_enet: bool) -> Result<Snapshot> {
    let (y, real) = set.batch(&[0]);
    let generated = bundle.g.forward(&y);
    let rgb_real = real.leading_channels(3);
    let val_l_enet = match (&bundle.enet, with_enet) {
        (Some(e), true) => Some(enet_loss(&e.forward(&generated), &rgb_real, w.k3)?.total),
        _ => None,
    };
    Ok(Snapshot {
        step: bundle.step,
        val_l_enet,
        val_psnr_db: psnr_tensor(&generated.leading_channels(3), &rgb_real),
    })
}

fn check_alternation(before: [u8; 32], after: [u8; 32], what: &str) -> Result<()> {
    if before != after {
        return Err(Error::State(format!("{what} parameters changed during the other side's update")));
    }
    Ok(())
}

/// Adversarial phase. With `steps_phase1 = 0` the bundle is left untouched.
pub fn train_phase1(
    bundle: &mut ModelBundle<f32>,
    ds: &TrajectoryDataset,
    split: &SplitPlan,
    cfg: &TrainConfig,
    out: &Outputs,
) -> Result<TrainReport> {
    cfg.validate()?;
    if bundle.phase != 1 {
        return Err(Error::State(format!("phase 1 training needs a phase-1 bundle, got phase {}", bundle.phase)));
    }
    let set = TrainingSet::new(ds, &split.train, &bundle.scene, &bundle.config)?;
    let mut report = TrainReport::default();
    if cfg.steps_phase1 == 0 {
        return Ok(report);
    }
    let start = Instant::now();
    let mut sink = ReportSink::open(out.report.as_deref())?;
    let mut sampler = Sampler::new(set.len(), ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5031_5031));
    let o = &cfg.optimizer;
    let mut adam_d = Adam::<f32>::new(o.lr_d, o.beta1, o.beta2);
    let mut adam_g = Adam::<f32>::new(o.lr_g, o.beta1, o.beta2);
    let w = &cfg.weights;

    for _ in 0..cfg.steps_phase1 {
        let step = bundle.step + 1;
        let mut last = None;
        let mut breakdown = None;
        for _ in 0..cfg.d_steps_per_g {
            let idx = sampler.next(cfg.batch_size);
            let (y, real) = set.batch(&idx);
            let (fake, gcache) = bundle.g.forward_cached(&y);
            let g_before = cfg.debug_alternation.then(|| param_hash::<f32>(&[&bundle.g]));
            for m in bundle.d_modules() {
                m.zero_grad();
            }
            let b = discriminator_pass(bundle, &y, &real, &fake, w, DTermWeights::total(w), None)?;
            if !breakdown_finite(&b) {
                return Err(non_finite(step, &set.ids, &idx, format!("{b:?}")));
            }
            adam_d.step(&mut bundle.d_modules());
            if let Some(h) = g_before {
                check_alternation(h, param_hash::<f32>(&[&bundle.g]), "generator")?;
            }
            breakdown = Some(b);
            last = Some((idx, y, fake, gcache));
        }
        let (idx, y, fake, gcache) = last.expect("at least one discriminator step");
        let d_before = cfg.debug_alternation.then(|| d_hash(bundle));
        bundle.g.zero_grad();
        let l_g = generator_pass_cached(bundle, &y, &gcache, &fake, w)?;
        if !l_g.is_finite() {
            return Err(non_finite(step, &set.ids, &idx, format!("l_g = {l_g}")));
        }
        adam_g.step(&mut [&mut bundle.g]);
        if let Some(h) = d_before {
            check_alternation(h, d_hash(bundle), "discriminator")?;
        }
        bundle.step = step;

        let b = breakdown.expect("breakdown");
        if step % cfg.log_every as u64 == 0 {
            let r = StepRecord {
                step,
                l_pro: Some(b.l_pro),
                l_pe_real: b.l_pe_real,
                l_pe_fake: b.l_pe_fake,
                gamma: b.gamma,
                diff: Some(b.diff),
                l_g: Some(l_g),
                l_enet: None,
                wallclock_s: start.elapsed().as_secs_f64(),
            };
            sink.write(&r)?;
            report.records.push(r);
        }
        if step % 100 == 0 {
            log::info!(
                "phase 1 step {step}: l_pro {:.4} diff {:.4} l_g {:.4} ({:.1}s)",
                b.l_pro,
                b.diff,
                l_g,
                start.elapsed().as_secs_f64()
            );
        }
        if cfg.snapshot_every > 0 && step % cfg.snapshot_every as u64 == 0 {
            report.snapshots.push(snapshot(bundle, &set, w, false)?);
        }
        if let Some(dir) = &out.checkpoint {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every as u64 == 0 {
                save_checkpoint(bundle, dir)?;
            }
        }
    }
    bundle.phase = 2;
    if let Some(dir) = &out.checkpoint {
        save_checkpoint(bundle, dir)?;
        report.checkpoint = Some(dir.clone());
    }
    report.wallclock_s = start.elapsed().as_secs_f64();
    Ok(report)
}

fn d_hash(b: &ModelBundle<f32>) -> [u8; 32] {
    let mut mods: Vec<&dyn Module<f32>> = vec![&b.d, &b.m_d];
    if let Some(m) = &b.m_p {
        mods.push(m);
    }
    if let Some(m) = &b.m_l {
        mods.push(m);
    }
    param_hash(&mods)
}

/// Generator outputs are cached across steps when they fit in this many
/// bytes; the generator is frozen, so they never change.
const GENERATED_CACHE_BYTES: usize = 256 << 20;

/// Enhancement phase against the frozen generator. Skipped when the
/// bundle has no enhancer.
pub fn train_phase2(
    bundle: &mut ModelBundle<f32>,
    ds: &TrajectoryDataset,
    split: &SplitPlan,
    cfg: &TrainConfig,
    out: &Outputs,
) -> Result<TrainReport> {
    cfg.validate()?;
    if bundle.phase != 2 {
        return Err(Error::State(format!(
            "phase 2 training needs a bundle that completed phase 1, got phase {}",
            bundle.phase
        )));
    }
    let mut report = TrainReport::default();
    if bundle.enet.is_none() || cfg.steps_phase2 == 0 {
        return Ok(report);
    }
    let set = TrainingSet::new(ds, &split.train, &bundle.scene, &bundle.config)?;
    let start = Instant::now();
    let mut sink = ReportSink::open(out.report.as_deref())?;
    let mut sampler = Sampler::new(set.len(), ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5032_5032));
    let o = &cfg.optimizer;
    let mut adam = Adam::<f32>::new(o.lr_enet, o.beta1, o.beta2);
    let w = &cfg.weights;
    let g_hash = param_hash::<f32>(&[&bundle.g]);

    let per_frame = set.images[0].numel() * std::mem::size_of::<f32>();
    let cached: Option<Vec<Tensor<f32>>> = (per_frame * set.len() <= GENERATED_CACHE_BYTES).then(|| {
        (0..set.len())
            .map(|i| {
                let (y, _) = set.batch(&[i]);
                let g = bundle.g.forward(&y);
                let shape = g.shape()[1..].to_vec();
                g.reshape(&shape)
            })
            .collect()
    });

    for _ in 0..cfg.steps_phase2 {
        let step = bundle.step + 1;
        let idx = sampler.next(cfg.batch_size);
        let (y, real) = set.batch(&idx);
        let generated = match &cached {
            Some(c) => Tensor::stack(&idx.iter().map(|i| c[*i].clone()).collect::<Vec<_>>()),
            None => bundle.g.forward(&y),
        };
        if let Some(e) = &mut bundle.enet {
            e.zero_grad();
        }
        let loss = enet_pass_generated(bundle, &generated, &real, w)?;
        if !loss.total.is_finite() {
            return Err(non_finite(step, &set.ids, &idx, format!("{loss:?}")));
        }
        adam.step(&mut [bundle.enet.as_mut().expect("checked above")]);
        bundle.step = step;
        if step % cfg.log_every as u64 == 0 {
            let r = StepRecord {
                step,
                l_enet: Some(loss.total),
                wallclock_s: start.elapsed().as_secs_f64(),
                ..StepRecord::default()
            };
            sink.write(&r)?;
            report.records.push(r);
        }
        if step % 100 == 0 {
            log::info!(
                "phase 2 step {step}: l_enet {:.4} ({:.1}s)",
                loss.total,
                start.elapsed().as_secs_f64()
            );
        }
        if cfg.snapshot_every > 0 && step % cfg.snapshot_every as u64 == 0 {
            report.snapshots.push(snapshot(bundle, &set, w, true)?);
        }
        if let Some(dir) = &out.checkpoint {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every as u64 == 0 {
                save_checkpoint(bundle, dir)?;
            }
        }
    }
    check_alternation(g_hash, param_hash::<f32>(&[&bundle.g]), "generator")?;
    if let Some(dir) = &out.checkpoint {
        save_checkpoint(bundle, dir)?;
        report.checkpoint = Some(dir.clone());
    }
    report.wallclock_s = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Mean of the first and of the last `fraction` of `values`.
pub fn head_tail_means(values: &[f64], fraction: f64) -> Option<(f64, f64)> {
    let k = ((values.len() as f64 * fraction).round() as usize).max(1);
    if values.len() < 2 * k {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&values[..k]), mean(&values[values.len() - k..])))
}
