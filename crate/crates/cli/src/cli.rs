use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use p2i_core::checkpoint::{load_checkpoint, read_manifest, save_checkpoint};
use p2i_core::dataset::{load_dataset, make_split, DatasetFormat, Setting, SplitPlan, TrajectoryDataset};
use p2i_core::evaluation::{benchmark_fps, evaluate_split, format_fps, format_table};
use p2i_core::networks::ModelBundle;
use p2i_core::oracle::{generate_standard, TrajectoryShape};
use p2i_core::synthesis::{pose_from_values, synthesize, ImageFormat, SynthesisRequest};
use p2i_core::trainer::{init_bundle, train_phase1, train_phase2, Outputs, RunConfig};

use crate::server::{serve, ServeOptions};
use crate::CliError;

/// Report file written next to the checkpoint by `train`.
pub const REPORT_FILE: &str = "report.jsonl";

#[derive(Debug, Parser)]
#[command(name = "p2i", version, about = "Pose-to-image view synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SettingArg {
    A,
    B,
    C,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::A => Setting::A,
            SettingArg::B => Setting::B,
            SettingArg::C => Setting::C,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ShapeArg {
    Circle,
    Arc,
    Line,
}

impl From<ShapeArg> for TrajectoryShape {
    fn from(s: ShapeArg) -> Self {
        match s {
            ShapeArg::Circle => TrajectoryShape::Circle,
            ShapeArg::Arc => TrajectoryShape::Arc,
            ShapeArg::Line => TrajectoryShape::Line,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Cp2v2,
    Sevenscenes,
}

impl From<FormatArg> for DatasetFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Cp2v2 => DatasetFormat::Cp2v2,
            FormatArg::Sevenscenes => DatasetFormat::Sevenscenes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, clap::Args)]
pub struct DataArgs {
    /// Dataset root directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "cp2v2")]
    pub format: FormatArg,
    /// Center-crop and resize every frame to this square size.
    #[arg(long)]
    pub resize: Option<u32>,
}

impl DataArgs {
    pub fn load(&self) -> Result<TrajectoryDataset, CliError> {
        let ds = load_dataset(&self.data, self.format.into())?;
        Ok(match self.resize {
            Some(r) => ds.resize_square(r)?,
            None => ds,
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset of the standard box room.
    OracleGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        resolution: u32,
        /// Frames per sequence.
        #[arg(long, default_value_t = 240)]
        frames: usize,
        #[arg(long, value_enum, default_value = "circle")]
        trajectory: ShapeArg,
        /// Parallel sequences, each 10% farther from the room center.
        #[arg(long, default_value_t = 1)]
        sequences: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build a train/test split.
    Split {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        setting: SettingArg,
        /// Frames held out per hundred (setting a).
        #[arg(long, default_value_t = 1)]
        missing: u32,
        /// Held-out sequence ids (settings b and c).
        #[arg(long, value_delimiter = ',')]
        test_seqs: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; the output directory holds the checkpoint and report.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        split: PathBuf,
        /// JSON run configuration; defaults apply to omitted fields.
        #[arg(long, env = "P2I_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        phase: PhaseArg,
    },
    /// Score a checkpoint on the test frames of a split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip the throughput measurement.
        #[arg(long)]
        no_fps: bool,
    },
    /// Synthesize one view.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        /// "tx ty tz qw qx qy qz"
        #[arg(long, allow_hyphen_values = true)]
        pose: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        enhanced: bool,
        #[arg(long, default_value = "png_rgb")]
        image_format: String,
    },
    /// Measure synthesis throughput.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 20)]
        timed: usize,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Serve the checkpoint over HTTP.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

pub fn parse_pose(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| CliError::Usage(format!("pose component {t:?} is not a number")))
        })
        .collect()
}

pub fn load_model(ckpt: &Path) -> Result<(ModelBundle<f32>, String), CliError> {
    let (bundle, manifest) = load_checkpoint::<f32>(ckpt, None)?;
    Ok((bundle, manifest.checkpoint_id))
}

fn read_run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(p) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| p2i_core::Error::Config(format!("{}: {e}", p.display())))?;
    cfg.network.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn train(data: &DataArgs, split: &Path, config: Option<&Path>, out: &Path, phase: PhaseArg) -> Result<(), CliError> {
    let run = read_run_config(config)?;
    let ds = data.load()?;
    let plan = SplitPlan::load(split)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let outputs = Outputs {
        checkpoint: Some(out.to_path_buf()),
        report: Some(out.join(REPORT_FILE)),
    };
    let mut bundle = match phase {
        PhaseArg::One | PhaseArg::Both => {
            let mut b = init_bundle(&run.network, &run.train, &ds)?;
            let r = train_phase1(&mut b, &ds, &plan, &run.train, &outputs)?;
            if r.checkpoint.is_none() {
                save_checkpoint(&b, out)?;
            }
            log::info!("phase 1: {} steps in {:.1}s", run.train.steps_phase1, r.wallclock_s);
            b
        }
        PhaseArg::Two => load_checkpoint::<f32>(out, None)?.0,
    };
    if phase != PhaseArg::One {
        let r = train_phase2(&mut bundle, &ds, &plan, &run.train, &outputs)?;
        log::info!("phase 2: {} records in {:.1}s", r.records.len(), r.wallclock_s);
    }
    let m = read_manifest(out)?;
    println!("{}", serde_json::json!({ "checkpoint": out, "checkpoint_id": m.checkpoint_id, "step": m.step }));
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::OracleGen {
            out,
            resolution,
            frames,
            trajectory,
            sequences,
            seed,
        } => {
            let ds = generate_standard(trajectory.into(), sequences, frames, resolution, seed, &out)?;
            println!(
                "{}",
                serde_json::json!({ "out": out, "sequences": ds.sequences.len(), "frames": ds.len() })
            );
        }
        Command::Split {
            data,
            setting,
            missing,
            test_seqs,
            out,
        } => {
            let ds = data.load()?;
            let plan = make_split(&ds, setting.into(), missing, &test_seqs)?;
            plan.save(&out)?;
            println!(
                "{}",
                serde_json::json!({ "out": out, "train": plan.train.len(), "test": plan.test.len() })
            );
        }
        Command::Train {
            data,
            split,
            config,
            out,
            phase,
        } => train(&data, &split, config.as_deref(), &out, phase)?,
        Command::Eval {
            data,
            split,
            ckpt,
            out,
            no_fps,
        } => {
            let ds = data.load()?;
            let plan = SplitPlan::load(&split)?;
            let (bundle, id) = load_model(&ckpt)?;
            let mut report = evaluate_split(&bundle, &id, &ds, &plan, None)?;
            if !no_fps {
                report.fps = Some(benchmark_fps(&bundle, bundle.config.resolution, 2, 10)?);
            }
            let json = serde_json::to_vec_pretty(&report).expect("report serializes");
            write_file(&out, &json)?;
            print!("{}", format_table(&report));
        }
        Command::Synth {
            ckpt,
            pose,
            out,
            enhanced,
            image_format,
        } => {
            let req = SynthesisRequest {
                pose: pose_from_values(&parse_pose(&pose)?)?,
                enhanced,
                format: image_format.parse::<ImageFormat>()?,
            };
            let (bundle, _) = load_model(&ckpt)?;
            let s = synthesize(&bundle, &req)?;
            if let Some(w) = &s.warning {
                log::warn!("{w}");
            }
            write_file(&out, &s.bytes)?;
        }
        Command::Bench {
            ckpt,
            resolution,
            warmup,
            timed,
            json,
        } => {
            let (bundle, _) = load_model(&ckpt)?;
            let r = benchmark_fps(&bundle, resolution.unwrap_or(bundle.config.resolution), warmup, timed)?;
            if json {
                println!("{}", serde_json::to_string(&r).expect("report serializes"));
            } else {
                print!("{}", format_fps(&r));
            }
        }
        Command::Serve { ckpt, port, host } => {
            let (bundle, id) = load_model(&ckpt)?;
            serve(bundle, id, &host, port, ServeOptions::default())?;
        }
    }
    Ok(())
}
