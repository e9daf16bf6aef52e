//! Run configuration and the `blursplat` command line.
//!
//! Settings resolve as built-in default, then `--config` file, then
//! command-line flag, each layer overriding the previous one.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use thiserror::Error;

use crate::io::{self, parse_rgb, Checkpoint, CheckpointView, Dataset, IoError};
use crate::lie::{LieError, TrajectoryKind};
use crate::metrics::{ate, exposure_poses, psnr, ssim, AteMode, MetricsError, MetricsReport};
use crate::optim::{train, OptimError, TrainConfig};
use crate::rasterizer::render_forward;
use crate::scene::{init_from_pointcloud, SceneError};
use crate::synth::{generate_dataset, generate_scene, SynthError, SynthSpec};

pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const LOG_FILE: &str = "train_log.txt";
pub const TRAJ_FILE: &str = "trajectories.txt";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}:{line}: {message}", path.display())]
    Syntax { path: PathBuf, line: usize, message: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}")]
    InvalidValue { key: String, value: String },
    #[error("{0}")]
    Missing(String),
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Lie(#[from] LieError),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

/// Everything a run needs: training, synthesis and path settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub kind: TrajectoryKind,
    pub seed: u64,
    /// Overrides the dataset's value when set.
    pub scene_extent: Option<f64>,
    /// Overrides the dataset's value when set.
    pub background: Option<[f64; 3]>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            dataset: None,
            output: None,
            kind: TrajectoryKind::Linear,
            seed: 0,
            scene_extent: None,
            background: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_path(key: &str, value: &str) -> Result<PathBuf, ConfigError> {
    if value.is_empty() {
        return Err(ConfigError::InvalidValue {
            key: key.into(),
            value: value.into(),
        });
    }
    Ok(PathBuf::from(value))
}

impl RunConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        let s = &mut self.synth;
        let f = |v: &str| parse_value::<f64>(key, v);
        let n = |v: &str| parse_value::<usize>(key, v);
        let b = |v: &str| parse_value::<bool>(key, v);
        match key {
            "dataset" => self.dataset = Some(parse_path(key, value)?),
            "output" => self.output = Some(parse_path(key, value)?),
            "traj" => {
                self.kind = parse_value(key, value)?;
                s.kind = self.kind;
            }
            "seed" => {
                self.seed = parse_value(key, value)?;
                t.seed = self.seed;
                s.seed = self.seed;
            }
            "n_virtual" => {
                t.n_virtual = n(value)?;
                s.n_virtual = t.n_virtual;
            }
            "iters" => t.total_iters = n(value)?,
            "lambda" => t.lambda = f(value)?,
            "pose_lr_start" => t.pose_lr_start = f(value)?,
            "pose_lr_end" => t.pose_lr_end = f(value)?,
            "lr_position_start" => t.scene_lr.position_start = f(value)?,
            "lr_position_end" => t.scene_lr.position_end = f(value)?,
            "lr_color" => t.scene_lr.color = f(value)?,
            "lr_opacity" => t.scene_lr.opacity = f(value)?,
            "lr_scale" => t.scene_lr.scale = f(value)?,
            "lr_rotation" => t.scene_lr.rotation = f(value)?,
            "densify" => t.densify_enabled = b(value)?,
            "densify_grad_threshold" => t.densify.grad_threshold = f(value)?,
            "densify_interval" => t.densify.interval = n(value)?,
            "densify_start" => t.densify.start_iter = n(value)?,
            "densify_stop_fraction" => t.densify.stop_fraction = f(value)?,
            "optimize_scene" => t.optimize_scene = b(value)?,
            "optimize_poses" => t.optimize_poses = b(value)?,
            "log_every" => t.log_every = n(value)?,
            "scene_extent" => self.scene_extent = Some(f(value)?).filter(|e| *e > 0.0),
            "background" => {
                self.background = Some(parse_rgb(value).ok_or_else(|| ConfigError::InvalidValue {
                    key: key.into(),
                    value: value.into(),
                })?)
            }
            "synth_gaussians" => s.gaussian_count = n(value)?,
            "synth_images" => s.image_count = n(value)?,
            "synth_width" => s.width = n(value)?,
            "synth_height" => s.height = n(value)?,
            "synth_extent" => s.scene_extent = f(value)?,
            "synth_fov_deg" => s.fov_x_deg = f(value)?,
            "synth_orbit_radius" => s.orbit_radius = f(value)?,
            "synth_blur_rot_deg" => s.blur_rot_deg = f(value)?,
            "synth_blur_trans_frac" => s.blur_trans_frac = f(value)?,
            "synth_acceleration" => s.acceleration = f(value)?,
            "synth_n_oracle" => s.n_oracle = n(value)?,
            "synth_init_rot_deg" => s.init_rot_deg = f(value)?,
            "synth_init_trans_frac" => s.init_trans_frac = f(value)?,
            "synth_point_fraction" => s.point_fraction = f(value)?,
            "synth_point_noise_frac" => s.point_noise_frac = f(value)?,
            "synth_background" => {
                s.background = parse_rgb(value).ok_or_else(|| ConfigError::InvalidValue {
                    key: key.into(),
                    value: value.into(),
                })?
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies a line-oriented `key=value` file; `#` starts a comment.
    pub fn apply_text(&mut self, path: &Path, text: &str) -> Result<(), ConfigError> {
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            let syntax = |message: String| ConfigError::Syntax {
                path: path.to_path_buf(),
                line,
                message,
            };
            let (key, value) = l.split_once('=').ok_or_else(|| syntax("expected key=value".into()))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(prev) = seen.insert(key.to_string(), line) {
                return Err(syntax(format!("{key} already set on line {prev}")));
            }
            self.set(key, value).map_err(|e| syntax(e.to_string()))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| IoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(self.apply_text(path, &text)?)
    }

    /// Training settings for `ds`, honoring explicit extent/background.
    pub fn train_config_for(&self, ds: &Dataset) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.scene_extent = self.scene_extent.unwrap_or(ds.meta.scene_extent);
        cfg.background = self.background.unwrap_or(ds.meta.background);
        cfg
    }
}

#[derive(Debug, Parser)]
#[command(name = "blursplat", version, about = "Deblurring Gaussian splatting with exposure-trajectory recovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default)]
struct Common {
    /// key=value settings file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long = "n-virtual", global = true)]
    n_virtual: Option<usize>,
    #[arg(long, global = true, value_parser = ["linear", "cubic"])]
    traj: Option<String>,
    #[arg(long, global = true)]
    iters: Option<usize>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
}

impl Common {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut push = |k, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("n_virtual", self.n_virtual.map(|v| v.to_string()));
        push("traj", self.traj.clone());
        push("iters", self.iters.map(|v| v.to_string()));
        push("lambda", self.lambda.map(|v| v.to_string()));
        out
    }

    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for (k, v) in self.overrides() {
            cfg.set(k, &v)?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AteModeArg {
    StartEnd,
    Mid,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic blurred dataset with ground truth
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Jointly optimize scene and exposure trajectories
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Render sharp images from a checkpoint
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Render each image at the middle of its exposure
        #[arg(long, conflicts_with = "u", required_unless_present = "u")]
        mid_exposure: bool,
        /// Exposure time in [0, 1]
        #[arg(long)]
        u: Option<f64>,
        /// Restrict to one image id
        #[arg(long)]
        image: Option<u32>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare a checkpoint against a dataset's ground truth
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the report here
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "start-end")]
        ate_mode: AteModeArg,
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit status: 0 success, 2 usage or configuration error, 1 any
/// other failure.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn required(value: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf, ConfigError> {
    value
        .or_else(|| fallback.clone())
        .ok_or_else(|| ConfigError::Missing(format!("{what} path required (flag or config key)")))
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth { out, common } => {
            let cfg = common.resolve()?;
            let out = required(out, &cfg.output, "output")?;
            let scene = generate_scene(&cfg.synth);
            let ds = generate_dataset(&scene, &cfg.synth)?;
            io::write_dataset(&out, &Dataset::from_synth(&ds))?;
            println!("wrote {} images to {}", ds.views.len(), out.display());
        }
        Command::Train { data, out, common } => {
            let cfg = common.resolve()?;
            let data = required(data, &cfg.dataset, "dataset")?;
            let out = required(out, &cfg.output, "output")?;
            let ckpt = train_checkpoint(&cfg, &data)?;
            ckpt.0.save(&out.join(CHECKPOINT_FILE))?;
            io::write_atomic(&out.join(LOG_FILE), ckpt.1.as_bytes())?;
            let trajs: Vec<_> = ckpt.0.views.iter().map(|v| (v.id, v.trajectory.clone())).collect();
            io::save_trajectories(&out.join(TRAJ_FILE), &trajs)?;
            println!(
                "trained {} iterations, {} gaussians, checkpoint {}",
                ckpt.0.iteration,
                ckpt.0.scene.len(),
                out.join(CHECKPOINT_FILE).display()
            );
        }
        Command::Render {
            checkpoint,
            out,
            mid_exposure,
            u,
            image,
            common,
        } => {
            common.resolve()?;
            let u = if mid_exposure { 0.5 } else { u.unwrap_or(0.5) };
            if !(0.0..=1.0).contains(&u) {
                return Err(ConfigError::InvalidValue {
                    key: "u".into(),
                    value: u.to_string(),
                }
                .into());
            }
            let ckpt = Checkpoint::load(&checkpoint)?;
            let bg = Vector3::from(ckpt.background);
            let mut count = 0;
            for v in ckpt.views.iter().filter(|v| image.is_none_or(|id| id == v.id)) {
                let (img, _) = render_forward(&ckpt.scene, &v.trajectory.pose_at(u)?, &v.intrinsics, &bg);
                io::save_png(&out.join(io::image_name(v.id)), &img)?;
                count += 1;
            }
            if count == 0 {
                return Err(CliError::Failed(format!("no image matches in {}", checkpoint.display())));
            }
            println!("rendered {count} images at u={u} to {}", out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            ate_mode,
            common,
        } => {
            let cfg = common.resolve()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let ds = io::load_dataset(&data, cfg.kind)?;
            let mode = match ate_mode {
                AteModeArg::StartEnd => AteMode::StartEnd,
                AteModeArg::Mid => AteMode::Mid,
            };
            let report = evaluate(&ckpt, &ds, mode)?;
            let text = report.to_text();
            print!("{text}");
            if let Some(out) = out {
                io::write_atomic(&out, text.as_bytes())?;
            }
        }
    }
    Ok(())
}

/// Runs training on the dataset at `data` and packages the result.
pub fn train_checkpoint(cfg: &RunConfig, data: &Path) -> Result<(Checkpoint, String), CliError> {
    let ds = io::load_dataset(data, cfg.kind)?;
    let tcfg = cfg.train_config_for(&ds);
    let scene = init_from_pointcloud(&ds.points, &ds.point_colors, tcfg.scene_extent)?;
    let out = train(&ds.views, scene, ds.init_trajectories.clone(), &tcfg)?;
    let views = ds
        .views
        .iter()
        .zip(out.trajectories)
        .map(|(v, trajectory)| CheckpointView {
            id: v.id,
            intrinsics: v.intrinsics,
            trajectory,
        })
        .collect();
    let ckpt = Checkpoint {
        iteration: tcfg.total_iters,
        background: tcfg.background,
        scene: out.scene,
        views,
    };
    Ok((ckpt, out.log.to_text()))
}

/// Mid-exposure PSNR/SSIM per image against the sharp ground truth, plus
/// trajectory error after similarity alignment.
pub fn evaluate(ckpt: &Checkpoint, ds: &Dataset, mode: AteMode) -> Result<MetricsReport, CliError> {
    let gt = ds
        .ground_truth
        .as_ref()
        .ok_or_else(|| CliError::Failed("dataset has no ground truth (traj_gt.txt, sharp/)".into()))?;
    let ids = ds.ids();
    let ckpt_ids: Vec<u32> = ckpt.views.iter().map(|v| v.id).collect();
    if ckpt_ids != ids {
        return Err(CliError::Failed(format!("checkpoint images {ckpt_ids:?} differ from dataset images {ids:?}")));
    }
    let bg = Vector3::from(ckpt.background);
    let mut report = MetricsReport::default();
    for (v, sharp) in ckpt.views.iter().zip(&gt.sharp) {
        let (img, _) = render_forward(&ckpt.scene, &v.trajectory.pose_at(0.5)?, &v.intrinsics, &bg);
        report.add_image(v.id, vec![("psnr".into(), psnr(&img, sharp)?), ("ssim".into(), ssim(&img, sharp)?)]);
    }
    let est: Vec<_> = ckpt.views.iter().map(|v| (v.id, v.trajectory.clone())).collect();
    let reference: Vec<_> = ids.iter().copied().zip(gt.trajectories.iter().cloned()).collect();
    let result = ate(&exposure_poses(&est, mode)?, &exposure_poses(&reference, mode)?)?;
    let mean = |k: &str| report.mean_of(k).unwrap_or(f64::NAN);
    let (p, s) = (mean("psnr"), mean("ssim"));
    report.add_aggregate("psnr", p);
    report.add_aggregate("ssim", s);
    report.add_aggregate("ate_rmse", result.rmse);
    report.add_aggregate("ate_percent_extent", 100.0 * result.rmse / ds.meta.scene_extent);
    report.add_aggregate("gaussians", ckpt.scene.len() as f64);
    Ok(report)
}
