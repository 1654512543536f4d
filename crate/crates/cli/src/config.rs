//! `RunConfig`: the TOML run description shared by every subcommand.

use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ws3_core::layers::network::{NetworkSpec, Preset};
use ws3_core::pruning::PruneCriterion;
use ws3_core::training::data::SceneConfig;
use ws3_core::training::sgd::TrainerConfig;
use ws3_core::training::trainer::Task;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub preset: String,
    pub width: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { preset: "14a".into(), width: 0.25, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    /// One of `L1G`, `L1L`, `FGG`, `FGL`, `L1SG`, `L1SL`.
    pub criterion: String,
    /// Overall fraction of prunable weights removed after `steps` steps.
    pub target_rate: f64,
    pub steps: usize,
    /// Fine-tuning iterations after every pruning step.
    pub i_prune: usize,
    /// Initial fine-tuning learning rate; defaults to `0.1 · trainer.lr`.
    pub fine_tune_lr: Option<f64>,
    /// Layers (or whole blocks such as `block7`) for z-axis structural pruning.
    pub structural: Vec<String>,
    /// Fine-tuning iterations after structural pruning.
    pub structural_iters: usize,
    pub structural_lr: Option<f64>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            criterion: "L1G".into(),
            target_rate: 0.9,
            steps: 10,
            i_prune: 100,
            fine_tune_lr: None,
            structural: Vec::new(),
            structural_iters: 0,
            structural_lr: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        /// Half-open seed range `[start, end)` of training scenes.
        train_seeds: [u64; 2],
        eval_seeds: [u64; 2],
        #[serde(default)]
        scene: SceneConfig,
    },
    Voxset {
        train: Vec<PathBuf>,
        eval: Vec<PathBuf>,
        num_classes: usize,
        voxel_size: f64,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            train_seeds: [0, 1000],
            eval_seeds: [100_000, 100_016],
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    /// Channel widths of the synthetic single-layer sweep (`N_in = N_out`).
    pub channels: Vec<usize>,
    pub sparsities: Vec<f64>,
    pub kernel_size: usize,
    pub voxels: usize,
    pub fill: f64,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            channels: vec![64, 256],
            sparsities: vec![0.0, 0.9, 0.99],
            kernel_size: 3,
            voxels: 10_000,
            fill: 0.3,
            reps: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub task: Task,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub prune: PruneConfig,
    pub dataset: DatasetConfig,
    pub bench: BenchSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("ws3-out"),
            task: Task::Semseg,
            model: ModelConfig::default(),
            trainer: TrainerConfig::default(),
            prune: PruneConfig::default(),
            dataset: DatasetConfig::default(),
            bench: BenchSettings::default(),
        }
    }
}

impl RunConfig {
    /// Reads and validates a config file; problems are reported against `path`.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: format!("cannot read: {e}"),
        })?;
        let cfg = Self::parse(&text).map_err(|message| CliError::Config { path: path.to_path_buf(), message })?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every value and path without starting any work.
    pub fn validate(&self) -> Result<(), String> {
        self.preset()?;
        if !(self.model.width > 0.0 && self.model.width.is_finite()) {
            return Err(format!("model.width must be positive, got {}", self.model.width));
        }
        self.trainer.validate().map_err(|e| format!("trainer: {e}"))?;
        self.criterion()?;
        if !(0.0..1.0).contains(&self.prune.target_rate) {
            return Err(format!("prune.target_rate must be in [0, 1), got {}", self.prune.target_rate));
        }
        if self.prune.steps == 0 {
            return Err("prune.steps must be >= 1".into());
        }
        for lr in [self.prune.fine_tune_lr, self.prune.structural_lr].into_iter().flatten() {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(format!("prune learning rates must be positive, got {lr}"));
            }
        }
        match &self.dataset {
            DatasetConfig::Synthetic { train_seeds, eval_seeds, scene } => {
                scene.validate().map_err(|e| format!("dataset.scene: {e}"))?;
                if train_seeds[0] >= train_seeds[1] {
                    return Err(format!("dataset.train_seeds is an empty range: {train_seeds:?}"));
                }
                if eval_seeds[0] >= eval_seeds[1] {
                    return Err(format!("dataset.eval_seeds is an empty range: {eval_seeds:?}"));
                }
            }
            DatasetConfig::Voxset { train, eval, num_classes, voxel_size } => {
                if train.is_empty() {
                    return Err("dataset.train lists no voxset files".into());
                }
                if let Some(p) = train.iter().chain(eval).find(|p| !p.is_file()) {
                    return Err(format!("dataset file {} does not exist", p.display()));
                }
                if *num_classes < 2 {
                    return Err("dataset.num_classes must be >= 2".into());
                }
                if !(*voxel_size > 0.0) {
                    return Err("dataset.voxel_size must be positive".into());
                }
            }
        }
        if self.bench.reps < 3 {
            return Err(format!("bench.reps must be >= 3, got {}", self.bench.reps));
        }
        if self.bench.channels.is_empty() || self.bench.sparsities.is_empty() {
            return Err("bench.channels and bench.sparsities must be non-empty".into());
        }
        if let Some(s) = self.bench.sparsities.iter().find(|s| !(0.0..1.0).contains(*s)) {
            return Err(format!("bench sparsity must be in [0, 1), got {s}"));
        }
        Ok(())
    }

    pub fn preset(&self) -> Result<Preset, String> {
        Preset::parse(&self.model.preset).ok_or_else(|| format!("unknown preset {:?}", self.model.preset))
    }

    pub fn criterion(&self) -> Result<PruneCriterion, String> {
        self.prune.criterion.parse().map_err(|e: ws3_core::Error| e.to_string())
    }

    pub fn num_classes(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Synthetic { scene, .. } => scene.num_classes,
            DatasetConfig::Voxset { num_classes, .. } => *num_classes,
        }
    }

    pub fn network_spec(&self, in_channels: usize) -> Result<NetworkSpec, String> {
        Ok(NetworkSpec::preset(self.preset()?)
            .with_width(self.model.width)
            .with_io(in_channels, self.num_classes())
            .with_offset_head(self.task == Task::Insseg)
            .with_seed(self.model.seed))
    }
}

pub(crate) fn seed_range(r: [u64; 2]) -> Range<u64> {
    r[0]..r[1]
}
