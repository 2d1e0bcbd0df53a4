//! Run configuration: TOML schema, validation with key paths, presets.

use std::path::{Path, PathBuf};

use mvd_core::codec::CodecSpec;
use mvd_core::flow::{SamplerConfig, COND_DROP_RATE};
use mvd_core::mvdit::ModelConfig;
use mvd_core::optim::OptimConfig;
use mvd_core::scene::SceneKnobs;
use mvd_sched::bucket::{validate_stages, BucketSpec, StagePlan, DEFAULT_MIN_RATIO};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Environment variable that replaces `output_dir`.
pub const OUT_ENV: &str = "MVD_OUT";

pub const PRESETS: [&str; 3] = ["overfit16", "stage-mini", "spcheck"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub codec: CodecSpec,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub stages: Vec<StagePlan>,
}

fn wrap(path: &'static str) -> impl Fn(mvd_core::Error) -> CliError {
    move |e| CliError::config(path, e)
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Parameter initialization.
    pub model: u64,
    /// Noise, timesteps and condition dropout.
    pub train: u64,
    /// First synthetic scene seed; clip `i` uses `data + i`.
    pub data: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            model: 0,
            train: 42,
            data: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub cond_drop: f64,
    /// Held-in evaluation period in steps; 0 evaluates only at the ends.
    pub eval_every: usize,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            cond_drop: COND_DROP_RATE,
            eval_every: 25,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Simulated workers; groups of `sp_size` share one batch.
    pub workers: usize,
    /// When set, bucket batch sizes are derived from their costs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_seconds: Option<f64>,
    pub min_ratio: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            target_seconds: None,
            min_ratio: DEFAULT_MIN_RATIO,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Synthetic clips per bucket.
    pub clips: usize,
    pub views: usize,
    /// Image and map sizes are overridden per bucket.
    pub knobs: SceneKnobs,
    /// Serialized scenes to train on instead of synthetic ones.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            clips: 16,
            views: 2,
            knobs: SceneKnobs::default(),
            scene_dir: None,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        preset("overfit16").expect("built-in preset")
    }
}

fn bucket(frames: usize, height: usize, width: usize, batch: usize, cost: f64) -> BucketSpec {
    BucketSpec {
        height,
        width,
        frames,
        batch,
        seconds_per_iter: cost,
    }
}

fn desk_model() -> ModelConfig {
    ModelConfig {
        depth: 2,
        control_depth: 1,
        width: 32,
        heads: 2,
        ..ModelConfig::default()
    }
}

fn desk_optim() -> OptimConfig {
    OptimConfig {
        lr: 2e-3,
        warmup_steps: 20,
        ..OptimConfig::default()
    }
}

/// Built-in configurations sized for a desktop.
pub fn preset(name: &str) -> Result<RunConfig> {
    let base = RunConfig {
        output_dir: default_out(),
        seeds: Seeds::default(),
        model: desk_model(),
        codec: CodecSpec::default(),
        optim: desk_optim(),
        sampler: SamplerConfig::default(),
        train: TrainConfig::default(),
        schedule: ScheduleConfig::default(),
        data: DataConfig::default(),
        stages: Vec::new(),
    };
    let cfg = match name {
        "overfit16" => RunConfig {
            data: DataConfig {
                clips: 16,
                knobs: SceneKnobs {
                    min_boxes: 1,
                    max_boxes: 1,
                    box_distance: [6.0, 12.0],
                    ..SceneKnobs::default()
                },
                ..DataConfig::default()
            },
            stages: vec![StagePlan {
                stage: 1,
                buckets: vec![bucket(9, 32, 56, 4, 1.0)],
                steps: 900,
                sp_size: 1,
            }],
            ..base
        },
        // Costs are proportional to latent frames, so batch sizes come out
        // as 4 images or 1 clip per iteration.
        "stage-mini" => RunConfig {
            data: DataConfig {
                clips: 8,
                ..DataConfig::default()
            },
            schedule: ScheduleConfig {
                target_seconds: Some(1.0),
                ..ScheduleConfig::default()
            },
            stages: vec![
                StagePlan {
                    stage: 1,
                    buckets: vec![bucket(1, 32, 56, 1, 0.25)],
                    steps: 40,
                    sp_size: 1,
                },
                StagePlan {
                    stage: 2,
                    buckets: vec![bucket(1, 32, 56, 1, 0.25), bucket(9, 32, 56, 1, 0.75)],
                    steps: 40,
                    sp_size: 1,
                },
                StagePlan {
                    stage: 3,
                    buckets: vec![
                        bucket(1, 32, 56, 1, 0.25),
                        bucket(9, 32, 56, 1, 0.75),
                        bucket(17, 32, 56, 1, 1.25),
                    ],
                    steps: 40,
                    sp_size: 1,
                },
            ],
            ..base
        },
        "spcheck" => RunConfig {
            model: ModelConfig {
                heads: 4,
                ..desk_model()
            },
            data: DataConfig {
                clips: 4,
                ..DataConfig::default()
            },
            schedule: ScheduleConfig {
                workers: 4,
                ..ScheduleConfig::default()
            },
            stages: (1..=3u8)
                .map(|s| StagePlan {
                    stage: s,
                    buckets: vec![bucket(9, 32, 56, 1, 0.75)],
                    steps: 4,
                    sp_size: 1 << (s - 1),
                })
                .collect(),
            ..base
        },
        _ => {
            return Err(CliError::Usage(format!(
                "unknown preset `{name}` (known: {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(cfg)
}

impl RunConfig {
    /// Parses TOML, rejecting unknown keys and naming the offending path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::config(if path.is_empty() { ".".into() } else { path }, e.into_inner().message().trim())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::config(".", e))
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    /// `output_dir`, unless the environment overrides it.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUT_ENV) {
            Some(p) if !p.is_empty() => PathBuf::from(p),
            _ => self.output_dir.clone(),
        }
    }

    /// Latent grid `(h', w')` of an image size, or an error naming `key`.
    pub fn latent_grid(&self, height: usize, width: usize, key: &str) -> Result<(usize, usize)> {
        let unit = self.codec.spatial_ratio * self.model.patch;
        if height == 0 || width == 0 || !height.is_multiple_of(unit) || !width.is_multiple_of(unit) {
            return Err(CliError::config(
                key,
                format!("{height}x{width} is not a multiple of {unit} (codec block x patch)"),
            ));
        }
        Ok((height / self.codec.spatial_ratio, width / self.codec.spatial_ratio))
    }

    /// Scene knobs for one image size; the map keeps its metric extent and
    /// gets `map_patch` cells per token.
    pub fn knobs_for(&self, height: usize, width: usize) -> SceneKnobs {
        let k = &self.data.knobs;
        let unit = self.codec.spatial_ratio * self.model.patch;
        let rows = height / unit * self.model.map_patch[0];
        let cols = width / unit * self.model.map_patch[1];
        SceneKnobs {
            image_height: height,
            image_width: width,
            map_rows: rows,
            map_cols: cols,
            meters_per_cell: k.meters_per_cell * k.map_rows as f64 / rows as f64,
            ..k.clone()
        }
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(wrap("model"))?;
        self.codec.validate().map_err(wrap("codec"))?;
        self.optim.validate().map_err(wrap("optim"))?;
        self.sampler.validate().map_err(wrap("sampler"))?;
        self.data.knobs.validate().map_err(wrap("data.knobs"))?;
        if self.model.latent_channels != self.codec.latent_channels {
            return Err(CliError::config(
                "model.latent_channels",
                format!("{} differs from codec.latent_channels {}", self.model.latent_channels, self.codec.latent_channels),
            ));
        }
        if self.data.clips == 0 {
            return Err(CliError::config("data.clips", "must be at least 1"));
        }
        if self.data.views == 0 {
            return Err(CliError::config("data.views", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.train.cond_drop) {
            return Err(CliError::config("train.cond_drop", "must lie in [0, 1]"));
        }
        if self.schedule.workers == 0 {
            return Err(CliError::config("schedule.workers", "must be at least 1"));
        }
        if let Some(t) = self.schedule.target_seconds {
            if !(t > 0.0) {
                return Err(CliError::config("schedule.target_seconds", "must be positive"));
            }
        }
        if !(self.schedule.min_ratio >= 0.0) {
            return Err(CliError::config("schedule.min_ratio", "must be non-negative"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate().map_err(|e| CliError::config(format!("stages[{i}]"), e))?;
            if !self.schedule.workers.is_multiple_of(s.sp_size) {
                return Err(CliError::config(
                    format!("stages[{i}].sp_size"),
                    format!("{} does not divide schedule.workers {}", s.sp_size, self.schedule.workers),
                ));
            }
            if !self.model.heads.is_multiple_of(s.sp_size) {
                return Err(CliError::config(
                    format!("stages[{i}].sp_size"),
                    format!("{} does not divide model.heads {}", s.sp_size, self.model.heads),
                ));
            }
            for (j, b) in s.buckets.iter().enumerate() {
                self.latent_grid(b.height, b.width, &format!("stages[{i}].buckets[{j}]"))?;
            }
        }
        validate_stages(&self.stages).map_err(|e| CliError::config("stages", e))?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
