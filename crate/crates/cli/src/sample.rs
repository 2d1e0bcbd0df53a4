//! The `sample` command: conditions in, PPM frames and a manifest out.

use std::path::{Path, PathBuf};

use mvd_core::codec::{Codec, LatentTensor};
use mvd_core::cond::CondInputs;
use mvd_core::flow::SamplerConfig;
use mvd_core::scene::io::scene_to_json;
use mvd_core::scene::Scene;
use mvd_core::train::Model;
use mvd_core::video::VideoClip;
use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, RunConfig};
use crate::error::{CliError, Result};
use crate::output::{ppm_bytes, write_file};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scene_sha256: String,
    pub config_sha256: String,
    pub checkpoint_sha256: String,
    pub seed: u64,
    pub steps: usize,
    pub cfg_scale: f64,
    pub frames: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub latent_frames: usize,
    /// Relative to the manifest; `view{c}_t{t}.ppm`.
    pub files: Vec<String>,
}

pub struct SampleOutcome {
    pub clip: VideoClip,
    pub latent: LatentTensor,
    pub manifest: Manifest,
    pub dir: PathBuf,
}

/// Generates the pixel clip for `scene` in memory.
pub fn sample_clip(model: &Model, scene: &Scene, sampler: &SamplerConfig) -> Result<(VideoClip, LatentTensor, usize)> {
    let s = model.codec.spatial_ratio;
    let unit = s * model.config.patch;
    if !scene.image_height.is_multiple_of(unit) || !scene.image_width.is_multiple_of(unit) {
        return Err(CliError::Usage(format!(
            "scene images {}x{} are not a multiple of {unit}",
            scene.image_height, scene.image_width
        )));
    }
    let cond = CondInputs::from_scene(scene)?;
    let (latent, steps) = model.sample(&cond, (scene.image_height / s, scene.image_width / s), sampler)?;
    let clip = Codec::new(model.codec)?.decode(&latent)?;
    Ok((clip, latent, steps))
}

/// Refuses a model built for a different architecture or codec.
pub fn check_model(model: &Model, cfg: &RunConfig) -> Result<()> {
    if model.config != cfg.model {
        return Err(CliError::Incompatible("checkpoint `model` differs from the config".into()));
    }
    if model.codec != cfg.codec {
        return Err(CliError::Incompatible("checkpoint `codec` differs from the config".into()));
    }
    Ok(())
}

/// Samples `scene` and writes one PPM per (view, frame) plus the manifest
/// into `dir`.
pub fn run_sample(cfg: &RunConfig, model: &Model, checkpoint_sha256: &str, scene: &Scene, dir: &Path) -> Result<SampleOutcome> {
    check_model(model, cfg)?;
    let (clip, latent, steps) = sample_clip(model, scene, &cfg.sampler)?;
    let mut files = Vec::new();
    for c in 0..clip.views() {
        for t in 0..clip.frames() {
            let name = format!("view{c}_t{t:03}.ppm");
            write_file(&dir.join(&name), &ppm_bytes(&clip, t, c))?;
            files.push(name);
        }
    }
    let manifest = Manifest {
        scene_sha256: sha256_hex(scene_to_json(scene)?.as_bytes()),
        config_sha256: cfg.hash()?,
        checkpoint_sha256: checkpoint_sha256.to_string(),
        seed: cfg.sampler.seed,
        steps,
        cfg_scale: cfg.sampler.cfg_scale,
        frames: clip.frames(),
        views: clip.views(),
        height: clip.height(),
        width: clip.width(),
        latent_frames: latent.latent_frames(),
        files,
    };
    write_file(&dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(SampleOutcome {
        clip,
        latent,
        manifest,
        dir: dir.to_path_buf(),
    })
}
