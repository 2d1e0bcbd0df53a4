//! Training clips and the per-stage batch order.

use std::path::Path;

use mvd_core::codec::{latent_frame_count, Codec};
use mvd_core::scene::io::scene_from_json;
use mvd_core::scene::{synth_scene, Scene};
use mvd_core::train::TrainSample;
use mvd_sched::bucket::{
    apply_plan, assign_buckets, bucketize, epoch_batches, repeat_sparse, trace, Batch, BucketSpec, EpochSchedule,
    StagePlan, TraceRecord,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub type ClipKey = (usize, usize, usize);

pub struct Clip {
    pub key: ClipKey,
    pub scene: Scene,
    pub sample: TrainSample,
}

/// Every clip any stage trains on.
pub struct Dataset {
    pub clips: Vec<Clip>,
}

fn key_of(scene: &Scene) -> ClipKey {
    (scene.num_frames(), scene.image_height, scene.image_width)
}

/// Serialized scenes (`*.json`) of a directory, in file-name order.
pub fn load_scene_dir(dir: &Path) -> Result<Vec<Scene>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            Ok(scene_from_json(&text)?)
        })
        .collect()
}

impl Dataset {
    /// Synthetic clips for every distinct bucket shape (`data.clips` each,
    /// seeds `seeds.data + i`), or the scenes of `data.scene_dir`.
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let codec = Codec::new(cfg.codec)?;
        let scenes = match &cfg.data.scene_dir {
            Some(dir) => load_scene_dir(dir)?,
            None => {
                let mut shapes: Vec<ClipKey> = cfg.stages.iter().flat_map(|s| s.buckets.iter().map(BucketSpec::key)).collect();
                shapes.sort();
                shapes.dedup();
                let mut out = Vec::new();
                for (t, h, w) in shapes {
                    let knobs = cfg.knobs_for(h, w);
                    for i in 0..cfg.data.clips as u64 {
                        out.push(synth_scene(cfg.seeds.data + i, t, cfg.data.views, &knobs)?);
                    }
                }
                out
            }
        };
        let clips = scenes
            .into_iter()
            .map(|scene| {
                let sample = TrainSample::from_scene(&scene, &codec)?;
                Ok(Clip {
                    key: key_of(&scene),
                    scene,
                    sample,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { clips })
    }

    pub fn samples(&self) -> Vec<&TrainSample> {
        self.clips.iter().map(|c| &c.sample).collect()
    }
}

/// One stage with batch sizes fixed and its clips grouped by bucket.
pub struct StageRun {
    pub plan: StagePlan,
    /// Dataset indices per bucket.
    pub members: Vec<Vec<usize>>,
    pub repeat: Vec<usize>,
    pub workers: usize,
    seed: u64,
}

/// Stage plans ready to run, with cost-derived batch sizes applied.
pub fn stage_runs(cfg: &RunConfig, data: &Dataset) -> Result<Vec<StageRun>> {
    cfg.stages
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut plan = s.clone();
            if let Some(target) = cfg.schedule.target_seconds {
                apply_plan(&mut plan.buckets, target)?;
            }
            let keys: Vec<ClipKey> = plan.buckets.iter().map(BucketSpec::key).collect();
            let ids: Vec<usize> = (0..data.clips.len()).filter(|&k| keys.contains(&data.clips[k].key)).collect();
            let local: Vec<ClipKey> = ids.iter().map(|&k| data.clips[k].key).collect();
            let members: Vec<Vec<usize>> = bucketize(&local, &plan.buckets)?
                .into_iter()
                .map(|m| m.into_iter().map(|j| ids[j]).collect())
                .collect();
            if let Some(j) = members.iter().position(Vec::is_empty) {
                return Err(CliError::config(format!("stages[{i}].buckets[{j}]"), "no clips of this shape"));
            }
            let batches: Vec<usize> = members
                .iter()
                .zip(&plan.buckets)
                .map(|(m, b)| m.len().div_ceil(b.batch))
                .collect();
            let repeat = repeat_sparse(&batches, cfg.schedule.min_ratio)
                .iter()
                .map(|r| r.factor)
                .collect();
            Ok(StageRun {
                plan,
                members,
                repeat,
                workers: cfg.schedule.workers,
                seed: cfg.seeds.train ^ ((i as u64 + 1) << 32),
            })
        })
        .collect()
}

impl StageRun {
    /// Batches of epoch `e` in execution order, and the group schedule.
    /// Worker groups are served one after another within an iteration.
    pub fn epoch(&self, e: usize) -> Result<(Vec<Batch>, EpochSchedule)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(e as u64);
        let members: Vec<Vec<usize>> = self
            .members
            .iter()
            .map(|m| {
                let mut m = m.clone();
                m.shuffle(&mut rng);
                m
            })
            .collect();
        let sizes: Vec<usize> = self.plan.buckets.iter().map(|b| b.batch).collect();
        let per_bucket = epoch_batches(&members, &sizes, &self.repeat)?;
        let counts: Vec<usize> = per_bucket.iter().map(Vec::len).collect();
        let schedule = assign_buckets(&counts, self.workers, self.plan.sp_size)?;
        let mut next = vec![0; per_bucket.len()];
        let mut order = Vec::new();
        for row in &schedule.iterations {
            for &k in row.iter().flatten() {
                order.push(per_bucket[k][next[k]].clone());
                next[k] += 1;
            }
        }
        Ok((order, schedule))
    }

    pub fn epoch_len(&self) -> Result<usize> {
        Ok(self.epoch(0)?.0.len())
    }

    /// Estimated bytes each worker exchanges per iteration on bucket `k`:
    /// four head/sequence swaps around every self-attention sub-layer.
    pub fn exchange_bytes(&self, cfg: &RunConfig, k: usize) -> usize {
        let p = self.plan.sp_size;
        if p == 1 {
            return 0;
        }
        let b = &self.plan.buckets[k];
        let tl = latent_frame_count(b.frames).unwrap_or(0);
        let unit = cfg.codec.spatial_ratio * cfg.model.patch;
        let tokens = tl * cfg.data.views * (b.height / unit) * (b.width / unit);
        let layers = 3 * (cfg.model.depth + cfg.model.control_depth);
        let per_swap = (p - 1) * tokens.div_ceil(p) * (cfg.model.width / p) * std::mem::size_of::<f64>();
        b.batch * layers * 4 * per_swap
    }
}

#[derive(Serialize)]
pub struct StageTrace {
    pub stage: u8,
    #[serde(flatten)]
    pub record: TraceRecord,
}

/// First-epoch worker trace of every stage.
pub fn stage_traces(cfg: &RunConfig, runs: &[StageRun]) -> Result<Vec<StageTrace>> {
    let mut out = Vec::new();
    for run in runs {
        let (_, schedule) = run.epoch(0)?;
        let bytes: Vec<usize> = (0..run.plan.buckets.len()).map(|k| run.exchange_bytes(cfg, k)).collect();
        out.extend(trace(&schedule, &bytes).into_iter().map(|record| StageTrace {
            stage: run.plan.stage,
            record,
        }));
    }
    Ok(out)
}
