//! Buckets of homogeneous clips, batch sizing by measured cost, sparse
//! bucket repetition and per-group assignment over an epoch.

use mvd_core::codec::is_admissible;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Buckets smaller than this fraction of the largest are repeated.
pub const DEFAULT_MIN_RATIO: f64 = 0.25;

/// One clip shape with its batch size and cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    #[serde(default = "one")]
    pub batch: usize,
    /// Measured seconds per iteration at batch 1.
    pub seconds_per_iter: f64,
}

fn one() -> usize {
    1
}

impl BucketSpec {
    pub fn validate(&self) -> Result<()> {
        if !is_admissible(self.frames) {
            return Err(Error::Config(format!(
                "bucket {}x{}x{}: frame count must be 1, 8n or 8n+1",
                self.frames, self.height, self.width
            )));
        }
        if self.height == 0 || self.width == 0 || self.batch == 0 {
            return Err(Error::Config("bucket sizes and batch must be positive".into()));
        }
        if !(self.seconds_per_iter > 0.0) {
            return Err(Error::Config(format!(
                "bucket {}x{}x{}: cost must be positive",
                self.frames, self.height, self.width
            )));
        }
        Ok(())
    }

    /// `(frames, height, width)`.
    pub fn key(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }

    /// Pixels per clip, the progression measure between stages.
    pub fn volume(&self) -> usize {
        self.frames * self.height * self.width
    }
}

/// One training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage: u8,
    pub buckets: Vec<BucketSpec>,
    pub steps: usize,
    #[serde(default = "one")]
    pub sp_size: usize,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!("stage id {} outside 1..=3", self.stage)));
        }
        if self.buckets.is_empty() || self.sp_size == 0 {
            return Err(Error::Config(format!("stage {}: needs buckets and sp_size >= 1", self.stage)));
        }
        for b in &self.buckets {
            b.validate()?;
        }
        Ok(())
    }

    fn largest(&self) -> usize {
        self.buckets.iter().map(BucketSpec::volume).max().unwrap_or(0)
    }
}

/// Stages must be numbered 1, 2, ... in order and never shrink the largest
/// clip: training starts small and grows.
pub fn validate_stages(stages: &[StagePlan]) -> Result<()> {
    for (i, s) in stages.iter().enumerate() {
        s.validate()?;
        if usize::from(s.stage) != i + 1 {
            return Err(Error::Config(format!("stage {} listed at position {}", s.stage, i + 1)));
        }
        if i > 0 && s.largest() < stages[i - 1].largest() {
            return Err(Error::Config(format!(
                "stage {} has smaller clips than stage {}",
                s.stage,
                stages[i - 1].stage
            )));
        }
    }
    Ok(())
}

/// `max(1, floor(target / cost))` per bucket.
pub fn plan_buckets(costs: &[f64], target_seconds: f64) -> Result<Vec<usize>> {
    if !(target_seconds > 0.0) {
        return Err(Error::Config("target iteration time must be positive".into()));
    }
    costs
        .iter()
        .map(|&c| {
            if !(c > 0.0) {
                return Err(Error::Config(format!("non-positive bucket cost {c}")));
            }
            // The tolerance keeps exact ratios such as 30 / 7.5 from
            // rounding down.
            Ok(((target_seconds / c) * (1.0 + 1e-12)).floor().max(1.0) as usize)
        })
        .collect()
}

/// Sets `batch` on every bucket from its cost.
pub fn apply_plan(buckets: &mut [BucketSpec], target_seconds: f64) -> Result<()> {
    let costs: Vec<f64> = buckets.iter().map(|b| b.seconds_per_iter).collect();
    for (b, n) in buckets.iter_mut().zip(plan_buckets(&costs, target_seconds)?) {
        b.batch = n;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Repeated {
    pub factor: usize,
    pub count: usize,
}

/// Repeats every non-empty bucket whose count is below
/// `min_ratio * max(counts)` by the smallest integer factor reaching it.
pub fn repeat_sparse(counts: &[usize], min_ratio: f64) -> Vec<Repeated> {
    let max = counts.iter().copied().max().unwrap_or(0) as f64;
    let floor = min_ratio.max(0.0) * max;
    counts
        .iter()
        .map(|&c| {
            let factor = if c == 0 || c as f64 >= floor {
                1
            } else {
                (floor / c as f64).ceil() as usize
            };
            Repeated {
                factor,
                count: c * factor,
            }
        })
        .collect()
}

/// Indices of the clips in each bucket; every clip `(frames, height,
/// width)` must match exactly one bucket.
pub fn bucketize(clips: &[(usize, usize, usize)], buckets: &[BucketSpec]) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); buckets.len()];
    for (i, clip) in clips.iter().enumerate() {
        let mut hits = buckets.iter().enumerate().filter(|(_, b)| b.key() == *clip);
        match (hits.next(), hits.next()) {
            (Some((k, _)), None) => out[k].push(i),
            (None, _) => return Err(Error::Config(format!("clip {i} {clip:?} matches no bucket"))),
            _ => return Err(Error::Config(format!("clip {i} {clip:?} matches several buckets"))),
        }
    }
    Ok(out)
}

/// One homogeneous batch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub bucket: usize,
    pub clips: Vec<usize>,
}

/// Batches of one epoch per bucket: members repeated `repeat[k]` times,
/// chunked by `batch[k]`, keeping a short final batch.
pub fn epoch_batches(members: &[Vec<usize>], batch: &[usize], repeat: &[usize]) -> Result<Vec<Vec<Batch>>> {
    if members.len() != batch.len() || members.len() != repeat.len() || batch.contains(&0) {
        return Err(Error::Config("members, batch sizes and repeats disagree".into()));
    }
    Ok(members
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let all: Vec<usize> = std::iter::repeat_n(m.iter().copied(), repeat[k]).flatten().collect();
            all.chunks(batch[k])
                .map(|c| Batch {
                    bucket: k,
                    clips: c.to_vec(),
                })
                .collect()
        })
        .collect())
}

/// Which bucket each worker group serves in each iteration of an epoch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSchedule {
    pub workers: usize,
    pub sp_size: usize,
    /// `iterations[i][g]`: bucket of group `g`, `None` once work runs out.
    pub iterations: Vec<Vec<Option<usize>>>,
}

impl EpochSchedule {
    pub fn groups(&self) -> usize {
        self.workers / self.sp_size
    }

    /// Bucket per worker; the workers of a group are contiguous.
    pub fn worker_buckets(&self, iteration: usize) -> Vec<Option<usize>> {
        (0..self.workers)
            .map(|w| self.iterations[iteration][w / self.sp_size])
            .collect()
    }

    /// Group-iterations spent on `bucket`.
    pub fn group_iterations(&self, bucket: usize) -> usize {
        self.iterations.iter().flatten().filter(|&&b| b == Some(bucket)).count()
    }

    /// Every worker group loads a single bucket type in every iteration.
    pub fn single_type_per_group(&self) -> bool {
        (0..self.iterations.len()).all(|i| {
            self.worker_buckets(i)
                .chunks(self.sp_size)
                .all(|g| g.iter().all(|b| *b == g[0]))
        })
    }
}

/// Spreads `batch_counts[k]` batches of each bucket over `workers /
/// sp_size` groups. Batches are interleaved by smooth weighted round robin,
/// so every prefix of the epoch is close to the overall proportions.
pub fn assign_buckets(batch_counts: &[usize], workers: usize, sp_size: usize) -> Result<EpochSchedule> {
    if sp_size == 0 || workers == 0 || !workers.is_multiple_of(sp_size) {
        return Err(Error::Indivisible {
            what: "worker pool",
            len: workers,
            workers: sp_size,
        });
    }
    let groups = workers / sp_size;
    let total: usize = batch_counts.iter().sum();
    let mut credit = vec![0i64; batch_counts.len()];
    let mut left = batch_counts.to_vec();
    let mut order = Vec::with_capacity(total);
    for _ in 0..total {
        for (k, c) in credit.iter_mut().enumerate() {
            if left[k] > 0 {
                *c += batch_counts[k] as i64;
            }
        }
        let pick = (0..credit.len())
            .filter(|&k| left[k] > 0)
            .max_by_key(|&k| (credit[k], std::cmp::Reverse(k)))
            .expect("work left");
        credit[pick] -= total as i64;
        left[pick] -= 1;
        order.push(pick);
    }
    let iterations = order
        .chunks(groups)
        .map(|c| {
            let mut row: Vec<Option<usize>> = c.iter().map(|&k| Some(k)).collect();
            row.resize(groups, None);
            row
        })
        .collect();
    Ok(EpochSchedule {
        workers,
        sp_size,
        iterations,
    })
}

/// One line of the per-iteration simulator trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub worker: usize,
    pub bucket: Option<usize>,
    pub message_bytes: usize,
}

/// Trace of an epoch given each bucket's exchange volume per worker.
pub fn trace(schedule: &EpochSchedule, bytes_per_worker: &[usize]) -> Vec<TraceRecord> {
    let mut out = Vec::new();
    for i in 0..schedule.iterations.len() {
        for (w, b) in schedule.worker_buckets(i).into_iter().enumerate() {
            out.push(TraceRecord {
                iteration: i,
                worker: w,
                bucket: b,
                message_bytes: b.map_or(0, |k| if schedule.sp_size > 1 { bytes_per_worker[k] } else { 0 }),
            });
        }
    }
    out
}

/// One JSON object per line.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}
