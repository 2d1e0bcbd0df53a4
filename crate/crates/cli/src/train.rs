//! The `train` command: stage plans in order over the bucket schedule.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mvd_core::train::{eval_loss, Model, TrainSample, Trainer};
use mvd_sched::bucket::{to_jsonl, Batch};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{stage_runs, stage_traces, Dataset, StageRun};
use crate::error::{CliError, Result};
use crate::output::{load_checkpoint, save_checkpoint, write_file, JsonLines};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const LAST_CHECKPOINT: &str = "checkpoints/last.ckpt";

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
    pub lr: f64,
    /// `frames x height x width`.
    pub bucket: String,
    pub wall_ms: u64,
}

/// Held-in loss with fixed noise; `step` counts completed updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub loss: f64,
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<LogRecord>,
    pub evals: Vec<EvalRecord>,
    pub data: Dataset,
    pub checkpoint: PathBuf,
}

/// Refuses a checkpoint whose model, codec or optimizer differ from `cfg`.
pub fn check_compatible(tr: &Trainer, cfg: &RunConfig) -> Result<()> {
    let m = &tr.model;
    let fields = [
        ("model", m.config != cfg.model),
        ("codec", m.codec != cfg.codec),
        ("optim", tr.optim.cfg != cfg.optim),
        ("seeds.train", tr.seed != cfg.seeds.train),
        ("train.cond_drop", tr.cond_drop != cfg.train.cond_drop),
    ];
    match fields.iter().find(|(_, differs)| *differs) {
        Some((key, _)) => Err(CliError::Incompatible(format!("checkpoint `{key}` differs from the config"))),
        None => Ok(()),
    }
}

/// Fresh trainer with latent statistics fitted on `data`.
pub fn init_trainer(cfg: &RunConfig, data: &Dataset) -> Result<Trainer> {
    let mut model = Model::new(cfg.model.clone(), cfg.codec, cfg.seeds.model)?;
    let latents: Vec<_> = data.clips.iter().map(|c| &c.sample.latent).collect();
    model.fit_normalization(&latents);
    Ok(Trainer::new(model, cfg.optim.clone(), cfg.seeds.train, cfg.train.cond_drop)?)
}

pub fn evaluate(tr: &Trainer, cfg: &RunConfig, data: &Dataset) -> Result<f64> {
    Ok(eval_loss(&tr.model, &data.samples(), cfg.seeds.train)?)
}

/// Stage and batch of global step `step`, reusing the cached epoch.
struct BatchOrder<'a> {
    runs: &'a [StageRun],
    starts: Vec<usize>,
    cache: Option<(usize, usize, Vec<Batch>)>,
}

impl<'a> BatchOrder<'a> {
    fn new(cfg: &RunConfig, runs: &'a [StageRun]) -> Self {
        let mut starts = Vec::new();
        let mut at = 0;
        for s in &cfg.stages {
            starts.push(at);
            at += s.steps;
        }
        Self { runs, starts, cache: None }
    }

    fn at(&mut self, step: usize) -> Result<(usize, Batch)> {
        let stage = self.starts.iter().rposition(|&s| s <= step).expect("step inside the plan");
        let local = step - self.starts[stage];
        let run = &self.runs[stage];
        let len = run.epoch_len()?;
        let epoch = local / len;
        if !matches!(&self.cache, Some((s, e, _)) if *s == stage && *e == epoch) {
            self.cache = Some((stage, epoch, run.epoch(epoch)?.0));
        }
        let order = &self.cache.as_ref().expect("filled").2;
        Ok((stage, order[local % len].clone()))
    }
}

/// Trains `cfg` writing logs and checkpoints under `dir`.
pub fn run_train(cfg: &RunConfig, dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = Dataset::build(cfg)?;
    let runs = stage_runs(cfg, &data)?;
    let total = cfg.total_steps();
    let mut tr = match &opts.resume {
        Some(path) => {
            let tr = load_checkpoint(path)?;
            check_compatible(&tr, cfg)?;
            if tr.step() > total {
                return Err(CliError::Incompatible(format!(
                    "checkpoint at step {} is past the plan's {total} steps",
                    tr.step()
                )));
            }
            tr
        }
        None => init_trainer(cfg, &data)?,
    };
    write_file(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    write_file(&dir.join(TRACE_FILE), to_jsonl(&stage_traces(cfg, &runs)?)?.as_bytes())?;
    let append = opts.resume.is_some();
    let mut log_file = JsonLines::create(&dir.join(LOG_FILE), append)?;
    let mut eval_file = JsonLines::create(&dir.join(EVAL_FILE), append)?;
    let mut log = Vec::new();
    let mut evals = Vec::new();
    let mut record_eval = |tr: &Trainer, evals: &mut Vec<EvalRecord>| -> Result<()> {
        let rec = EvalRecord {
            step: tr.step(),
            loss: evaluate(tr, cfg, &data)?,
        };
        eval_file.write(&rec)?;
        eval_file.flush()?;
        if opts.verbose {
            eprintln!("eval step {:>5}  loss {:.5}", rec.step, rec.loss);
        }
        evals.push(rec);
        Ok(())
    };
    if tr.step() == 0 {
        record_eval(&tr, &mut evals)?;
    }
    let mut order = BatchOrder::new(cfg, &runs);
    let clock = Instant::now();
    while tr.step() < total {
        let step = tr.step();
        let (stage, batch) = order.at(step)?;
        let refs: Vec<&TrainSample> = batch.clips.iter().map(|&i| &data.clips[i].sample).collect();
        let stats = tr.train_step(&refs)?;
        let b = &runs[stage].plan.buckets[batch.bucket];
        let rec = LogRecord {
            step,
            stage: runs[stage].plan.stage,
            loss: stats.loss,
            lr: stats.lr,
            bucket: format!("{}x{}x{}", b.frames, b.height, b.width),
            wall_ms: clock.elapsed().as_millis() as u64,
        };
        log_file.write(&rec)?;
        if opts.verbose && step % 10 == 0 {
            eprintln!("step {step:>5}  stage {}  loss {:.5}  lr {:.2e}  {}", rec.stage, rec.loss, rec.lr, rec.bucket);
        }
        log.push(rec);
        let done = tr.step();
        if cfg.train.eval_every > 0 && done % cfg.train.eval_every == 0 && done < total {
            record_eval(&tr, &mut evals)?;
        }
        if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 {
            save_checkpoint(&tr, &dir.join(format!("checkpoints/step_{done:06}.ckpt")))?;
        }
    }
    log_file.flush()?;
    if evals.last().is_none_or(|e| e.step != tr.step()) {
        record_eval(&tr, &mut evals)?;
    }
    let checkpoint = dir.join(LAST_CHECKPOINT);
    save_checkpoint(&tr, &checkpoint)?;
    Ok(TrainOutcome {
        trainer: tr,
        log,
        evals,
        data,
        checkpoint,
    })
}
