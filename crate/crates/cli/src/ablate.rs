//! The `ablate` command: identical training runs for each box encoder
//! mode, compared by held-in loss and by box-token motion.

use std::path::Path;

use mvd_core::cond::{encode_boxes_st, BoxEncoderMode, PaddedBoxes};
use mvd_core::params::Bound;
use mvd_core::train::Model;
use mvd_sched::bucket::to_jsonl;
use mvd_tensor::Graph;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::Result;
use crate::output::write_file;
use crate::train::{run_train, EvalRecord, TrainOptions, TrainOutcome};

pub const CURVES_FILE: &str = "curves.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub mode: BoxEncoderMode,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: BoxEncoderMode,
    pub final_loss: f64,
    /// Mean over moving tracks of the box-token variance across latent
    /// frames.
    pub token_variance: f64,
    pub moving_tracks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub steps: Vec<usize>,
    pub modes: Vec<ModeSummary>,
    pub best: BoxEncoderMode,
}

pub struct AblationOutcome {
    pub summary: AblationSummary,
    pub curves: Vec<(BoxEncoderMode, Vec<EvalRecord>)>,
    pub runs: Vec<(BoxEncoderMode, TrainOutcome)>,
}

/// Variance across rows as half the mean squared pairwise distance, so
/// identical rows give exactly zero.
pub fn row_variance(rows: &[&[f64]]) -> f64 {
    let n = rows.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for a in rows {
        for b in rows {
            sum += a.iter().zip(*b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
    }
    sum / (2.0 * (n * n) as f64 * rows[0].len() as f64)
}

/// Whether the box in `(view, slot)` is visible in every frame and moves.
fn moving_track(pb: &PaddedBoxes, c: usize, n: usize) -> bool {
    let idx: Vec<usize> = (0..pb.frames).map(|t| pb.index(t, c, n)).collect();
    idx.iter().all(|&i| pb.mask[i]) && idx.iter().any(|&i| pb.corners[i * 24..(i + 1) * 24] != pb.corners[idx[0] * 24..idx[0] * 24 + 24])
}

/// Mean token variance over latent frames for every fully visible moving
/// track in `data`, using `model`'s own box encoder and mode.
pub fn box_token_variance(model: &Model, data: &Dataset) -> Result<(f64, usize)> {
    let g = Graph::new();
    let p = Bound::new(&model.params, &g, false);
    let enc = model.config.encoder();
    let mut total = 0.0;
    let mut tracks = 0;
    for clip in &data.clips {
        let pb = &clip.sample.cond.boxes;
        if pb.frames < 8 {
            continue;
        }
        let seq = encode_boxes_st(&p, &enc, &[pb], model.config.box_encoder_mode)?;
        let tokens = seq.tokens.value();
        let (tl, c, n, w) = (seq.latent_frames, pb.views, pb.slots, enc.width);
        for ci in 0..c {
            for ni in 0..n {
                if !moving_track(pb, ci, ni) {
                    continue;
                }
                let rows: Vec<&[f64]> = (0..tl)
                    .map(|k| {
                        let at = ((k * c + ci) * n + ni) * w;
                        &tokens.data()[at..at + w]
                    })
                    .collect();
                total += row_variance(&rows);
                tracks += 1;
            }
        }
    }
    Ok((if tracks == 0 { 0.0 } else { total / tracks as f64 }, tracks))
}

/// Trains every mode on the same data and seeds under `dir/<mode>`, then
/// writes the curves and a summary.
pub fn run_ablation(cfg: &RunConfig, dir: &Path, verbose: bool) -> Result<AblationOutcome> {
    let mut runs = Vec::new();
    let mut curves = Vec::new();
    let mut modes = Vec::new();
    for mode in BoxEncoderMode::ALL {
        let mut c = cfg.clone();
        c.model.box_encoder_mode = mode;
        if verbose {
            eprintln!("ablation: {mode}");
        }
        let out = run_train(&c, &dir.join(mode.name()), &TrainOptions { resume: None, verbose })?;
        let (token_variance, moving_tracks) = box_token_variance(&out.trainer.model, &out.data)?;
        modes.push(ModeSummary {
            mode,
            final_loss: out.evals.last().map_or(f64::NAN, |e| e.loss),
            token_variance,
            moving_tracks,
        });
        curves.push((mode, out.evals.clone()));
        runs.push((mode, out));
    }
    let points: Vec<CurvePoint> = curves
        .iter()
        .flat_map(|(mode, ev)| {
            ev.iter().map(|e| CurvePoint {
                mode: *mode,
                step: e.step,
                loss: e.loss,
            })
        })
        .collect();
    write_file(&dir.join(CURVES_FILE), to_jsonl(&points)?.as_bytes())?;
    let best = modes
        .iter()
        .min_by(|a, b| a.final_loss.total_cmp(&b.final_loss))
        .map(|m| m.mode)
        .unwrap_or_default();
    let summary = AblationSummary {
        steps: curves[0].1.iter().map(|e| e.step).collect(),
        modes,
        best,
    };
    write_file(&dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(AblationOutcome { summary, curves, runs })
}
