//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Runs as a plain binary (`harness = false`).

use std::io::Write;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mvd_cli::ablate::run_ablation;
use mvd_cli::config::preset;
use mvd_cli::control::{controllability, pick_probe_scene, REQUIRED_AGREEMENT};
use mvd_cli::sample::sample_clip;
use mvd_cli::train::{run_train, TrainOptions};
use mvd_cli::verify::{run_properties, VerifyOptions};
use mvd_core::cond::BoxEncoderMode;
use mvd_core::scene::synth_scene;
use tempfile::TempDir;

type Outcome = Result<String, String>;

struct Criterion {
    id: u8,
    name: &'static str,
    limit: Duration,
    run: fn(&TempDir) -> Outcome,
}

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

/// Runs the verifier properties under `prefixes` and folds them into one
/// outcome.
fn properties(prefixes: &[&str]) -> Outcome {
    let filters: Vec<String> = prefixes.iter().map(|s| s.to_string()).collect();
    let results = run_properties(&VerifyOptions::default(), &filters);
    if results.is_empty() {
        return Err("no properties registered".into());
    }
    let failed: Vec<String> = results.iter().filter(|r| !r.pass).map(|r| format!("{}: {}", r.property, r.detail)).collect();
    if failed.is_empty() {
        Ok(results.iter().map(|r| r.property.as_str()).collect::<Vec<_>>().join(", "))
    } else {
        Err(failed.join("; "))
    }
}

fn ablation_and_control(dir: &TempDir) -> (Outcome, Outcome) {
    let cfg = preset("overfit16").expect("preset");
    let out = match run_ablation(&cfg, &dir.path().join("ablation"), false) {
        Ok(o) => o,
        Err(e) => return (Err(e.to_string()), Err("ablation did not run".into())),
    };
    let mode = |m: BoxEncoderMode| out.summary.modes.iter().find(|s| s.mode == m).expect("mode summary");
    let (ds, red, int) = (mode(BoxEncoderMode::Downsample4x), mode(BoxEncoderMode::Reduce), mode(BoxEncoderMode::Interp));
    let detail = format!(
        "final loss downsample4x {:.5}, reduce {:.5}, interp {:.5}; token variance reduce {:.1e}, downsample4x {:.3e} over {} moving tracks",
        ds.final_loss, red.final_loss, int.final_loss, red.token_variance, ds.token_variance, ds.moving_tracks
    );
    let ok = ds.final_loss <= red.final_loss
        && ds.final_loss <= int.final_loss
        && red.token_variance == 0.0
        && ds.token_variance > 0.0
        && ds.moving_tracks > 0;
    let ablation = if ok { Ok(detail) } else { Err(detail) };

    let (_, run) = out.runs.iter().find(|(m, _)| *m == BoxEncoderMode::Downsample4x).expect("run");
    let control = (|| {
        let scene = pick_probe_scene(run.data.clips.iter().map(|c| &c.scene)).ok_or("no held-in scene with a visible box")?;
        let report = controllability(&run.trainer.model, scene, &cfg.sampler).map_err(|e| e.to_string())?;
        let detail = format!(
            "view {}: inside {:.3} vs background {:.3}; {} of {} offsets agree (need {REQUIRED_AGREEMENT})",
            report.view,
            report.inside_mean,
            report.background_mean,
            report.agreeing(),
            report.offsets.len()
        );
        if report.passes() {
            Ok(detail)
        } else {
            Err(detail)
        }
    })();
    (ablation, control)
}

fn extrapolation(dir: &TempDir) -> Outcome {
    let cfg = preset("stage-mini").map_err(|e| e.to_string())?;
    let longest = cfg.stages.iter().flat_map(|s| &s.buckets).map(|b| b.frames).max().unwrap_or(0);
    if longest > 33 {
        return Err(format!("training plan reaches T={longest}"));
    }
    let out = run_train(&cfg, &dir.path().join("stage-mini"), &TrainOptions::default()).map_err(|e| e.to_string())?;
    let k = &cfg.data.knobs;
    let scene = synth_scene(1000, 65, cfg.data.views, &cfg.knobs_for(k.image_height, k.image_width)).map_err(|e| e.to_string())?;
    let (clip, latent, _) = sample_clip(&out.trainer.model, &scene, &cfg.sampler).map_err(|e| e.to_string())?;
    let shape = (clip.frames(), clip.views(), clip.height(), clip.width());
    let want = (65, cfg.data.views, k.image_height, k.image_width);
    let finite = clip.pixels().data().iter().all(|x| x.is_finite()) && latent.values().data().iter().all(|x| x.is_finite());
    let detail = format!("trained on T<={longest}; sampled T=65 -> {shape:?}, {} latent frames, finite {finite}", latent.latent_frames());
    if shape == want && latent.latent_frames() == 17 && finite {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let dir = TempDir::new().expect("temp dir");
    let mut stdout = std::io::stdout().lock();
    let mut report = |id: u8, name: &str, limit: Duration, elapsed: Duration, outcome: &Outcome| -> bool {
        let in_time = elapsed <= limit;
        let pass = outcome.is_ok() && in_time;
        let detail = match outcome {
            Ok(d) | Err(d) => d,
        };
        let timing = if in_time { String::new() } else { format!(", over the {} s limit", limit.as_secs()) };
        writeln!(
            stdout,
            "{} criterion {id} ({name}): {detail} [{:.1} s{timing}]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        )
        .expect("stdout");
        stdout.flush().expect("stdout");
        pass
    };

    let criteria = [
        Criterion {
            id: 1,
            name: "shape contracts",
            limit: minutes(1),
            run: |_| properties(&["shape.", "alignment."]),
        },
        Criterion {
            id: 2,
            name: "gradient fidelity",
            limit: minutes(10),
            run: |_| properties(&["grad."]),
        },
        Criterion {
            id: 3,
            name: "sequence-parallel equivalence",
            limit: minutes(2),
            run: |_| properties(&["sp."]),
        },
        Criterion {
            id: 4,
            name: "flow correctness",
            limit: minutes(1),
            run: |_| properties(&["flow."]),
        },
    ];
    let mut all = true;
    for c in &criteria {
        let start = Instant::now();
        let outcome = (c.run)(&dir);
        all &= report(c.id, c.name, c.limit, start.elapsed(), &outcome);
    }

    // The controllability probe reuses the downsample4x run and is charged
    // for the whole ablation.
    let start = Instant::now();
    let (ablation, control) = ablation_and_control(&dir);
    let total = start.elapsed();
    all &= report(5, "ablation direction", minutes(60), total, &ablation);
    all &= report(6, "controllability", minutes(30), total, &control);

    let tail = [
        Criterion {
            id: 7,
            name: "length extrapolation",
            limit: minutes(5),
            run: extrapolation,
        },
        Criterion {
            id: 8,
            name: "scheduler properties",
            limit: minutes(1),
            run: |_| properties(&["sched."]),
        },
        Criterion {
            id: 9,
            name: "codec roundtrip",
            limit: minutes(1),
            run: |_| properties(&["codec."]),
        },
    ];
    for c in &tail {
        let start = Instant::now();
        let outcome = (c.run)(&dir);
        all &= report(c.id, c.name, c.limit, start.elapsed(), &outcome);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
