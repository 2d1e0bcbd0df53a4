use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mvd_cli::ablate::run_ablation;
use mvd_cli::config::{preset, RunConfig, PRESETS};
use mvd_cli::output::{load_checkpoint, parse_ppm};
use mvd_cli::sample::Manifest;
use mvd_cli::train::{run_train, TrainOptions};
use mvd_cli::verify::registry;
use mvd_core::train::Model;
use tempfile::TempDir;

fn mvd(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvd"))
        .args(args)
        .env("MVD_OUT", out)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Four clips, six steps, checkpoints every two.
fn tiny(out: &Path) -> RunConfig {
    let mut cfg = preset("overfit16").unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg.data.clips = 4;
    cfg.stages[0].steps = 6;
    cfg.stages[0].buckets[0].batch = 2;
    cfg.train.eval_every = 2;
    cfg.train.checkpoint_every = 2;
    cfg.sampler.steps = 4;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

#[test]
fn presets_roundtrip_through_toml() {
    for name in PRESETS {
        let cfg = preset(name).unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg, "{name}");
        assert_eq!(RunConfig::from_toml(&text).unwrap().to_toml().unwrap(), text);
    }
}

#[test]
fn unknown_and_invalid_keys_are_reported_by_path() {
    let text = preset("overfit16").unwrap().to_toml().unwrap();
    let typo = text.replacen("depth = 2", "depht = 2", 1);
    let msg = RunConfig::from_toml(&typo).unwrap_err().to_string();
    assert!(msg.contains("model"), "{msg}");
    assert!(msg.contains("depht"), "{msg}");

    let bad_rate = text.replacen("cond_drop = 0.15", "cond_drop = 1.5", 1);
    let msg = RunConfig::from_toml(&bad_rate).unwrap_err().to_string();
    assert!(msg.contains("train.cond_drop"), "{msg}");

    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, typo).unwrap();
    let o = mvd(&["config", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("depht"));

    let o = mvd(&["config", "--preset", "nope"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = mvd(&["train", "--bogus-flag"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_reports_every_property_and_catches_the_fault() {
    let dir = TempDir::new().unwrap();
    let o = mvd(&["verify"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let report = fs::read_to_string(dir.path().join("verify_report.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = report.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), registry().len());
    assert!(lines.iter().all(|l| l["pass"] == true));

    let o = mvd(&["verify", "--inject-fault", "window-flip"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let failing: Vec<String> = stdout(&o).lines().filter(|l| l.starts_with("FAIL")).map(String::from).collect();
    assert_eq!(failing.len(), 1, "{failing:?}");
    assert!(failing[0].contains("alignment.downsample_windows"));
    let report = fs::read_to_string(dir.path().join("verify_report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), registry().len());
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let dir = TempDir::new().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.stages[0].steps = 0;
    let out = run_train(&cfg, dir.path(), &TrainOptions::default()).unwrap();
    let ck = load_checkpoint(&out.checkpoint).unwrap();
    let fresh = Model::new(cfg.model.clone(), cfg.codec, cfg.seeds.model).unwrap();
    assert_eq!(ck.step(), 0);
    assert_eq!(ck.model.params, fresh.params);
    assert!(ck.optim.m.iter().all(|(_, t)| t.data().iter().all(|&x| x == 0.0)));
}

#[test]
fn resumed_training_is_bit_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    run_train(&cfg, &full, &TrainOptions::default()).unwrap();
    run_train(&cfg, &part, &TrainOptions::default()).unwrap();
    let mid = part.join("checkpoints/step_000002.ckpt");
    assert!(mid.exists());
    let opts = TrainOptions {
        resume: Some(mid),
        ..TrainOptions::default()
    };
    run_train(&cfg, &part, &opts).unwrap();
    let a = fs::read(full.join("checkpoints/last.ckpt")).unwrap();
    let b = fs::read(part.join("checkpoints/last.ckpt")).unwrap();
    assert!(a == b, "resumed checkpoint differs");
}

#[test]
fn incompatible_resume_is_refused() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    let out = run_train(&cfg, dir.path(), &TrainOptions::default()).unwrap();
    let mut other = cfg.clone();
    other.model.width = 16;
    let opts = TrainOptions {
        resume: Some(out.checkpoint),
        ..TrainOptions::default()
    };
    let err = run_train(&other, &dir.path().join("b"), &opts).err().expect("refused");
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn training_writes_logs_and_trace() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    let path = write_config(dir.path(), &cfg);
    let o = mvd(&["train", "--config", path.to_str().unwrap(), "-q"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, (0..6).collect::<Vec<_>>());
    let evals = fs::read_to_string(dir.path().join("eval.jsonl")).unwrap();
    assert_eq!(evals.lines().count(), 4);
    assert!(dir.path().join("trace.jsonl").exists());
    let saved = RunConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn sampling_writes_one_frame_per_view_and_step_deterministically() {
    let dir = TempDir::new().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.stages[0].steps = 2;
    let path = write_config(dir.path(), &cfg);
    let out = run_train(&cfg, dir.path(), &TrainOptions::default()).unwrap();
    let ck = out.checkpoint.to_str().unwrap().to_string();
    let cfg_arg = path.to_str().unwrap();
    let run = |name: &str| {
        let o = mvd(
            &["sample", "--config", cfg_arg, "--checkpoint", &ck, "--frames", "17", "--views", "2", "--seed", "7", "--name", name],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        dir.path().join("samples").join(name)
    };
    let (a, b) = (run("a"), run("b"));
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.files.len(), 34);
    assert_eq!((manifest.frames, manifest.views, manifest.latent_frames, manifest.seed), (17, 2, 5, 7));
    let mut effective = cfg.clone();
    effective.sampler.seed = 7;
    assert_eq!(manifest.config_sha256, effective.hash().unwrap());
    let ppms = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ppm")).count();
    assert_eq!(ppms, 34);
    for f in &manifest.files {
        let bytes = fs::read(a.join(f)).unwrap();
        let (w, h, _) = parse_ppm(&bytes).unwrap();
        assert_eq!((w, h), (56, 32));
        assert!(bytes == fs::read(b.join(f)).unwrap(), "{f} differs between runs");
    }

    let mut other = cfg.clone();
    other.model.heads = 4;
    let other_path = dir.path().join("other.toml");
    fs::write(&other_path, other.to_toml().unwrap()).unwrap();
    let o = mvd(&["sample", "--config", other_path.to_str().unwrap(), "--checkpoint", &ck], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn codec_check_reports_both_codecs() {
    let dir = TempDir::new().unwrap();
    let o = mvd(&["codec-check", "--frames", "9"], dir.path());
    assert!(o.status.success());
    let rows: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(dir.path().join("codec_check.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[1]["max_abs_error"].as_f64().unwrap() < 1e-9);
    assert_eq!(rows[0]["latent_shape"][0], 3);
}

#[test]
fn ablation_curves_share_a_step_grid_and_repeat_exactly() {
    let dir = TempDir::new().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.stages[0].steps = 4;
    let a = run_ablation(&cfg, &dir.path().join("a"), false).unwrap();
    let b = run_ablation(&cfg, &dir.path().join("b"), false).unwrap();
    assert_eq!(a.curves.len(), 3);
    let grid: Vec<usize> = a.curves[0].1.iter().map(|e| e.step).collect();
    assert_eq!(grid, vec![0, 2, 4]);
    for (_, c) in &a.curves {
        assert_eq!(c.iter().map(|e| e.step).collect::<Vec<_>>(), grid);
    }
    assert_eq!(a.summary, b.summary);
    let curves = |d: &str| fs::read(dir.path().join(d).join("curves.jsonl")).unwrap();
    assert!(curves("a") == curves("b"));
    let reduce = a.summary.modes.iter().find(|m| m.mode.name() == "reduce").unwrap();
    assert_eq!(reduce.token_variance, 0.0);
}
