use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvd_cli::ablate::run_ablation;
use mvd_cli::config::{preset, sha256_hex, RunConfig};
use mvd_cli::output::{load_checkpoint, write_file, JsonLines};
use mvd_cli::sample::run_sample;
use mvd_cli::train::{run_train, TrainOptions};
use mvd_cli::verify::{run_properties, Fault, VerifyOptions};
use mvd_cli::{CliError, Result};
use mvd_core::codec::{Codec, CodecSpec};
use mvd_core::scene::io::scene_from_json;
use mvd_core::scene::{rasterize_clip, synth_scene};
use serde_json::json;

/// Multi-view driving video diffusion at desk scale.
#[derive(Parser)]
#[command(name = "mvd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: overfit16, stage-mini or spcheck.
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path),
            (None, Some(name)) => preset(name),
            (None, None) => preset("overfit16"),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured stage plans and write checkpoints and logs.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Generate frames for one scene from a checkpoint.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Serialized scene; otherwise a synthetic one is generated.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Synthetic scene seed.
        #[arg(long, default_value_t = 0)]
        synth_seed: u64,
        /// Synthetic scene length (1, 8n or 8n+1).
        #[arg(long, default_value_t = 17)]
        frames: usize,
        #[arg(long)]
        views: Option<usize>,
        /// Overrides `sampler.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Output subdirectory under `samples/`.
        #[arg(long)]
        name: Option<String>,
    },
    /// Check every registered invariant; exit 1 if any fails.
    Verify {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Deliberately break a component (window-flip).
        #[arg(long)]
        inject_fault: Option<Fault>,
        /// Only properties whose names start with these prefixes.
        #[arg(long)]
        only: Vec<String>,
    },
    /// Train each box encoder mode on identical data and compare.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Encode and decode a synthetic clip with the configured codec.
    CodecCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 17)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the resolved configuration as TOML.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { cfg, resume, quiet } => {
            let cfg = cfg.load()?;
            let root = cfg.output_root();
            let out = run_train(&cfg, &root, &TrainOptions { resume, verbose: !quiet })?;
            let first = out.evals.first().map_or(f64::NAN, |e| e.loss);
            let last = out.evals.last().map_or(f64::NAN, |e| e.loss);
            println!("trained {} steps; held-in loss {first:.5} -> {last:.5}", out.trainer.step());
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::Sample {
            cfg,
            checkpoint,
            scene,
            synth_seed,
            frames,
            views,
            seed,
            name,
        } => {
            let mut cfg = cfg.load()?;
            if let Some(s) = seed {
                cfg.sampler.seed = s;
            }
            let (scene, default_name) = match &scene {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                    let stem = path.file_stem().map_or("scene".into(), |s| s.to_string_lossy().into_owned());
                    (scene_from_json(&text)?, stem)
                }
                None => {
                    let k = &cfg.data.knobs;
                    let knobs = cfg.knobs_for(k.image_height, k.image_width);
                    let views = views.unwrap_or(cfg.data.views);
                    (synth_scene(synth_seed, frames, views, &knobs)?, format!("synth{synth_seed}_t{frames}"))
                }
            };
            let bytes = std::fs::read(&checkpoint).map_err(|e| CliError::io(&checkpoint, e))?;
            let trainer = load_checkpoint(&checkpoint)?;
            let dir = cfg.output_root().join("samples").join(name.unwrap_or(default_name));
            let out = run_sample(&cfg, &trainer.model, &sha256_hex(&bytes), &scene, &dir)?;
            println!("{} frames written to {}", out.manifest.files.len(), out.dir.display());
        }
        Command::Verify { cfg, inject_fault, only } => {
            let cfg = cfg.load()?;
            let results = run_properties(&VerifyOptions { fault: inject_fault }, &only);
            let path = cfg.output_root().join("verify_report.jsonl");
            let mut report = JsonLines::create(&path, false)?;
            let mut failed = 0;
            for r in &results {
                report.write(r)?;
                println!("{} {:<30} {} ({} ms)", if r.pass { "PASS" } else { "FAIL" }, r.property, r.detail, r.ms);
                failed += usize::from(!r.pass);
            }
            report.flush()?;
            println!("{} of {} properties passed", results.len() - failed, results.len());
            if failed > 0 {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Ablate { cfg, quiet } => {
            let cfg = cfg.load()?;
            let out = run_ablation(&cfg, &cfg.output_root().join("ablation"), !quiet)?;
            for m in &out.summary.modes {
                println!(
                    "{:<13} final loss {:.5}  box-token variance {:.3e} ({} moving tracks)",
                    m.mode.name(),
                    m.final_loss,
                    m.token_variance,
                    m.moving_tracks
                );
            }
            println!("lowest final loss: {}", out.summary.best);
        }
        Command::CodecCheck { cfg, frames, seed } => {
            let cfg = cfg.load()?;
            codec_check(&cfg, frames, seed, &cfg.output_root())?;
        }
        Command::Config { cfg } => print!("{}", cfg.load()?.to_toml()?),
    }
    Ok(ExitCode::SUCCESS)
}

fn codec_check(cfg: &RunConfig, frames: usize, seed: u64, root: &Path) -> Result<()> {
    let k = &cfg.data.knobs;
    let scene = synth_scene(seed, frames, cfg.data.views, &cfg.knobs_for(k.image_height, k.image_width))?;
    let clip = rasterize_clip(&scene)?;
    let mut rows = Vec::new();
    for (label, spec) in [("configured", cfg.codec), ("full-rank", CodecSpec::lossless(cfg.codec.spatial_ratio))] {
        let codec = Codec::new(spec)?;
        let latent = codec.encode(&clip)?;
        let back = codec.decode(&latent)?;
        let err = back.pixels().max_abs_diff(clip.pixels());
        let psnr = codec.roundtrip_psnr(&clip, 1.0)?;
        println!(
            "{label:<10} d={:<4} latent {:?}  max error {err:.3e}  PSNR {psnr:.2} dB",
            spec.latent_channels,
            latent.values().shape()
        );
        rows.push(json!({
            "codec": label,
            "latent_channels": spec.latent_channels,
            "latent_shape": latent.values().shape(),
            "max_abs_error": err,
            "psnr_db": psnr,
        }));
    }
    write_file(&root.join("codec_check.json"), serde_json::to_string_pretty(&rows)?.as_bytes())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
