//! Command-line front end: dataset synthesis, training, deraining,
//! evaluation, and the invariant self-check. All logic lives in the
//! library; this file only parses arguments and formats output.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use derain::checkpoint::load_checkpoint;
use derain::error::{Error, Result};
use derain::image::load_image;
use derain::infer::{derain_batch, InferenceConfig};
use derain::metrics::{
    ced, count_bright_pixels, psnr, ssim, BrightChannelConfig, MetricReport, MetricRow,
};
use derain::model::NetworkConfig;
use derain::synth::{build_dataset, load_manifest, save_manifest, RainParams};
use derain::train::{train, train_from, TrainConfig};

#[derive(Parser)]
#[command(name = "derain", version, about = "Channel-wise variational image deraining")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Rain a directory of clean images into a training dataset.
    Synth(SynthArgs),
    /// Train a model on a synthesized dataset.
    Train(TrainArgs),
    /// Restore rainy images with a trained model.
    Derain(DerainArgs),
    /// Score restored images against references.
    Eval(EvalArgs),
    /// Run the invariant self-checks.
    Check(CheckArgs),
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s
        .split_once(',')
        .ok_or_else(|| format!("expected LO,HI, got '{s}'"))?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("bad lower bound: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("bad upper bound: {e}"))?;
    Ok((lo, hi))
}

#[derive(Args)]
struct SynthArgs {
    /// Directory of clean source images (png or bmp).
    #[arg(long)]
    clean_dir: PathBuf,
    /// Output directory for the dataset and its manifest.
    #[arg(long)]
    out: PathBuf,
    /// Number of rainy/clean pairs to generate.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    count: u32,
    /// Side length of the square patches.
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..))]
    patch_size: u32,
    /// Streaks rasterized per image.
    #[arg(long, default_value_t = 12)]
    streaks: usize,
    /// Streak length range in pixels, as LO,HI.
    #[arg(long, value_parser = parse_range, default_value = "8,24")]
    length: (f64, f64),
    /// Streak angle range in degrees from vertical, as LO,HI.
    #[arg(long, value_parser = parse_range, default_value = "-25,25")]
    angle: (f64, f64),
    /// Streak intensity range shared by all channels, as LO,HI.
    #[arg(long, value_parser = parse_range, default_value = "0.2,0.8")]
    intensity: (f64, f64),
    /// Streak thickness in pixels.
    #[arg(long, default_value_t = 1.2)]
    thickness: f64,
    /// Gaussian blur radius applied to the rain layer.
    #[arg(long, default_value_t = 0.0)]
    blur: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest produced by `synth`.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    epochs: u32,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u32).range(1..))]
    batch_size: u32,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..))]
    patch_size: u32,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Learning-rate factor applied each epoch.
    #[arg(long, default_value_t = 0.1)]
    lr_decay: f64,
    /// KL term weight.
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    /// Density loss weight.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-10)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Continue from this checkpoint instead of initializing fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Leading manifest entries scored after each epoch.
    #[arg(long, default_value_t = 0)]
    val_pairs: usize,
    /// Layer count of encoder, prior, and decoder.
    #[arg(long, default_value_t = 7, value_parser = clap::value_parser!(u32).range(2..))]
    depth: u32,
    /// Channels per hidden layer.
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..))]
    filters: u32,
    /// Layer count of the density block.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(2..))]
    sde_layers: u32,
    /// Negative slope of the leaky rectifier.
    #[arg(long, default_value_t = 0.2)]
    leak: f64,
}

#[derive(Args)]
struct DerainArgs {
    /// A rainy image, a directory of rainy images, or a dataset manifest.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for restored images and the run report.
    #[arg(long)]
    out: PathBuf,
    /// Latent draws averaged per channel.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..))]
    n_samples: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// A dataset manifest (scores rainy against clean) or RESTORED:REFERENCE
    /// directories holding same-named files.
    #[arg(long)]
    pairs: String,
    /// Comma-separated subset of psnr,ssim,ced,bcp.
    #[arg(long, default_value = "psnr,ssim", value_delimiter = ',', value_parser = parse_metric)]
    metrics: Vec<MetricKind>,
    /// Bright-channel patch radius for bcp.
    #[arg(long, default_value_t = 2)]
    bcp_radius: usize,
    /// Write the full report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum MetricKind {
    Psnr,
    Ssim,
    Ced,
    Bcp,
}

fn parse_metric(s: &str) -> std::result::Result<MetricKind, String> {
    match s.trim() {
        "psnr" => Ok(MetricKind::Psnr),
        "ssim" => Ok(MetricKind::Ssim),
        "ced" => Ok(MetricKind::Ced),
        "bcp" => Ok(MetricKind::Bcp),
        other => Err(format!("unknown metric '{other}' (expected psnr, ssim, ced, bcp)")),
    }
}

#[derive(Args)]
struct CheckArgs {
    /// Shrink the Monte-Carlo budgets for a quicker pass.
    #[arg(long)]
    fast: bool,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Synth(a) => run_synth(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Derain(a) => run_derain(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Check(a) => return run_check(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let params = RainParams {
        streak_count: a.streaks,
        length_range: a.length,
        angle_range: a.angle,
        intensity_range_r: a.intensity,
        intensity_range_g: a.intensity,
        intensity_range_b: a.intensity,
        thickness: a.thickness,
        blur_radius: a.blur,
        seed: a.seed,
    };
    let manifest = build_dataset(&a.clean_dir, &params, a.count as usize, a.patch_size as usize, &a.out)?;
    let path = save_manifest(&manifest)?;
    println!("wrote {} pairs; manifest at {}", manifest.len(), path.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let config = TrainConfig {
        beta: a.beta,
        lambda: a.lambda,
        lr: a.lr,
        lr_decay: a.lr_decay,
        epochs: a.epochs as usize,
        batch_size: a.batch_size as usize,
        patch_size: a.patch_size as usize,
        weight_decay: a.weight_decay,
        seed: a.seed,
        network: NetworkConfig {
            depth: a.depth as usize,
            filters: a.filters as usize,
            kernel: 3,
            sde_layers: a.sde_layers as usize,
            leak: a.leak,
        },
        max_steps: a.max_steps,
        checkpoint_dir: Some(a.out.clone()),
        val_pairs: a.val_pairs,
    };
    let (ckpt, log) = match &a.resume {
        Some(path) => train_from(load_checkpoint(path)?, &manifest, &config)?,
        None => train(&manifest, &config)?,
    };
    log.write_jsonl(a.out.join("train.jsonl"))?;
    let last = log.steps.last();
    println!(
        "trained to step {} (epoch {}); final loss {}",
        ckpt.meta.step,
        ckpt.meta.epoch,
        last.map(|s| format!("{:.6}", s.loss.total)).unwrap_or_else(|| "n/a".into())
    );
    println!("checkpoints and train.jsonl in {}", a.out.display());
    Ok(())
}

fn run_derain(a: DerainArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = InferenceConfig {
        n_samples: a.n_samples as usize,
        seed: a.seed,
        emit_intermediates: false,
    };
    let meta = std::fs::metadata(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let is_single_image = meta.is_file()
        && matches!(
            a.input.extension().and_then(|s| s.to_str()).map(str::to_ascii_lowercase).as_deref(),
            Some("png" | "jpg" | "jpeg" | "bmp")
        );
    let outcome = if is_single_image {
        std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
        let rainy = load_image(&a.input)?;
        let restored = derain::infer::derain(&ckpt, &rainy, &cfg)?;
        let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let dest = a.out.join(format!("{stem}.png"));
        derain::image::save_image(&restored.image, &dest)?;
        derain::infer::BatchOutcome {
            report: None,
            outputs: vec![(stem.to_string(), dest)],
            failures: Vec::new(),
        }
    } else {
        derain_batch(&a.input, &ckpt, &cfg, &a.out)?
    };
    let sidecar = json!({
        "checkpoint": a.checkpoint,
        "n_samples": cfg.n_samples,
        "seed": cfg.seed,
        "outputs": outcome.outputs.iter().map(|(id, p)| json!({"id": id, "path": p})).collect::<Vec<_>>(),
        "failures": outcome.failures.iter().map(|(id, e)| json!({"id": id, "error": e})).collect::<Vec<_>>(),
        "report": outcome.report,
    });
    let sidecar_path = a.out.join("derain_report.json");
    std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar).unwrap())
        .map_err(|e| Error::io(&sidecar_path, e))?;
    for (id, err) in &outcome.failures {
        eprintln!("failed {id}: {err}");
    }
    println!(
        "restored {} image(s), {} failure(s); report at {}",
        outcome.outputs.len(),
        outcome.failures.len(),
        sidecar_path.display()
    );
    if let Some(report) = &outcome.report {
        println!("mean psnr {:.3} dB, mean ssim {:.4}", report.mean_psnr, report.mean_ssim);
    }
    Ok(())
}

/// Pairs to score: (id, restored/subject image, reference image).
fn eval_pairs(spec: &str) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let as_path = Path::new(spec);
    if as_path.is_file() {
        let manifest = load_manifest(as_path)?;
        return Ok((0..manifest.len())
            .map(|i| {
                let id = manifest.rainy_path(i).file_stem().and_then(|s| s.to_str()).unwrap_or("pair").to_string();
                (id, manifest.rainy_path(i), manifest.clean_path(i))
            })
            .collect());
    }
    let (restored_dir, reference_dir) = spec.split_once(':').ok_or_else(|| {
        Error::Config(format!(
            "--pairs must be a manifest file or RESTORED:REFERENCE directories, got '{spec}'"
        ))
    })?;
    let list = |dir: &str| -> Result<Vec<PathBuf>> {
        let dir = Path::new(dir);
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|s| s.to_str()).map(str::to_ascii_lowercase).as_deref(),
                    Some("png" | "jpg" | "jpeg" | "bmp")
                )
            })
            .collect();
        files.sort();
        Ok(files)
    };
    let reference: Vec<PathBuf> = list(reference_dir)?;
    let mut pairs = Vec::new();
    for restored in list(restored_dir)? {
        let name = restored.file_name().unwrap().to_owned();
        if let Some(r) = reference.iter().find(|p| p.file_name() == Some(&name)) {
            let id = restored.file_stem().and_then(|s| s.to_str()).unwrap_or("pair").to_string();
            pairs.push((id, restored.clone(), r.clone()));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Config(format!(
            "no same-named image pairs between {restored_dir} and {reference_dir}"
        )));
    }
    Ok(pairs)
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let pairs = eval_pairs(&a.pairs)?;
    let bcp_cfg = BrightChannelConfig { patch_radius: a.bcp_radius, ..Default::default() };
    let mut rows = Vec::new();
    for (id, subject_path, reference_path) in &pairs {
        let subject = load_image(subject_path)?;
        let reference = load_image(reference_path)?;
        let row = MetricRow {
            id: id.clone(),
            psnr: psnr(&subject, &reference)?,
            ssim: ssim(&subject, &reference)?,
            ced: if a.metrics.contains(&MetricKind::Ced) {
                Some(ced(&subject, &reference)?)
            } else {
                None
            },
            bright_pixel_count: if a.metrics.contains(&MetricKind::Bcp) {
                Some(count_bright_pixels(&subject, &bcp_cfg)?)
            } else {
                None
            },
        };
        rows.push(row);
    }
    let report = MetricReport::from_rows(rows);
    for row in &report.rows {
        let mut line = format!("{}: psnr {:.3} dB, ssim {:.4}", row.id, row.psnr, row.ssim);
        if let Some(n) = row.bright_pixel_count {
            line.push_str(&format!(", bright pixels {n}"));
        }
        println!("{line}");
    }
    println!("mean psnr {:.3} dB, mean ssim {:.4}", report.mean_psnr, report.mean_ssim);
    if let Some(out) = &a.out {
        let metric_names: Vec<&str> = a
            .metrics
            .iter()
            .map(|m| match m {
                MetricKind::Psnr => "psnr",
                MetricKind::Ssim => "ssim",
                MetricKind::Ced => "ced",
                MetricKind::Bcp => "bcp",
            })
            .collect();
        let doc = json!({
            "pairs": a.pairs,
            "metrics": metric_names,
            "report": report,
        });
        std::fs::write(out, serde_json::to_string_pretty(&doc).unwrap())
            .map_err(|e| Error::io(out, e))?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

fn run_check(a: CheckArgs) -> ExitCode {
    let outcomes = derain::selfcheck::run_all(a.fast);
    let mut failures = 0;
    for c in &outcomes {
        println!(
            "{} {} ({:.2}s): {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.seconds,
            c.detail
        );
        if !c.pass {
            failures += 1;
        }
    }
    if failures == 0 {
        println!("all {} checks passed", outcomes.len());
        ExitCode::SUCCESS
    } else {
        println!("{failures}/{} checks failed", outcomes.len());
        ExitCode::from(1)
    }
}
