//! End-to-end restore of a single image: synthesize a rainy input, train
//! briefly, then average several stochastic restorations and compare
//! against the rainy baseline.
//!
//! Usage: cargo run --example derain_image [out_dir]

use derain::image::{load_image, save_image};
use derain::infer::{derain, InferenceConfig};
use derain::metrics::psnr;
use derain::model::NetworkConfig;
use derain::synth::{build_dataset, synthetic_clean_image, RainParams};
use derain::train::{train, TrainConfig};

fn main() -> derain::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("derain_example_restore"));
    let clean_dir = out.join("clean_src");
    std::fs::create_dir_all(&clean_dir).map_err(|e| derain::Error::io(&clean_dir, e))?;
    for k in 0..6u64 {
        save_image(&synthetic_clean_image(64, 64, k), clean_dir.join(format!("src_{k}.png")))?;
    }
    let manifest = build_dataset(&clean_dir, &RainParams::default(), 24, 32, out.join("data"))?;

    // Small network, enough steps to pull loss visibly down.
    let config = TrainConfig {
        epochs: 20,
        batch_size: 8,
        patch_size: 32,
        lr_decay: 1.0,
        network: NetworkConfig { depth: 4, filters: 8, kernel: 3, sde_layers: 3, leak: 0.2 },
        ..TrainConfig::default()
    };
    println!("training {} steps...", 20 * manifest.len().div_ceil(8));
    let (ckpt, log) = train(&manifest, &config)?;
    let last = log.steps.last().unwrap();
    println!("loss {:.4} -> {:.4}", log.steps[0].loss.total, last.loss.total);

    let rainy = load_image(manifest.rainy_path(0))?;
    let clean = load_image(manifest.clean_path(0))?;
    let cfg = InferenceConfig { n_samples: 20, ..InferenceConfig::default() };
    let restored = derain(&ckpt, &rainy, &cfg)?;

    save_image(&restored.image, out.join("restored.png"))?;
    println!("rainy    {:.2} dB", psnr(&rainy, &clean)?);
    println!("restored {:.2} dB ({} samples averaged)", psnr(&restored.image, &clean)?, cfg.n_samples);
    println!("output: {}", out.join("restored.png").display());
    Ok(())
}
