//! Trains a deliberately small model for a handful of steps and prints
//! the loss breakdown per step. The run takes a few seconds; it shows
//! the training API, not a useful model.
//!
//! Usage: cargo run --example train_tiny [out_dir]

use derain::image::save_image;
use derain::model::NetworkConfig;
use derain::synth::{build_dataset, synthetic_clean_image, RainParams};
use derain::train::{train, TrainConfig};

fn main() -> derain::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("derain_example_train"));

    let clean_dir = out.join("clean_src");
    std::fs::create_dir_all(&clean_dir).map_err(|e| derain::Error::io(&clean_dir, e))?;
    for k in 0..4u64 {
        save_image(&synthetic_clean_image(64, 64, k), clean_dir.join(format!("src_{k}.png")))?;
    }
    let manifest = build_dataset(&clean_dir, &RainParams::default(), 8, 32, out.join("data"))?;

    let config = TrainConfig {
        epochs: 3,
        batch_size: 4,
        patch_size: 24,
        network: NetworkConfig { depth: 3, filters: 4, kernel: 3, sde_layers: 3, leak: 0.2 },
        val_pairs: 2,
        checkpoint_dir: Some(out.join("model")),
        ..TrainConfig::default()
    };
    let (ckpt, log) = train(&manifest, &config)?;
    log.write_jsonl(out.join("model/train.jsonl"))?;

    for s in &log.steps {
        println!(
            "step {:>2} epoch {} lr {:.4}  kl {:.5}  rec {:.4}  sde {:.4}  total {:.4}",
            s.step, s.epoch, s.lr, s.loss.kl, s.loss.rec, s.loss.sde, s.loss.total
        );
    }
    for e in &log.epochs {
        println!(
            "epoch {} done: val psnr {:.2} dB, val ssim {:.4}",
            e.epoch,
            e.val_psnr.unwrap_or(f64::NAN),
            e.val_ssim.unwrap_or(f64::NAN)
        );
    }
    println!("final model at epoch {}, step {}; files in {}", ckpt.meta.epoch, ckpt.meta.step, out.display());
    Ok(())
}
