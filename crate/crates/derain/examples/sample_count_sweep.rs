//! Restores the same image with growing latent-sample budgets. Draws are
//! streamed per sample index, so the first k samples of a large budget
//! are exactly the k samples of a small one; quality moves smoothly with
//! the budget instead of jumping.

use derain::image::load_image;
use derain::infer::{derain, InferenceConfig};
use derain::metrics::psnr;
use derain::model::NetworkConfig;
use derain::synth::{build_dataset, synthetic_clean_image, RainParams};
use derain::train::{train, TrainConfig};

fn main() -> derain::Result<()> {
    let out = std::env::temp_dir().join("derain_example_sweep");
    let clean_dir = out.join("clean_src");
    std::fs::create_dir_all(&clean_dir).map_err(|e| derain::Error::io(&clean_dir, e))?;
    for k in 0..4u64 {
        derain::image::save_image(&synthetic_clean_image(64, 64, k), clean_dir.join(format!("src_{k}.png")))?;
    }
    let manifest = build_dataset(&clean_dir, &RainParams::default(), 16, 32, out.join("data"))?;

    let config = TrainConfig {
        epochs: 10,
        batch_size: 8,
        patch_size: 32,
        lr_decay: 1.0,
        network: NetworkConfig { depth: 4, filters: 8, kernel: 3, sde_layers: 3, leak: 0.2 },
        ..TrainConfig::default()
    };
    let (ckpt, _) = train(&manifest, &config)?;

    let rainy = load_image(manifest.rainy_path(0))?;
    let clean = load_image(manifest.clean_path(0))?;
    for n in [1usize, 2, 4, 8, 16, 32] {
        let cfg = InferenceConfig { n_samples: n, ..InferenceConfig::default() };
        let restored = derain(&ckpt, &rainy, &cfg)?;
        println!("n = {n:>2}: psnr {:.4} dB", psnr(&restored.image, &clean)?);
    }
    Ok(())
}
