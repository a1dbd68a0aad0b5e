//! Builds a small rain dataset from procedurally generated clean images
//! and prints the manifest summary.
//!
//! Usage: cargo run --example synthesize_dataset [out_dir]

use derain::image::save_image;
use derain::synth::{build_dataset, save_manifest, synthetic_clean_image, RainParams};

fn main() -> derain::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("derain_example_dataset"));

    let clean_dir = out.join("clean_src");
    std::fs::create_dir_all(&clean_dir).map_err(|e| derain::Error::io(&clean_dir, e))?;
    for k in 0..4u64 {
        let img = synthetic_clean_image(96, 96, k);
        save_image(&img, clean_dir.join(format!("src_{k}.png")))?;
    }

    let params = RainParams { seed: 11, ..RainParams::default() };
    let manifest = build_dataset(&clean_dir, &params, 16, 48, out.join("data"))?;
    let path = save_manifest(&manifest)?;

    println!("wrote {} rainy/clean/density triples at {}x{}", manifest.len(), 48, 48);
    println!("manifest: {}", path.display());
    println!("first entry: {:?}", manifest.entries[0]);
    Ok(())
}
