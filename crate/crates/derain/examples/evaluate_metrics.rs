//! Scores image pairs with the full metric set: PSNR, SSIM, the
//! cumulative error distribution, and the bright-pixel count.

use derain::metrics::{ced, count_bright_pixels, psnr, ssim, BrightChannelConfig};
use derain::synth::{synthesize_rain, synthetic_clean_image, RainParams};

fn main() -> derain::Result<()> {
    let clean = synthetic_clean_image(64, 64, 3);
    let params = RainParams { seed: 9, ..RainParams::default() };
    let (rainy, _rain) = synthesize_rain(&clean, &params)?;

    println!("psnr  {:.3} dB", psnr(&rainy, &clean)?);
    println!("ssim  {:.4}", ssim(&rainy, &clean)?);

    let curves = ced(&rainy, &clean)?;
    for (c, curve) in curves.iter().enumerate() {
        // Fraction of pixels with error below 2/256 and 16/256.
        println!(
            "ced channel {c}: mean err {:.4}, <2/256: {:.3}, <16/256: {:.3}",
            curve.mean, curve.cumulative[1], curve.cumulative[15]
        );
    }

    let cfg = BrightChannelConfig::default();
    println!("bright pixels, clean: {}", count_bright_pixels(&clean, &cfg)?);
    println!("bright pixels, rainy: {}", count_bright_pixels(&rainy, &cfg)?);
    Ok(())
}
