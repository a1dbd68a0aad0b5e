//! Shows why rain removal runs per channel: for any split of a rainy
//! image into a background and a non-negative residual, keeping the
//! residual channel-wise leaves at least as many bright pixels in the
//! background as a gray (channel-shared) residual does.

use derain::image::ImageTensor;
use derain::metrics::{bright_channel, proposition1_check, BrightChannelConfig};
use derain::synth::{synthesize_rain, synthetic_clean_image, RainParams};

fn main() -> derain::Result<()> {
    // A moderately bright scene under rain that is much stronger in the
    // red channel than in green and blue.
    let base = synthetic_clean_image(48, 48, 17);
    let clean = ImageTensor::from_fn(48, 48, 3, |y, x, c| 0.5 + 0.45 * base.get(y, x, c));
    let params = RainParams {
        seed: 4,
        intensity_range_r: (0.4, 0.8),
        intensity_range_g: (0.1, 0.3),
        intensity_range_b: (0.0, 0.1),
        ..RainParams::default()
    };
    let (rainy, rain) = synthesize_rain(&clean, &params)?;

    // Channel-wise residual: most of the true per-channel rain.
    let scale = 0.9;
    let r_chan = ImageTensor::from_fn(48, 48, 3, |y, x, c| scale * rain.get(y, x, c));
    // Gray residual: at each pixel the worst channel, applied to all three.
    let r_gray = ImageTensor::from_fn(48, 48, 3, |y, x, _| {
        (0..3).map(|c| r_chan.get(y, x, c)).fold(0.0f64, f64::max)
    });

    // A loose brightness threshold makes the count differences visible
    // on a small image; the dominance holds at any threshold.
    let cfg = BrightChannelConfig { brightness_tolerance: 0.15, ..BrightChannelConfig::default() };
    let outcome = proposition1_check(&rainy, &r_chan, &r_gray, &cfg)?;
    println!(
        "bright pixels after channel-wise removal: {}, after gray removal: {} (dominance holds: {})",
        outcome.bright_chan, outcome.bright_gray, outcome.pass
    );

    // The bright-channel map itself: per-pixel max over a window and channels.
    let j = bright_channel(&rainy, &cfg)?;
    let mean = j.data().iter().sum::<f64>() / j.data().len() as f64;
    println!("mean bright-channel value of the rainy image: {mean:.4}");
    Ok(())
}
