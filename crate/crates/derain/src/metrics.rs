//! Quantitative evaluation: PSNR, SSIM, cumulative error distributions,
//! bright-channel statistics, and the executable bright-pixel inequality.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// PSNR values of identical images are reported as this cap instead of
/// infinity so reports stay finite and sortable. For 8-bit-quantized
/// content the cap is otherwise unreachable (one wrong level on a single
/// pixel of a 32x32 image already sits near 83 dB).
pub const PSNR_CAP_DB: f64 = 100.0;

fn require_same_shape(a: &ImageTensor, b: &ImageTensor, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Arity(format!(
            "{what}: shapes {}x{}x{} and {}x{}x{} differ",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over [0,1] intensities, all elements
/// pooled; identical inputs return [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    require_same_shape(a, b, "psnr")?;
    let mut acc = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        acc += d * d;
    }
    let mse = acc / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Valid-region separable correlation with the normalized Gaussian window.
fn window_filter(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * plane[y * w + x + k];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean structural similarity with an 11-tap Gaussian window (spread 1.5),
/// stabilizers K1=0.01 / K2=0.03 on unit dynamic range, valid-region
/// windows only, channels averaged.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    require_same_shape(a, b, "ssim")?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let channels = a.channels();
    let n = h * w;
    let mut per_channel_mean = 0.0;
    let mut pa = vec![0.0; n];
    let mut pb = vec![0.0; n];
    let mut paa = vec![0.0; n];
    let mut pbb = vec![0.0; n];
    let mut pab = vec![0.0; n];
    for c in 0..channels {
        for i in 0..n {
            let (x, y) = (a.data()[i * channels + c], b.data()[i * channels + c]);
            pa[i] = x;
            pb[i] = y;
            paa[i] = x * x;
            pbb[i] = y * y;
            pab[i] = x * y;
        }
        let mu_a = window_filter(&pa, h, w, &win);
        let mu_b = window_filter(&pb, h, w, &win);
        let m_aa = window_filter(&paa, h, w, &win);
        let m_bb = window_filter(&pbb, h, w, &win);
        let m_ab = window_filter(&pab, h, w, &win);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = m_aa[i] - ma * ma;
            let vb = m_bb[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        per_channel_mean += acc / mu_a.len() as f64;
    }
    Ok(per_channel_mean / channels as f64)
}

/// One channel's cumulative error distribution over 256 uniform bins on
/// [0,1], plus the mean and (population) variance of the absolute errors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CedCurve {
    pub cumulative: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

/// Per-channel cumulative histograms of absolute intensity errors.
/// Errors of 1.0 land in the final bin; every curve ends at exactly 1.0.
pub fn ced(a: &ImageTensor, b: &ImageTensor) -> Result<Vec<CedCurve>> {
    require_same_shape(a, b, "ced")?;
    let channels = a.channels();
    let n = a.height() * a.width();
    let mut curves = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut counts = [0u64; 256];
        let mut sum = 0.0;
        for i in 0..n {
            let e = (a.data()[i * channels + c] - b.data()[i * channels + c]).abs();
            let bin = ((e * 256.0).floor() as usize).min(255);
            counts[bin] += 1;
            sum += e;
        }
        let mean = sum / n as f64;
        let mut varsum = 0.0;
        for i in 0..n {
            let e = (a.data()[i * channels + c] - b.data()[i * channels + c]).abs();
            varsum += (e - mean) * (e - mean);
        }
        let mut cumulative = Vec::with_capacity(256);
        let mut running = 0u64;
        for count in counts {
            running += count;
            cumulative.push(running as f64 / n as f64);
        }
        curves.push(CedCurve { cumulative, mean, variance: varsum / n as f64 });
    }
    Ok(curves)
}

/// Patch geometry and saturation tolerance for bright-channel statistics.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BrightChannelConfig {
    /// Half-width of the square patch window.
    pub patch_radius: usize,
    /// A pixel counts as brightest when 1 - J <= this tolerance.
    pub brightness_tolerance: f64,
}

impl Default for BrightChannelConfig {
    fn default() -> Self {
        BrightChannelConfig { patch_radius: 2, brightness_tolerance: 1.0 / 255.0 }
    }
}

impl BrightChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.brightness_tolerance) {
            return Err(Error::Config(format!(
                "brightness tolerance {} outside [0, 1)",
                self.brightness_tolerance
            )));
        }
        Ok(())
    }
}

/// Bright-channel map: each pixel is the maximum intensity over all
/// channels within the patch window, truncated at image borders.
/// The row/column maxima are taken separably, which is equivalent to the
/// direct rectangle scan.
pub fn bright_channel(img: &ImageTensor, cfg: &BrightChannelConfig) -> Result<ImageTensor> {
    if img.channels() != 3 {
        return Err(Error::Arity(format!(
            "bright_channel expects a 3-channel image, got {}",
            img.channels()
        )));
    }
    cfg.validate()?;
    let (h, w) = (img.height(), img.width());
    let r = cfg.patch_radius;
    let mut rowmax = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            let mut m = f64::NEG_INFINITY;
            for xx in lo..=hi {
                for c in 0..3 {
                    m = m.max(img.get(y, xx, c));
                }
            }
            rowmax[y * w + x] = m;
        }
    }
    let mut out = ImageTensor::zeros(h, w, 1);
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            let mut m = f64::NEG_INFINITY;
            for yy in lo..=hi {
                m = m.max(rowmax[yy * w + x]);
            }
            out.set(y, x, 0, m);
        }
    }
    Ok(out)
}

/// Number of bright-channel pixels within the saturation tolerance of 1.
pub fn count_bright_pixels(img: &ImageTensor, cfg: &BrightChannelConfig) -> Result<usize> {
    let map = bright_channel(img, cfg)?;
    Ok(map.data().iter().filter(|&&j| 1.0 - j <= cfg.brightness_tolerance).count())
}

/// Outcome of the bright-pixel inequality between the two decompositions.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Prop1Outcome {
    pub pass: bool,
    /// Bright pixels of O - R_chan (channel-wise rain removed).
    pub bright_chan: usize,
    /// Bright pixels of O - R_gray (channel-uniform rain removed).
    pub bright_gray: usize,
}

/// Checks that removing channel-wise rain leaves at least as many bright
/// pixels as removing the channel-uniform envelope: with B = O - R_chan and
/// Bbar = O - R_gray (both clamped to [0,1]), count(B) >= count(Bbar).
/// The premise R_chan <= R_gray elementwise is required.
pub fn proposition1_check(
    o: &ImageTensor,
    r_chan: &ImageTensor,
    r_gray: &ImageTensor,
    cfg: &BrightChannelConfig,
) -> Result<Prop1Outcome> {
    require_same_shape(o, r_chan, "proposition1_check")?;
    require_same_shape(o, r_gray, "proposition1_check")?;
    if o.channels() != 3 {
        return Err(Error::Arity("proposition1_check expects 3-channel images".into()));
    }
    for (i, (c, g)) in r_chan.data().iter().zip(r_gray.data()).enumerate() {
        if c > g {
            return Err(Error::Precondition(format!(
                "premise violated at element {i}: channel rain {c} exceeds uniform rain {g}"
            )));
        }
    }
    let subtract = |rain: &ImageTensor| {
        let mut out = o.clone();
        for (v, r) in out.data_mut().iter_mut().zip(rain.data()) {
            *v = (*v - r).clamp(0.0, 1.0);
        }
        out
    };
    let bright_chan = count_bright_pixels(&subtract(r_chan), cfg)?;
    let bright_gray = count_bright_pixels(&subtract(r_gray), cfg)?;
    Ok(Prop1Outcome { pass: bright_chan >= bright_gray, bright_chan, bright_gray })
}

/// Metrics of one restored/reference pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ced: Option<Vec<CedCurve>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bright_pixel_count: Option<usize>,
}

/// Per-image rows plus aggregate means.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        MetricReport { rows, mean_psnr, mean_ssim }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = stream_rng(seed, 90);
        ImageTensor::from_fn(h, w, 3, |_, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn psnr_of_identical_images_is_capped() {
        let a = rand_image(1, 6, 6);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_of_uniform_difference_is_twenty_db() {
        let a = ImageTensor::from_fn(5, 4, 3, |_, _, _| 0.3);
        let b = ImageTensor::from_fn(5, 4, 3, |_, _, _| 0.4);
        let v = psnr(&a, &b).unwrap();
        assert!((v - 20.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn psnr_matches_two_pass_oracle() {
        let a = rand_image(2, 7, 9);
        let b = rand_image(3, 7, 9);
        let mse: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.data().len() as f64;
        let expect = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = ImageTensor::zeros(4, 4, 3);
        let b = ImageTensor::zeros(4, 5, 3);
        assert!(matches!(psnr(&a, &b), Err(Error::Arity(_))));
    }

    #[test]
    fn psnr_decreases_with_mse() {
        let a = ImageTensor::zeros(4, 4, 3);
        let mut prev = f64::INFINITY;
        for k in 1..=5 {
            let b = ImageTensor::from_fn(4, 4, 3, |_, _, _| 0.05 * k as f64);
            let v = psnr(&a, &b).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn ssim_self_similarity_is_one() {
        let a = rand_image(4, 12, 13);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_opposite_constants_is_tiny() {
        let a = ImageTensor::zeros(12, 12, 3);
        let b = ImageTensor::from_fn(12, 12, 3, |_, _, _| 1.0);
        let v = ssim(&a, &b).unwrap();
        // luminance term C1 / (1 + C1)
        assert!(v < 0.05, "{v}");
        assert!((v - 1e-4 / (1.0 + 1e-4)).abs() < 1e-9);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = rand_image(5, 14, 11);
        let b = rand_image(6, 14, 11);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_stays_in_range() {
        for seed in 0..5 {
            let a = rand_image(seed, 11, 11);
            let b = rand_image(seed + 50, 11, 11);
            let v = ssim(&a, &b).unwrap();
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = ImageTensor::zeros(10, 12, 3);
        assert!(matches!(ssim(&a, &a), Err(Error::Config(_))));
    }

    #[test]
    fn ced_of_identical_images_saturates_at_bin_zero() {
        let a = rand_image(7, 6, 6);
        let curves = ced(&a, &a).unwrap();
        assert_eq!(curves.len(), 3);
        for c in curves {
            assert_eq!(c.cumulative[0], 1.0);
            assert_eq!(*c.cumulative.last().unwrap(), 1.0);
            assert_eq!(c.mean, 0.0);
            assert_eq!(c.variance, 0.0);
        }
    }

    #[test]
    fn ced_of_half_step_errors() {
        // half the pixels err by exactly 0.5 in every channel
        let h = 4;
        let a = ImageTensor::zeros(h, 4, 3);
        let b = ImageTensor::from_fn(h, 4, 3, |r, _, _| if r < h / 2 { 0.5 } else { 0.0 });
        let curves = ced(&a, &b).unwrap();
        for c in &curves {
            assert_eq!(c.cumulative[0], 0.5);
            assert_eq!(c.cumulative[127], 0.5);
            assert_eq!(c.cumulative[128], 1.0);
            assert!((c.mean - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn ced_dominance_for_uniformly_better_restoration() {
        let reference = rand_image(8, 8, 8);
        let mut worse = reference.clone();
        let mut better = reference.clone();
        let mut rng = stream_rng(9, 91);
        for i in 0..worse.data().len() {
            let e = rng.gen_range(0.0..0.4);
            worse.data_mut()[i] = (reference.data()[i] + e).clamp(0.0, 1.0);
            better.data_mut()[i] = (reference.data()[i] + e / 2.0).clamp(0.0, 1.0);
        }
        let cw = ced(&worse, &reference).unwrap();
        let cb = ced(&better, &reference).unwrap();
        for (w, b) in cw.iter().zip(&cb) {
            for (x, y) in w.cumulative.iter().zip(&b.cumulative) {
                assert!(y >= x);
            }
        }
    }

    proptest! {
        #[test]
        fn ced_curves_are_monotone_and_end_at_one(seed in 0u64..500) {
            let a = rand_image(seed, 5, 7);
            let b = rand_image(seed + 1000, 5, 7);
            for curve in ced(&a, &b).unwrap() {
                let mut prev = 0.0;
                for &v in &curve.cumulative {
                    prop_assert!(v >= prev);
                    prev = v;
                }
                prop_assert_eq!(prev, 1.0);
            }
        }
    }

    fn brute_force_bright(img: &ImageTensor, r: usize) -> ImageTensor {
        let (h, w) = (img.height(), img.width());
        ImageTensor::from_fn(h, w, 1, |y, x, _| {
            let mut m = f64::NEG_INFINITY;
            for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    for c in 0..3 {
                        m = m.max(img.get(yy, xx, c));
                    }
                }
            }
            m
        })
    }

    #[test]
    fn bright_channel_matches_brute_force() {
        for trial in 0..20 {
            let img = rand_image(trial, 8, 8);
            for r in 0..=2 {
                let cfg = BrightChannelConfig { patch_radius: r, ..Default::default() };
                let fast = bright_channel(&img, &cfg).unwrap();
                let slow = brute_force_bright(&img, r);
                assert_eq!(fast.data(), slow.data(), "trial {trial} radius {r}");
            }
        }
    }

    #[test]
    fn bright_channel_degenerate_cases() {
        let ones = ImageTensor::from_fn(4, 4, 3, |_, _, _| 1.0);
        let cfg = BrightChannelConfig::default();
        assert!(bright_channel(&ones, &cfg).unwrap().data().iter().all(|&v| v == 1.0));

        let img = rand_image(30, 5, 5);
        let cfg0 = BrightChannelConfig { patch_radius: 0, ..Default::default() };
        let map = bright_channel(&img, &cfg0).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let expect = (0..3).map(|c| img.get(y, x, c)).fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(map.get(y, x, 0), expect);
            }
        }
    }

    #[test]
    fn bright_pixel_counting() {
        let ones = ImageTensor::from_fn(3, 5, 3, |_, _, _| 1.0);
        let cfg = BrightChannelConfig { patch_radius: 2, brightness_tolerance: 0.0 };
        assert_eq!(count_bright_pixels(&ones, &cfg).unwrap(), 15);

        let half = ImageTensor::from_fn(3, 5, 3, |_, _, _| 0.5);
        let cfg = BrightChannelConfig { patch_radius: 2, brightness_tolerance: 1.0 / 255.0 };
        assert_eq!(count_bright_pixels(&half, &cfg).unwrap(), 0);

        // exactly 7 saturated pixels, radius 0
        let mut img = ImageTensor::from_fn(4, 4, 3, |_, _, _| 0.2);
        for i in 0..7 {
            img.set(i / 4, i % 4, 1, 1.0);
        }
        let cfg = BrightChannelConfig { patch_radius: 0, brightness_tolerance: 0.0 };
        assert_eq!(count_bright_pixels(&img, &cfg).unwrap(), 7);
    }

    #[test]
    fn proposition_holds_for_equal_decompositions() {
        let o = rand_image(11, 6, 6);
        let r = ImageTensor::from_fn(6, 6, 3, |_, _, _| 0.1);
        let cfg = BrightChannelConfig::default();
        let out = proposition1_check(&o, &r, &r, &cfg).unwrap();
        assert!(out.pass);
        assert_eq!(out.bright_chan, out.bright_gray);
    }

    #[test]
    fn proposition_strict_case_with_saturated_background() {
        // saturated scene; the channel-uniform envelope removes 0.1 more
        // rain everywhere, pushing patches below the saturation tolerance
        let o = ImageTensor::from_fn(6, 6, 3, |_, _, _| 1.0);
        let r_chan = ImageTensor::from_fn(6, 6, 3, |_, _, _| 0.0);
        let r_gray = ImageTensor::from_fn(6, 6, 3, |_, _, _| 0.1);
        let cfg = BrightChannelConfig { patch_radius: 1, brightness_tolerance: 1.0 / 255.0 };
        let out = proposition1_check(&o, &r_chan, &r_gray, &cfg).unwrap();
        assert!(out.pass);
        assert!(out.bright_chan > out.bright_gray);
    }

    #[test]
    fn proposition_rejects_violated_premise() {
        let o = rand_image(12, 5, 5);
        let r_chan = ImageTensor::from_fn(5, 5, 3, |_, _, _| 0.3);
        let r_gray = ImageTensor::from_fn(5, 5, 3, |_, _, _| 0.2);
        let cfg = BrightChannelConfig::default();
        assert!(matches!(
            proposition1_check(&o, &r_chan, &r_gray, &cfg),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn proposition_random_valid_decompositions_always_pass() {
        let mut rng = stream_rng(13, 92);
        let cfg = BrightChannelConfig::default();
        for _ in 0..100 {
            let o = ImageTensor::from_fn(7, 7, 3, |_, _, _| rng.gen_range(0.0..=1.0));
            let r_gray = ImageTensor::from_fn(7, 7, 3, |_, _, _| rng.gen_range(0.0..0.6));
            let mut r_chan = r_gray.clone();
            for v in r_chan.data_mut().iter_mut() {
                *v *= rng.gen_range(0.0..=1.0);
            }
            let out = proposition1_check(&o, &r_chan, &r_gray, &cfg).unwrap();
            assert!(out.pass);
        }
    }

    #[test]
    fn report_aggregates_are_row_means() {
        let rows = vec![
            MetricRow { id: "a".into(), psnr: 20.0, ssim: 0.5, ced: None, bright_pixel_count: None },
            MetricRow { id: "b".into(), psnr: 30.0, ssim: 0.7, ced: None, bright_pixel_count: Some(3) },
        ];
        let report = MetricReport::from_rows(rows);
        assert!((report.mean_psnr - 25.0).abs() < 1e-12);
        assert!((report.mean_ssim - 0.6).abs() < 1e-12);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"bright_pixel_count\":3"));
    }
}
