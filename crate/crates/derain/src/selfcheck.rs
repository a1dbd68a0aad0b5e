//! Runtime invariant checks: fast, self-contained verifications of the
//! mathematical properties the pipeline depends on. `run_all` powers the
//! `check` CLI subcommand; the individual checks are reused by the
//! acceptance suite at their full sample counts.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::image::ImageTensor;
use crate::losses::kl_gaussian;
use crate::metrics::{bright_channel, ced, proposition1_check, psnr, ssim, BrightChannelConfig};
use crate::model::{reparameterize, GaussianLatent};
use crate::rng::stream_rng;
use crate::synth::density_ground_truth;

/// Verdict of one invariant check.
#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
    /// Worst-case numbers observed, for the report line.
    pub detail: String,
    pub seconds: f64,
}

fn outcome(name: &str, started: Instant, pass: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name: name.into(), pass, detail, seconds: started.elapsed().as_secs_f64() }
}

fn scalar_latent(mu: f64, sigma: f64) -> GaussianLatent {
    GaussianLatent::new(
        ImageTensor::new(1, 1, 1, vec![mu]).unwrap(),
        ImageTensor::new(1, 1, 1, vec![sigma]).unwrap(),
    )
    .unwrap()
}

/// Compares a closed-form KL implementation against a Monte-Carlo estimate
/// of E_q[ln q(z) - ln p(z)] over random scalar Gaussian pairs. The
/// allowed difference per pair is max(1% of the closed value, 1e-3).
///
/// The estimator is kept several standard errors inside that budget:
/// antithetic draws cancel the term linear in the noise exactly, leaving
/// per-pair variance (r^2-1)^2/n for sigma ratio r, so the ratio range is
/// scaled with the sample count such that |r^2-1| <= 2e-4 sqrt(n), putting
/// the worst-case standard error near a fifth of the 1e-3 floor.
pub fn kl_monte_carlo_check_with(
    kl: impl Fn(&GaussianLatent, &GaussianLatent) -> Result<f64>,
    pairs: usize,
    samples: usize,
    seed: u64,
) -> CheckOutcome {
    let started = Instant::now();
    let mut rng = stream_rng(seed, 70);
    let u_max = 1e-4 * (samples as f64).sqrt();
    let mut worst = 0.0f64;
    let mut worst_pair = String::new();
    for _ in 0..pairs {
        let (mq, mp) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let sp = rng.gen_range(0.5..1.5);
        let sq = sp * rng.gen_range(-u_max..u_max).exp();
        let closed = match kl(&scalar_latent(mq, sq), &scalar_latent(mp, sp)) {
            Ok(v) => v,
            Err(e) => {
                return outcome(
                    "kl_closed_form_vs_monte_carlo",
                    started,
                    false,
                    format!("closed form failed: {e}"),
                )
            }
        };
        let mut acc = 0.0;
        let half = samples / 2;
        for _ in 0..half {
            let e: f64 = rng.sample(StandardNormal);
            for s in [e, -e] {
                let z = mq + sq * s;
                let lq = -sq.ln() - (z - mq) * (z - mq) / (2.0 * sq * sq);
                let lp = -sp.ln() - (z - mp) * (z - mp) / (2.0 * sp * sp);
                acc += lq - lp;
            }
        }
        let mc = acc / (2 * half) as f64;
        let tol = (0.01 * closed.abs()).max(1e-3);
        let ratio = (closed - mc).abs() / tol;
        if ratio > worst {
            worst = ratio;
            worst_pair = format!(
                "q=N({mq:.3},{sq:.3}^2) p=N({mp:.3},{sp:.3}^2): closed {closed:.6} mc {mc:.6}"
            );
        }
    }
    outcome(
        "kl_closed_form_vs_monte_carlo",
        started,
        worst < 1.0,
        format!(
            "worst error at {:.3} of tolerance over {pairs} pairs x {samples} samples ({worst_pair})",
            worst
        ),
    )
}

/// Closed-form KL against Monte Carlo at the given sample counts.
pub fn kl_monte_carlo_check(pairs: usize, samples: usize) -> CheckOutcome {
    kl_monte_carlo_check_with(kl_gaussian, pairs, samples, 1)
}

/// Empirical mean and standard deviation of reparameterized draws from
/// N(0.3, 0.7^2) must land within 0.01 of the parameters.
pub fn reparameterization_moments_check(draws: usize) -> CheckOutcome {
    let started = Instant::now();
    let (mu, sigma) = (0.3, 0.7);
    // one plane holding all draws: reparameterize samples per pixel
    let w = 500;
    let h = draws.div_ceil(w);
    let latent = GaussianLatent::new(
        ImageTensor::from_fn(h, w, 1, |_, _, _| mu),
        ImageTensor::from_fn(h, w, 1, |_, _, _| sigma),
    )
    .unwrap();
    let z = reparameterize(&latent, 12);
    let data = &z.data()[..draws.min(z.data().len())];
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    let pass = (mean - mu).abs() < 0.01 && (std - sigma).abs() < 0.01;
    outcome(
        "reparameterization_moments",
        started,
        pass,
        format!("mean {mean:.5} (target {mu}), std {std:.5} (target {sigma}) over {draws} draws"),
    )
}

/// Density labels must be exactly zero where no rain fell and exactly the
/// logistic of the residual where it did.
pub fn density_label_check(trials: usize) -> CheckOutcome {
    let started = Instant::now();
    let mut rng = stream_rng(3, 71);
    let mut worst = 0.0f64;
    let mut zeros_ok = true;
    for _ in 0..trials {
        let clean = ImageTensor::from_fn(6, 6, 3, |_, _, _| rng.gen_range(0.0..0.5));
        // rain on a random half of the pixels
        let mut rainy = clean.clone();
        let mut rained = vec![false; 6 * 6 * 3];
        for (i, v) in rainy.data_mut().iter_mut().enumerate() {
            if rng.gen_bool(0.5) {
                *v = (*v + rng.gen_range(0.05..0.5)).min(1.0);
                rained[i] = true;
            }
        }
        let labels = match density_ground_truth(&clean, &rainy) {
            Ok(l) => l,
            Err(e) => {
                return outcome("density_label_exactness", started, false, format!("{e}"))
            }
        };
        for c in 0..3 {
            for y in 0..6 {
                for x in 0..6 {
                    let r = rainy.get(y, x, c) - clean.get(y, x, c);
                    let got = labels[c].get(y, x, 0);
                    if r == 0.0 {
                        zeros_ok &= got == 0.0;
                    } else {
                        let expect = 1.0 / (1.0 + (-r).exp());
                        worst = worst.max((got - expect).abs());
                        zeros_ok &= got == expect;
                    }
                }
            }
        }
    }
    outcome(
        "density_label_exactness",
        started,
        zeros_ok,
        format!("{trials} trials, zero pixels exact, max deviation on rained pixels {worst:.2e}"),
    )
}

/// The separable bright-channel implementation must agree exactly with a
/// direct per-pixel rectangle scan.
pub fn bright_channel_check(trials: usize) -> CheckOutcome {
    let started = Instant::now();
    let mut rng = stream_rng(4, 72);
    let mut mismatches = 0usize;
    for _ in 0..trials {
        let img = ImageTensor::from_fn(8, 8, 3, |_, _, _| rng.gen_range(0.0..=1.0));
        for radius in 0..=2usize {
            let cfg = BrightChannelConfig { patch_radius: radius, ..Default::default() };
            let fast = match bright_channel(&img, &cfg) {
                Ok(m) => m,
                Err(e) => return outcome("bright_channel_brute_force", started, false, format!("{e}")),
            };
            for y in 0..8usize {
                for x in 0..8usize {
                    let mut m = f64::NEG_INFINITY;
                    for yy in y.saturating_sub(radius)..=(y + radius).min(7) {
                        for xx in x.saturating_sub(radius)..=(x + radius).min(7) {
                            for c in 0..3 {
                                m = m.max(img.get(yy, xx, c));
                            }
                        }
                    }
                    if fast.get(y, x, 0) != m {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    outcome(
        "bright_channel_brute_force",
        started,
        mismatches == 0,
        format!("{mismatches} mismatching pixels over {trials} images x radii 0..=2"),
    )
}

/// Removing channel-wise rain must leave at least as many bright pixels as
/// removing its channel-uniform envelope, for random valid decompositions
/// and for the exact-equality case.
pub fn proposition1_trials_check(trials: usize) -> CheckOutcome {
    let started = Instant::now();
    let mut rng = stream_rng(5, 73);
    let cfg = BrightChannelConfig::default();
    let mut failures = 0usize;
    let mut detail = String::new();
    for t in 0..trials {
        let o = ImageTensor::from_fn(10, 10, 3, |_, _, _| rng.gen_range(0.0..=1.0));
        let r_gray = ImageTensor::from_fn(10, 10, 3, |_, _, _| rng.gen_range(0.0..0.7));
        let mut r_chan = r_gray.clone();
        if t > 0 {
            // t = 0 keeps the decompositions equal: counts must tie
            for v in r_chan.data_mut().iter_mut() {
                *v *= rng.gen_range(0.0..=1.0);
            }
        }
        match proposition1_check(&o, &r_chan, &r_gray, &cfg) {
            Ok(out) => {
                if !out.pass || (t == 0 && out.bright_chan != out.bright_gray) {
                    failures += 1;
                    if detail.is_empty() {
                        detail = format!(
                            "trial {t}: chan {} vs gray {}",
                            out.bright_chan, out.bright_gray
                        );
                    }
                }
            }
            Err(e) => {
                failures += 1;
                if detail.is_empty() {
                    detail = format!("trial {t}: {e}");
                }
            }
        }
    }
    outcome(
        "proposition1_bright_pixels",
        started,
        failures == 0,
        if failures == 0 {
            format!("{trials} random decompositions plus the equality case hold")
        } else {
            format!("{failures}/{trials} failed; first: {detail}")
        },
    )
}

/// Spot values of the metric stack: a uniform 0.1 offset scores 20 dB, an
/// image is perfectly similar to itself, and error curves of improving
/// restorations dominate each other and end at 1.
pub fn metric_sanity_check() -> CheckOutcome {
    let started = Instant::now();
    let mut problems = Vec::new();

    let a = ImageTensor::from_fn(16, 16, 3, |_, _, _| 0.45);
    let b = ImageTensor::from_fn(16, 16, 3, |_, _, _| 0.55);
    match psnr(&a, &b) {
        Ok(v) if (v - 20.0).abs() < 1e-6 => {}
        Ok(v) => problems.push(format!("psnr of 0.1 offset: {v} != 20")),
        Err(e) => problems.push(format!("psnr: {e}")),
    }

    let mut rng = stream_rng(6, 74);
    let img = ImageTensor::from_fn(16, 16, 3, |_, _, _| rng.gen_range(0.0..1.0));
    match ssim(&img, &img) {
        Ok(v) if (v - 1.0).abs() < 1e-12 => {}
        Ok(v) => problems.push(format!("ssim self-similarity: {v} != 1")),
        Err(e) => problems.push(format!("ssim: {e}")),
    }

    let reference = ImageTensor::from_fn(16, 16, 3, |_, _, _| rng.gen_range(0.0..1.0));
    let mut prev: Option<Vec<crate::metrics::CedCurve>> = None;
    for k in (0..=4).rev() {
        // error shrinks as k drops; k = 0 is the reference itself
        let restored = ImageTensor::from_fn(16, 16, 3, |y, x, c| {
            (reference.get(y, x, c) + 0.04 * k as f64).clamp(0.0, 1.0)
        });
        match ced(&restored, &reference) {
            Ok(curves) => {
                for ch in &curves {
                    if (ch.cumulative.last().copied().unwrap_or(0.0) - 1.0).abs() > 0.0 {
                        problems.push("ced curve does not end at 1".into());
                    }
                }
                if let Some(p) = &prev {
                    for (cp, cn) in p.iter().zip(&curves) {
                        if cp.cumulative.iter().zip(&cn.cumulative).any(|(a, b)| b < a) {
                            problems.push("ced curve of a better restoration dipped below".into());
                        }
                    }
                }
                if k == 0 && curves.iter().any(|c| c.cumulative[0] != 1.0) {
                    problems.push("ced of identical images is not all-ones".into());
                }
                prev = Some(curves);
            }
            Err(e) => problems.push(format!("ced: {e}")),
        }
    }

    let pass = problems.is_empty();
    outcome(
        "metric_sanity",
        started,
        pass,
        if pass { "psnr/ssim/ced spot values hold".into() } else { problems.join("; ") },
    )
}

/// Runs every invariant check. `fast` shrinks the Monte-Carlo budgets to
/// keep the whole suite interactive; the full budgets match the acceptance
/// tolerances.
pub fn run_all(fast: bool) -> Vec<CheckOutcome> {
    let (pairs, samples) = if fast { (10, 100_000) } else { (100, 1_000_000) };
    let trials = if fast { 20 } else { 100 };
    vec![
        kl_monte_carlo_check(pairs, samples),
        reparameterization_moments_check(100_000),
        density_label_check(trials),
        bright_channel_check(trials),
        proposition1_trials_check(trials),
        metric_sanity_check(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn fast_suite_passes() {
        for check in run_all(true) {
            assert!(check.pass, "{}: {}", check.name, check.detail);
        }
    }

    #[test]
    fn corrupted_kl_is_caught_by_the_monte_carlo_oracle() {
        // negative control: a plausible-looking but wrong closed form
        // (missing the -1/2) must fail the comparison
        let wrong = |q: &GaussianLatent, p: &GaussianLatent| -> Result<f64> {
            let (mq, sq) = (q.mu.data()[0], q.sigma.data()[0]);
            let (mp, sp) = (p.mu.data()[0], p.sigma.data()[0]);
            Ok((sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp))
        };
        let check = kl_monte_carlo_check_with(wrong, 10, 50_000, 2);
        assert!(!check.pass, "corrupted KL slipped past: {}", check.detail);
    }

    #[test]
    fn erroring_kl_fails_cleanly() {
        let broken = |_: &GaussianLatent, _: &GaussianLatent| -> Result<f64> {
            Err(Error::Domain("broken".into()))
        };
        let check = kl_monte_carlo_check_with(broken, 3, 10, 3);
        assert!(!check.pass);
        assert!(check.detail.contains("broken"));
    }

    #[test]
    fn outcomes_carry_names_and_timings() {
        let outcomes = run_all(true);
        let names: Vec<&str> = outcomes.iter().map(|o| o.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "kl_closed_form_vs_monte_carlo",
                "reparameterization_moments",
                "density_label_exactness",
                "bright_channel_brute_force",
                "proposition1_bright_pixels",
                "metric_sanity",
            ]
        );
        for o in &outcomes {
            assert!(o.seconds >= 0.0);
            assert!(!o.detail.is_empty());
        }
    }
}
