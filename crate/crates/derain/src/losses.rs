//! Training objectives: KL between the posterior and conditional prior,
//! batch-averaged reconstruction and density errors, and their weighted sum.
//!
//! The KL uses the closed form for diagonal Gaussians; the Monte-Carlo
//! cross-check against E_q[log q - log p] lives in the tests and the
//! self-check suite. Batch losses divide by the image count, KL included,
//! so beta keeps the same meaning at any batch size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::GaussianLatent;

/// All components of one objective evaluation. The composite fields hold
/// exactly `rec + beta*kl` and `cvae + lambda*sde` as computed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub rec: f64,
    pub sde: f64,
    pub cvae: f64,
    pub total: f64,
    pub beta: f64,
    pub lambda: f64,
}

/// Summed KL(q || p) over all pixels of a pair of diagonal Gaussian maps:
/// log(sigma_p/sigma_q) + (sigma_q^2 + (mu_q - mu_p)^2) / (2 sigma_p^2) - 1/2.
pub fn kl_gaussian(q: &GaussianLatent, p: &GaussianLatent) -> Result<f64> {
    if !q.mu.same_shape(&p.mu) {
        return Err(Error::Arity(format!(
            "latent shapes differ: {}x{} vs {}x{}",
            q.mu.height(),
            q.mu.width(),
            p.mu.height(),
            p.mu.width()
        )));
    }
    // fields are public, so re-check positivity rather than trust construction
    for (name, l) in [("q", q), ("p", p)] {
        if let Some(v) = l.sigma.data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!("{name} sigma must be positive, found {v}")));
        }
    }
    let (mq, sq) = (q.mu.data(), q.sigma.data());
    let (mp, sp) = (p.mu.data(), p.sigma.data());
    let mut acc = 0.0;
    for j in 0..mq.len() {
        let d = mq[j] - mp[j];
        acc += (sp[j] / sq[j]).ln() + (sq[j] * sq[j] + d * d) / (2.0 * sp[j] * sp[j]) - 0.5;
    }
    Ok(acc)
}

fn batch_mean_sq_err(a: &[ImageTensor], b: &[ImageTensor], what: &str) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Arity(format!(
            "{what}: batch sizes {} and {} must match and be nonzero",
            a.len(),
            b.len()
        )));
    }
    let first = &a[0];
    if first.channels() != 3 {
        return Err(Error::Arity(format!("{what}: expected 3-channel images, got {}", first.channels())));
    }
    let mut acc = 0.0;
    for (i, (ai, bi)) in a.iter().zip(b).enumerate() {
        if !ai.same_shape(first) || !bi.same_shape(first) {
            return Err(Error::Arity(format!("{what}: image {i} shape differs from the batch shape")));
        }
        let mut e = 0.0;
        for (x, y) in ai.data().iter().zip(bi.data()) {
            let d = x - y;
            e += d * d;
        }
        acc += e;
    }
    Ok(acc / a.len() as f64)
}

/// Mean over the batch of the channel-summed squared Frobenius error
/// between clean images and reconstructions.
pub fn reconstruction_loss(y_batch: &[ImageTensor], yhat_batch: &[ImageTensor]) -> Result<f64> {
    batch_mean_sq_err(y_batch, yhat_batch, "reconstruction_loss")
}

/// Same structure as [`reconstruction_loss`], over density maps.
pub fn sde_loss(d_batch: &[ImageTensor], dhat_batch: &[ImageTensor]) -> Result<f64> {
    batch_mean_sq_err(d_batch, dhat_batch, "sde_loss")
}

/// Combines the three components: cvae = rec + beta*kl, total = cvae + lambda*sde.
pub fn total_loss(kl: f64, rec: f64, sde: f64, beta: f64, lambda: f64) -> Result<LossBreakdown> {
    for (name, v) in [("kl", kl), ("rec", rec), ("sde", sde), ("beta", beta), ("lambda", lambda)] {
        if !(v >= 0.0) {
            return Err(Error::Domain(format!("{name} must be non-negative, got {v}")));
        }
    }
    let cvae = rec + beta * kl;
    let total = cvae + lambda * sde;
    Ok(LossBreakdown { kl, rec, sde, cvae, total, beta, lambda })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn pixel_latent(mu: f64, sigma: f64) -> GaussianLatent {
        GaussianLatent::new(
            ImageTensor::new(1, 1, 1, vec![mu]).unwrap(),
            ImageTensor::new(1, 1, 1, vec![sigma]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn kl_of_identical_gaussians_is_zero() {
        let q = pixel_latent(0.37, 1.9);
        assert_eq!(kl_gaussian(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn kl_matches_frozen_closed_form_values() {
        // mu_q=1, mu_p=0, equal unit sigmas: mu^2/2
        let v = kl_gaussian(&pixel_latent(1.0, 1.0), &pixel_latent(0.0, 1.0)).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        // equal mu, sigma_q=1, sigma_p=2: ln 2 + 1/8 - 1/2
        let v = kl_gaussian(&pixel_latent(0.3, 1.0), &pixel_latent(0.3, 2.0)).unwrap();
        assert!((v - 0.3181471805599453).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo_estimate() {
        // E_q[log q(z) - log p(z)] over 10^6 draws, a handful of random pairs
        let mut rng = stream_rng(40, 0);
        for trial in 0..5 {
            let mu_q = rng.gen_range(-1.0..1.0);
            let sigma_q = rng.gen_range(0.3..2.0);
            let mu_p = rng.gen_range(-1.0..1.0);
            let sigma_p = rng.gen_range(0.3..2.0);
            let exact = kl_gaussian(&pixel_latent(mu_q, sigma_q), &pixel_latent(mu_p, sigma_p)).unwrap();
            let n = 1_000_000;
            let mut acc = 0.0;
            for _ in 0..n {
                let e: f64 = rng.sample(StandardNormal);
                let z = mu_q + e * sigma_q;
                let lq = -((z - mu_q) / sigma_q).powi(2) / 2.0 - sigma_q.ln();
                let lp = -((z - mu_p) / sigma_p).powi(2) / 2.0 - sigma_p.ln();
                acc += lq - lp;
            }
            let estimate = acc / n as f64;
            let tol = (0.01 * exact.abs()).max(1e-2);
            assert!((estimate - exact).abs() < tol, "trial {trial}: exact {exact}, mc {estimate}");
        }
    }

    #[test]
    fn kl_rejects_nonpositive_sigma() {
        let mut bad = pixel_latent(0.0, 1.0);
        bad.sigma.set(0, 0, 0, 0.0);
        let ok = pixel_latent(0.0, 1.0);
        assert!(matches!(kl_gaussian(&bad, &ok), Err(Error::Domain(_))));
        assert!(matches!(kl_gaussian(&ok, &bad), Err(Error::Domain(_))));
    }

    #[test]
    fn kl_rejects_shape_mismatch() {
        let q = pixel_latent(0.0, 1.0);
        let p = GaussianLatent::new(ImageTensor::zeros(2, 2, 1), ImageTensor::from_fn(2, 2, 1, |_, _, _| 1.0)).unwrap();
        assert!(matches!(kl_gaussian(&q, &p), Err(Error::Arity(_))));
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(
            mu_q in -3.0f64..3.0, sq in 0.05f64..4.0,
            mu_p in -3.0f64..3.0, sp in 0.05f64..4.0,
        ) {
            let v = kl_gaussian(&pixel_latent(mu_q, sq), &pixel_latent(mu_p, sp)).unwrap();
            prop_assert!(v >= -1e-12, "kl {v}");
        }
    }

    fn const_image(h: usize, w: usize, v: f64) -> ImageTensor {
        ImageTensor::from_fn(h, w, 3, |_, _, _| v)
    }

    #[test]
    fn reconstruction_of_identical_batches_is_zero() {
        let y = vec![const_image(4, 4, 0.5), const_image(4, 4, 0.25)];
        assert_eq!(reconstruction_loss(&y, &y.clone()).unwrap(), 0.0);
    }

    #[test]
    fn single_pixel_difference_squares() {
        let y = vec![const_image(3, 3, 0.25)];
        let mut yhat = y.clone();
        yhat[0].set(1, 2, 0, 0.75);
        assert_eq!(reconstruction_loss(&y, &yhat).unwrap(), 0.25);
    }

    #[test]
    fn duplicating_the_batch_preserves_the_mean() {
        let mut rng = stream_rng(41, 0);
        let y = vec![ImageTensor::from_fn(4, 5, 3, |_, _, _| rng.gen_range(0.0..1.0))];
        let yhat = vec![ImageTensor::from_fn(4, 5, 3, |_, _, _| rng.gen_range(0.0..1.0))];
        let single = reconstruction_loss(&y, &yhat).unwrap();
        let doubled = reconstruction_loss(
            &[y[0].clone(), y[0].clone()],
            &[yhat[0].clone(), yhat[0].clone()],
        )
        .unwrap();
        assert!((single - doubled).abs() < 1e-12);
    }

    #[test]
    fn constant_difference_scales_as_area() {
        let (h, w, delta) = (6, 7, 0.125);
        let y = vec![const_image(h, w, 0.5)];
        let yhat = vec![const_image(h, w, 0.5 + delta)];
        let v = reconstruction_loss(&y, &yhat).unwrap();
        assert!((v - (h * w * 3) as f64 * delta * delta).abs() < 1e-12);
    }

    #[test]
    fn sde_loss_means_per_image_errors() {
        // per-image channel-summed errors 0.3 and 0.5 average to 0.4
        let d = vec![const_image(2, 2, 0.0), const_image(2, 2, 0.0)];
        let mut dhat = d.clone();
        dhat[0].set(0, 0, 1, 0.3f64.sqrt());
        dhat[1].set(1, 1, 2, 0.5f64.sqrt());
        let v = sde_loss(&d, &dhat).unwrap();
        assert!((v - 0.4).abs() < 1e-12);
    }

    #[test]
    fn sde_loss_is_order_invariant() {
        let mut rng = stream_rng(42, 0);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| ImageTensor::from_fn(3, 3, 3, |_, _, _| rng.gen_range(0.0..1.0));
        let d = vec![mk(&mut rng), mk(&mut rng), mk(&mut rng)];
        let dhat = vec![mk(&mut rng), mk(&mut rng), mk(&mut rng)];
        let a = sde_loss(&d, &dhat).unwrap();
        let b = sde_loss(
            &[d[2].clone(), d[0].clone(), d[1].clone()],
            &[dhat[2].clone(), dhat[0].clone(), dhat[1].clone()],
        )
        .unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn batch_shape_mismatches_are_arity_errors() {
        let y = vec![const_image(3, 3, 0.0)];
        assert!(matches!(reconstruction_loss(&y, &[]), Err(Error::Arity(_))));
        let wrong = vec![const_image(4, 3, 0.0)];
        assert!(matches!(reconstruction_loss(&y, &wrong), Err(Error::Arity(_))));
        let plane = vec![ImageTensor::zeros(3, 3, 1)];
        assert!(matches!(reconstruction_loss(&plane, &plane.clone()), Err(Error::Arity(_))));
    }

    #[test]
    fn total_loss_composes_exactly() {
        let lb = total_loss(2.0, 1.0, 0.5, 0.1, 1.0).unwrap();
        assert_eq!(lb.cvae, 1.0 + 0.1 * 2.0);
        assert_eq!(lb.total, lb.cvae + 1.0 * 0.5);
        assert!((lb.cvae - 1.2).abs() < 1e-12);
        assert!((lb.total - 1.7).abs() < 1e-12);

        let zero = total_loss(0.0, 0.0, 0.0, 0.1, 1.0).unwrap();
        assert_eq!(zero.total, 0.0);

        let ablated = total_loss(5.0, 1.5, 0.25, 0.0, 2.0).unwrap();
        assert_eq!(ablated.total, 1.5 + 2.0 * 0.25);
    }

    #[test]
    fn total_loss_rejects_negative_components() {
        assert!(matches!(total_loss(-1.0, 0.0, 0.0, 0.1, 1.0), Err(Error::Domain(_))));
        assert!(matches!(total_loss(0.0, -0.1, 0.0, 0.1, 1.0), Err(Error::Domain(_))));
        assert!(matches!(total_loss(0.0, 0.0, 0.0, -0.1, 1.0), Err(Error::Domain(_))));
        assert!(matches!(total_loss(0.0, 0.0, 0.0, 0.1, -1.0), Err(Error::Domain(_))));
        assert!(matches!(total_loss(f64::NAN, 0.0, 0.0, 0.1, 1.0), Err(Error::Domain(_))));
    }
}
