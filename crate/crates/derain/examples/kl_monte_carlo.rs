//! Cross-checks the closed-form Gaussian KL divergence against a plain
//! Monte-Carlo estimate of E_q[ln q(z) - ln p(z)].

use derain::image::ImageTensor;
use derain::losses::kl_gaussian;
use derain::model::GaussianLatent;
use derain::rng::stream_rng;
use rand::Rng;
use rand_distr::StandardNormal;

fn point(mu: f64, sigma: f64) -> derain::Result<GaussianLatent> {
    GaussianLatent::new(
        ImageTensor::from_fn(1, 1, 1, |_, _, _| mu),
        ImageTensor::from_fn(1, 1, 1, |_, _, _| sigma),
    )
}

fn main() -> derain::Result<()> {
    let mut rng = stream_rng(123, 0);
    println!("{:>28} {:>12} {:>12} {:>9}", "q | p", "closed form", "monte carlo", "rel err");
    for _ in 0..8 {
        let mq: f64 = rng.gen_range(-1.0..1.0);
        let sq: f64 = rng.gen_range(0.5..1.5);
        let mp: f64 = rng.gen_range(-1.0..1.0);
        let sp: f64 = rng.gen_range(0.5..1.5);
        let closed = kl_gaussian(&point(mq, sq)?, &point(mp, sp)?)?;

        let n = 400_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            let z = mq + sq * e;
            let lq = -((z - mq) / sq).powi(2) / 2.0 - sq.ln();
            let lp = -((z - mp) / sp).powi(2) / 2.0 - sp.ln();
            acc += lq - lp;
        }
        let mc = acc / n as f64;
        println!(
            "N({mq:+.2},{sq:.2}^2) | N({mp:+.2},{sp:.2}^2) {closed:>12.6} {mc:>12.6} {:>9.1e}",
            (mc - closed).abs() / closed.abs().max(1e-12)
        );
    }
    Ok(())
}
