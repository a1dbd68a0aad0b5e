//! Compares analytic gradients of the full per-channel loss against
//! central finite differences on a miniature network.

use derain::image::ImageTensor;
use derain::model::{init_params, Channel, NetworkConfig};
use derain::rng::stream_rng;
use derain::train::{probe_gradients, probe_loss};
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> derain::Result<()> {
    let net = NetworkConfig { depth: 2, filters: 4, kernel: 3, sde_layers: 2, leak: 0.2 };
    let mut store = init_params(&net, 1)?;
    let mut rng = stream_rng(1, 77);
    for e in store.entries.iter_mut().filter(|e| e.trainable) {
        for v in e.data.iter_mut() {
            *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let hw = 8;
    let mut rng = stream_rng(2, 0);
    let mut plane = |normal: bool| {
        ImageTensor::from_fn(hw, hw, 1, |_, _, _| {
            if normal { rng.sample(StandardNormal) } else { rng.gen_range(0.0..1.0) }
        })
    };
    let (x, y, d, eps) = (plane(false), plane(false), plane(false), plane(true));
    let ch = Channel::R;
    let grads = probe_gradients(&store, &net, ch, 0.1, 1.0, &x, &y, &d, &eps)?;

    println!("{:<22} {:>14} {:>14} {:>10}", "parameter", "analytic", "finite diff", "rel err");
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (name, grad) in grads.iter().filter(|(n, _)| n.starts_with("r.")).step_by(3) {
        let i = grad.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0;
        let an = grad[i];
        let e = store.entries.iter().position(|e| &e.name == name).unwrap();
        let v0 = store.entries[e].data[i];
        store.entries[e].data[i] = v0 + h;
        let lp = probe_loss(&store, &net, ch, 0.1, 1.0, &x, &y, &d, &eps)?;
        store.entries[e].data[i] = v0 - h;
        let lm = probe_loss(&store, &net, ch, 0.1, 1.0, &x, &y, &d, &eps)?;
        store.entries[e].data[i] = v0;
        let fd = (lp - lm) / (2.0 * h);
        let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-12);
        worst = worst.max(rel);
        println!("{:<22} {an:>14.6e} {fd:>14.6e} {rel:>10.2e}", format!("{name}[{i}]"));
    }
    println!("worst relative error: {worst:.2e}");
    Ok(())
}
