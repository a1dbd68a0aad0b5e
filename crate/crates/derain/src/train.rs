//! Training loop: three parameter-disjoint channel stacks optimized
//! jointly with Adam on the variational objective plus the density loss.
//!
//! All stochasticity (shuffles, crops, latent noise) is drawn from streams
//! keyed by the config seed, the absolute epoch, and the global step, so a
//! run is a pure function of (manifest, config) and resumed runs continue
//! exactly where the checkpoint left off.

use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::image::{load_image, ImageTensor, PatchSpec};
use crate::infer::{derain, InferenceConfig};
use crate::losses::{total_loss, LossBreakdown};
use crate::metrics::{psnr, ssim};
use crate::model::{
    build_dec_net, build_gauss_net, build_sde_net, Channel, ModelCheckpoint, NetKind,
    NetworkConfig, TrainMeta,
};
use crate::nn::{Graph, Id, Mode, ParamStore};
use crate::rng::{streams, stream_rng};
use crate::synth::DatasetManifest;

/// Optimization hyperparameters. Defaults follow the reference recipe:
/// beta 0.1, lambda 1, Adam at 0.01 decayed tenfold per epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the KL term inside the variational loss.
    pub beta: f64,
    /// Weight of the density estimation loss.
    pub lambda: f64,
    /// Initial Adam learning rate.
    pub lr: f64,
    /// Multiplicative learning-rate factor applied per epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Square crop fed to the networks; images must be at least this big.
    pub patch_size: usize,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// Keys initialization, shuffles, crops, and latent noise.
    pub seed: u64,
    /// Architecture for fresh models; resumed runs keep the checkpoint's.
    pub network: NetworkConfig,
    /// Hard cap on the global step counter; None trains full epochs.
    pub max_steps: Option<u64>,
    /// Where per-epoch and final checkpoints are written; None keeps the
    /// result in memory only.
    pub checkpoint_dir: Option<PathBuf>,
    /// Leading manifest entries scored (PSNR/SSIM, one sample) after each
    /// epoch; 0 disables validation.
    pub val_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.1,
            lambda: 1.0,
            lr: 0.01,
            lr_decay: 0.1,
            epochs: 4,
            batch_size: 32,
            patch_size: 64,
            weight_decay: 1e-10,
            seed: 0,
            network: NetworkConfig::default(),
            max_steps: None,
            checkpoint_dir: None,
            val_pairs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::Config(format!("lr_decay {} must be positive", self.lr_decay)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be at least 1".into()));
        }
        for (name, v) in [("beta", self.beta), ("lambda", self.lambda), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} {v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

/// One optimizer step as logged.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Wall-clock seconds since training started.
    pub elapsed_s: f64,
}

/// End-of-epoch bookkeeping.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
    pub checkpoint: Option<String>,
}

/// Full training history: the config that produced it plus per-step and
/// per-epoch records. Steps are strictly increasing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Writes the log as JSON lines: a config header, then one line per
    /// step and per epoch in order.
    pub fn write_jsonl(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let mut emit = |v: serde_json::Value| -> Result<()> {
            writeln!(out, "{v}").map_err(|e| Error::io(path, e))
        };
        emit(json!({ "config": self.config }))?;
        for s in &self.steps {
            emit(json!({
                "step": s.step,
                "epoch": s.epoch,
                "lr": s.lr,
                "kl": s.loss.kl,
                "rec": s.loss.rec,
                "sde": s.loss.sde,
                "cvae": s.loss.cvae,
                "total": s.loss.total,
                "elapsed_s": s.elapsed_s,
            }))?;
        }
        for e in &self.epochs {
            emit(json!({
                "epoch": e.epoch,
                "val_psnr": e.val_psnr,
                "val_ssim": e.val_ssim,
                "checkpoint": e.checkpoint,
            }))?;
        }
        Ok(())
    }
}

/// One training example held in memory as per-channel planes.
struct Sample {
    x: [ImageTensor; 3],
    y: [ImageTensor; 3],
    d: [ImageTensor; 3],
}

fn load_samples(manifest: &DatasetManifest, patch: usize) -> Result<Vec<Sample>> {
    if manifest.is_empty() {
        return Err(Error::Config("manifest has no entries".into()));
    }
    let mut samples = Vec::with_capacity(manifest.len());
    for i in 0..manifest.len() {
        if manifest.entries[i].density.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!(
                "manifest entry {i} has no density labels; generate the dataset with them"
            )));
        }
        let rainy = load_image(manifest.rainy_path(i))?;
        let clean = load_image(manifest.clean_path(i))?;
        if !rainy.same_shape(&clean) {
            return Err(Error::Arity(format!(
                "entry {i}: rainy and clean image shapes differ"
            )));
        }
        if rainy.height() < patch || rainy.width() < patch {
            return Err(Error::Config(format!(
                "entry {i} is {}x{}, smaller than patch_size {patch}",
                rainy.height(),
                rainy.width()
            )));
        }
        let mut d_planes = Vec::with_capacity(3);
        for c in 0..3 {
            let d = load_image(manifest.density_path(i, c))?;
            if d.channels() != 1 {
                return Err(Error::Arity(format!(
                    "entry {i} channel {c}: density label must be single-channel"
                )));
            }
            if d.height() != rainy.height() || d.width() != rainy.width() {
                return Err(Error::Arity(format!(
                    "entry {i} channel {c}: density label shape differs from the image"
                )));
            }
            d_planes.push(d);
        }
        samples.push(Sample {
            x: rainy.split_channels()?,
            y: clean.split_channels()?,
            d: d_planes.try_into().expect("three planes"),
        });
    }
    Ok(samples)
}

/// Node handles of one channel's training graph.
struct ChannelGraph {
    g: Graph,
    x: Id,
    y: Id,
    d: Id,
    eps: Id,
    kl: Id,
    rec: Id,
    sde: Id,
    loss: Id,
}

fn build_train_graph(
    store: &ParamStore,
    net: &NetworkConfig,
    ch: Channel,
    b: usize,
    hw: usize,
    beta: f64,
    lambda: f64,
) -> ChannelGraph {
    let mut g = Graph::new(Mode::Train);
    let x = g.input([b, 1, hw, hw]);
    let y = g.input([b, 1, hw, hw]);
    let dgt = g.input([b, 1, hw, hw]);
    let eps = g.input([b, 1, hw, hw]);
    let d = build_sde_net(&mut g, store, net, ch, x);
    let sde = g.sum_sq_diff(d, dgt);
    let (mu_q, raw_q) = build_gauss_net(&mut g, store, net, ch, NetKind::Enc, &[x, y, d]);
    let (mu_p, raw_p) = build_gauss_net(&mut g, store, net, ch, NetKind::Prior, &[x, d]);
    let kl = g.kl_sum(mu_q, raw_q, mu_p, raw_p);
    let z = g.reparam(mu_q, raw_q, eps);
    let yhat = build_dec_net(&mut g, store, net, ch, &[x, z, d]);
    let rec = g.sum_sq_diff(yhat, y);
    let cvae = g.axpy(rec, kl, beta);
    let tot = g.axpy(cvae, sde, lambda);
    let loss = g.scale(tot, 1.0 / b as f64);
    ChannelGraph { g, x, y, d: dgt, eps, kl, rec, sde, loss }
}

/// Adam with decoupled weight decay; moments are aligned with store entries.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(store: &ParamStore) -> Self {
        let m = store.entries.iter().map(|e| vec![0.0; e.data.len()]).collect::<Vec<_>>();
        Adam { v: m.clone(), m, t: 0 }
    }

    fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64, wd: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::B1.powi(self.t as i32);
        let bc2 = 1.0 - Self::B2.powi(self.t as i32);
        for (i, e) in store.entries.iter_mut().enumerate() {
            if !e.trainable {
                continue;
            }
            for k in 0..e.data.len() {
                let g = grads[i][k];
                let m = &mut self.m[i][k];
                let v = &mut self.v[i][k];
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + Self::EPS);
                e.data[k] -= lr * (update + wd * e.data[k]);
            }
        }
    }
}

/// The closed-form KL is nonnegative; graph evaluation can round a
/// near-zero sum a hair below it. Snap that back, propagate real negatives.
fn snap_nonneg(v: f64) -> f64 {
    if (-1e-9..0.0).contains(&v) {
        0.0
    } else {
        v
    }
}

/// Trains a fresh model; see [`train_from`] for the loop itself.
pub fn train(manifest: &DatasetManifest, config: &TrainConfig) -> Result<(ModelCheckpoint, TrainLog)> {
    config.validate()?;
    train_from(ModelCheckpoint::init(config.network, config.seed)?, manifest, config)
}

/// Runs `config.epochs` additional epochs from an existing model. The
/// checkpoint's architecture wins over `config.network`; epoch and step
/// counters continue from the checkpoint's metadata.
pub fn train_from(
    ckpt: ModelCheckpoint,
    manifest: &DatasetManifest,
    config: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainLog)> {
    config.validate()?;
    let net = ckpt.config;
    let samples = load_samples(manifest, config.patch_size)?;
    let mut store = ckpt.store;
    let mut adam = Adam::new(&store);
    let mut grads: Vec<Vec<f64>> = store.entries.iter().map(|e| vec![0.0; e.data.len()]).collect();
    let mut graphs: Vec<(usize, Vec<ChannelGraph>)> = Vec::new();
    let mut log = TrainLog { config: config.clone(), steps: Vec::new(), epochs: Vec::new() };
    let started = Instant::now();
    let hw = config.patch_size;
    let plane = hw * hw;
    let mut step = ckpt.meta.step;
    let start_epoch = ckpt.meta.epoch;
    let mut xbuf = vec![0.0; config.batch_size * plane];
    let mut ybuf = vec![0.0; config.batch_size * plane];
    let mut dbuf = vec![0.0; config.batch_size * plane];
    let mut ebuf = vec![0.0; config.batch_size * plane];

    'epochs: for epoch in start_epoch..start_epoch + config.epochs {
        let lr = config.lr * config.lr_decay.powi((epoch - start_epoch) as i32);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut epoch_rng = stream_rng(config.seed, streams::epoch_shuffle(epoch as u64));
        order.shuffle(&mut epoch_rng);

        for batch in order.chunks(config.batch_size) {
            if let Some(cap) = config.max_steps {
                if step >= cap {
                    break 'epochs;
                }
            }
            step += 1;
            let b = batch.len();
            // crop origins are drawn even for full-size images so the
            // draw count per epoch does not depend on patch geometry
            let crops: Vec<(usize, usize)> = batch
                .iter()
                .map(|&i| {
                    let s = &samples[i].x[0];
                    let (ry, rx) = (s.height() - hw + 1, s.width() - hw + 1);
                    (epoch_rng.gen_range(0..ry), epoch_rng.gen_range(0..rx))
                })
                .collect();
            if graphs.iter().all(|(gb, _)| *gb != b) {
                let built = Channel::ALL
                    .into_iter()
                    .map(|ch| build_train_graph(&store, &net, ch, b, hw, config.beta, config.lambda))
                    .collect();
                graphs.push((b, built));
            }
            let set = &mut graphs.iter_mut().find(|(gb, _)| *gb == b).unwrap().1;

            for gbuf in grads.iter_mut() {
                gbuf.iter_mut().for_each(|v| *v = 0.0);
            }
            let (mut kl_s, mut rec_s, mut sde_s) = (0.0, 0.0, 0.0);
            for (c, cg) in set.iter_mut().enumerate() {
                for (slot, &i) in batch.iter().enumerate() {
                    let s = &samples[i];
                    let (oy, ox) = crops[slot];
                    let spec = PatchSpec { size: hw, origin_row: oy, origin_col: ox };
                    for (buf, plane_src) in
                        [(&mut xbuf, &s.x[c]), (&mut ybuf, &s.y[c]), (&mut dbuf, &s.d[c])]
                    {
                        let p = plane_src.extract_patch(&spec)?;
                        buf[slot * plane..(slot + 1) * plane].copy_from_slice(p.data());
                    }
                }
                let mut noise = stream_rng(config.seed, streams::train_noise(step, c));
                for v in ebuf[..b * plane].iter_mut() {
                    *v = noise.sample(StandardNormal);
                }
                cg.g.set_input(cg.x, &xbuf[..b * plane]);
                cg.g.set_input(cg.y, &ybuf[..b * plane]);
                cg.g.set_input(cg.d, &dbuf[..b * plane]);
                cg.g.set_input(cg.eps, &ebuf[..b * plane]);
                cg.g.forward(&store);
                kl_s += cg.g.scalar(cg.kl);
                rec_s += cg.g.scalar(cg.rec);
                sde_s += cg.g.scalar(cg.sde);
                cg.g.backward(cg.loss);
                cg.g.commit_bn_stats(&mut store);
                for (idx, grad) in cg.g.param_grads() {
                    let dst = &mut grads[idx];
                    for (dv, gv) in dst.iter_mut().zip(grad) {
                        *dv += gv;
                    }
                }
            }
            let n = b as f64;
            for (what, v) in [("kl", kl_s), ("rec", rec_s), ("sde", sde_s)] {
                if !v.is_finite() {
                    return Err(Error::Diverged { step, what: what.into() });
                }
            }
            let breakdown = total_loss(
                snap_nonneg(kl_s / n),
                rec_s / n,
                sde_s / n,
                config.beta,
                config.lambda,
            )?;
            adam.step(&mut store, &grads, lr, config.weight_decay);
            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss: breakdown,
                elapsed_s: started.elapsed().as_secs_f64(),
            });
        }

        let meta = TrainMeta { epoch: epoch + 1, step, seed: ckpt.meta.seed };
        let (val_psnr, val_ssim) = if config.val_pairs > 0 {
            let snapshot = ModelCheckpoint { config: net, store: store.clone(), meta };
            let take = config.val_pairs.min(manifest.len());
            let (p, s) = score_pairs(&snapshot, manifest, take, 1)?;
            (Some(p), Some(s))
        } else {
            (None, None)
        };
        let checkpoint = match &config.checkpoint_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let name = format!("checkpoint_epoch{:03}_step{:06}.bin", epoch + 1, step);
                let snapshot = ModelCheckpoint { config: net, store: store.clone(), meta };
                save_checkpoint(&snapshot, dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        log.epochs.push(EpochRecord { epoch, val_psnr, val_ssim, checkpoint });
    }

    let final_epoch = log.epochs.last().map(|e| e.epoch + 1).unwrap_or(start_epoch);
    let final_meta = TrainMeta { epoch: final_epoch.max(start_epoch), step, seed: ckpt.meta.seed };
    let out = ModelCheckpoint { config: net, store, meta: final_meta };
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&out, dir.join("checkpoint_final.bin"))?;
    }
    Ok((out, log))
}

fn score_pairs(
    ckpt: &ModelCheckpoint,
    manifest: &DatasetManifest,
    take: usize,
    n_samples: usize,
) -> Result<(f64, f64)> {
    let cfg = InferenceConfig { n_samples, seed: 0, emit_intermediates: false };
    let (mut psum, mut ssum) = (0.0, 0.0);
    for i in 0..take {
        let rainy = load_image(manifest.rainy_path(i))?;
        let clean = load_image(manifest.clean_path(i))?;
        let out = derain(ckpt, &rainy, &cfg)?;
        psum += psnr(&out.image, &clean)?;
        ssum += ssim(&out.image, &clean)?;
    }
    Ok((psum / take as f64, ssum / take as f64))
}

/// Mean PSNR and SSIM of the model over every pair in the manifest,
/// restored with `n_samples` latent draws.
pub fn validate(
    ckpt: &ModelCheckpoint,
    manifest: &DatasetManifest,
    n_samples: usize,
) -> Result<(f64, f64)> {
    if manifest.is_empty() {
        return Err(Error::Config("validation manifest has no entries".into()));
    }
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    score_pairs(ckpt, manifest, manifest.len(), n_samples)
}

/// Training objective of one channel on a single example with fixed latent
/// noise: (rec + beta kl + lambda sde) for batch size 1. Pure in `store`.
#[allow(clippy::too_many_arguments)]
pub fn probe_loss(
    store: &ParamStore,
    net: &NetworkConfig,
    channel: Channel,
    beta: f64,
    lambda: f64,
    x_c: &ImageTensor,
    y_c: &ImageTensor,
    d_c: &ImageTensor,
    eps: &ImageTensor,
) -> Result<f64> {
    let mut cg = probe_graph(store, net, channel, beta, lambda, x_c, y_c, d_c, eps)?;
    cg.g.forward(store);
    Ok(cg.g.scalar(cg.loss))
}

/// Analytic gradients of [`probe_loss`] for every trainable entry, in
/// store order. Entries the objective never touches (the other channels')
/// report exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn probe_gradients(
    store: &ParamStore,
    net: &NetworkConfig,
    channel: Channel,
    beta: f64,
    lambda: f64,
    x_c: &ImageTensor,
    y_c: &ImageTensor,
    d_c: &ImageTensor,
    eps: &ImageTensor,
) -> Result<Vec<(String, Vec<f64>)>> {
    let mut cg = probe_graph(store, net, channel, beta, lambda, x_c, y_c, d_c, eps)?;
    cg.g.forward(store);
    cg.g.backward(cg.loss);
    let mut grads: Vec<Vec<f64>> = store.entries.iter().map(|e| vec![0.0; e.data.len()]).collect();
    for (idx, grad) in cg.g.param_grads() {
        for (dv, gv) in grads[idx].iter_mut().zip(grad) {
            *dv += gv;
        }
    }
    Ok(store
        .entries
        .iter()
        .zip(grads)
        .filter(|(e, _)| e.trainable)
        .map(|(e, g)| (e.name.clone(), g))
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn probe_graph(
    store: &ParamStore,
    net: &NetworkConfig,
    channel: Channel,
    beta: f64,
    lambda: f64,
    x_c: &ImageTensor,
    y_c: &ImageTensor,
    d_c: &ImageTensor,
    eps: &ImageTensor,
) -> Result<ChannelGraph> {
    net.validate()?;
    for (name, t) in [("x_c", x_c), ("y_c", y_c), ("d_c", d_c), ("eps", eps)] {
        if t.channels() != 1 {
            return Err(Error::Arity(format!("{name} must be a single-channel plane")));
        }
        if !t.same_shape(x_c) {
            return Err(Error::Arity(format!("{name} shape differs from x_c")));
        }
    }
    if x_c.height() != x_c.width() {
        return Err(Error::Arity("probe expects square patches".into()));
    }
    let mut cg = build_train_graph(store, net, channel, 1, x_c.height(), beta, lambda);
    cg.g.set_input(cg.x, x_c.data());
    cg.g.set_input(cg.y, y_c.data());
    cg.g.set_input(cg.d, d_c.data());
    cg.g.set_input(cg.eps, eps.data());
    Ok(cg)
}
