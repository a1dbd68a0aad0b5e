//! Monte-Carlo deraining: per channel, the density map and conditional
//! prior are computed once, then the decoder is re-run over independently
//! drawn latents and the reconstructions are averaged uniformly.
//!
//! Latent noise for (channel, sample j) comes from its own seeded stream,
//! so sample j is the same image no matter how many samples are requested;
//! growing the budget refines the average without rewriting history.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image, save_image, ImageTensor};
use crate::metrics::{psnr, ssim, MetricReport, MetricRow};
use crate::model::{
    build_dec_net, build_gauss_net, build_sde_net, Channel, ModelCheckpoint, NetKind,
};
use crate::nn::{Graph, Mode};
use crate::rng::{streams, stream_rng};
use crate::synth::load_manifest;

/// Sampling budget and noise seed for deraining.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Latent draws averaged per channel.
    pub n_samples: usize,
    /// Keys every per-sample noise stream.
    pub seed: u64,
    /// Also return each sample's reconstruction. Costs n extra images of
    /// memory; meant for small inputs.
    pub emit_intermediates: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { n_samples: 100, seed: 0, emit_intermediates: false }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Result of deraining one image.
#[derive(Clone, Debug)]
pub struct DerainOutput {
    /// Sample-averaged reconstruction, clamped to [0, 1] after averaging.
    pub image: ImageTensor,
    /// Estimated rain density per channel (R, G, B planes).
    pub density: Vec<ImageTensor>,
    /// Per-sample reconstructions, present when requested.
    pub intermediates: Vec<ImageTensor>,
}

/// Restores a rainy image with `cfg.n_samples` latent draws per channel.
/// Bit-deterministic in (checkpoint, image, config).
pub fn derain(ckpt: &ModelCheckpoint, rainy: &ImageTensor, cfg: &InferenceConfig) -> Result<DerainOutput> {
    cfg.validate()?;
    if rainy.channels() != 3 {
        return Err(Error::Arity(format!(
            "rainy input must have 3 channels, got {}",
            rainy.channels()
        )));
    }
    let (h, w) = (rainy.height(), rainy.width());
    let n = h * w;
    let planes = rainy.split_channels()?;
    let mut restored = Vec::with_capacity(3);
    let mut density = Vec::with_capacity(3);
    let n_kept = if cfg.emit_intermediates { cfg.n_samples } else { 0 };
    let mut samples: Vec<Vec<ImageTensor>> = vec![Vec::new(); n_kept];
    for (c, ch) in Channel::ALL.into_iter().enumerate() {
        // Pass 1: density map and conditional prior, one forward.
        let mut ga = Graph::new(Mode::Eval);
        let x = ga.input([1, 1, h, w]);
        ga.set_input(x, planes[c].data());
        let d = build_sde_net(&mut ga, &ckpt.store, &ckpt.config, ch, x);
        let (mu_id, raw_id) = build_gauss_net(&mut ga, &ckpt.store, &ckpt.config, ch, NetKind::Prior, &[x, d]);
        ga.forward(&ckpt.store);
        let d_plane = ga.data(d).to_vec();
        let mu = ga.data(mu_id).to_vec();
        // sigma kept as raw exp so a collapsed prior yields exactly mu
        let sigma: Vec<f64> = ga.data(raw_id).iter().map(|r| (r * 0.5).exp()).collect();

        // Pass 2: decoder, re-run per latent draw.
        let mut gb = Graph::new(Mode::Eval);
        let xb = gb.input([1, 1, h, w]);
        let zb = gb.input([1, 1, h, w]);
        let db = gb.input([1, 1, h, w]);
        let y = build_dec_net(&mut gb, &ckpt.store, &ckpt.config, ch, &[xb, zb, db]);
        gb.set_input(xb, planes[c].data());
        gb.set_input(db, &d_plane);
        let mut acc = vec![0.0; n];
        let mut z = vec![0.0; n];
        for j in 0..cfg.n_samples {
            let mut rng = stream_rng(cfg.seed, streams::inference_sample(c, j as u64));
            for i in 0..n {
                let eps: f64 = rng.sample(StandardNormal);
                z[i] = mu[i] + eps * sigma[i];
            }
            gb.set_input(zb, &z);
            gb.forward(&ckpt.store);
            let out = gb.data(y);
            for (a, v) in acc.iter_mut().zip(out) {
                *a += v;
            }
            if cfg.emit_intermediates {
                samples[j].push(ImageTensor::new(h, w, 1, out.to_vec())?);
            }
        }
        for a in acc.iter_mut() {
            *a /= cfg.n_samples as f64;
        }
        restored.push(ImageTensor::new(h, w, 1, acc)?);
        density.push(ImageTensor::new(h, w, 1, d_plane)?);
    }
    let restored: [ImageTensor; 3] = restored.try_into().expect("one plane per channel");
    let image = ImageTensor::merge_channels(&restored)?.clamp01();
    let intermediates = samples
        .into_iter()
        .map(|chans| {
            let chans: [ImageTensor; 3] = chans.try_into().expect("one plane per channel");
            ImageTensor::merge_channels(&chans)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DerainOutput { image, density, intermediates })
}

/// Outcome of a batch run: written outputs, per-file failures, and a
/// metric report when ground truth accompanied the inputs.
#[derive(Debug, Default)]
pub struct BatchOutcome {
    pub report: Option<MetricReport>,
    /// (input id, written file) in processing order.
    pub outputs: Vec<(String, PathBuf)>,
    /// (input id, error description); failures do not stop the batch.
    pub failures: Vec<(String, String)>,
}

fn image_files_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|s| s.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "jpg" | "jpeg" | "bmp")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

fn stem_of(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

/// Derains every image named by `input` into `out_dir`.
///
/// `input` is either a dataset manifest (restorations are scored against
/// the clean images) or a directory of rainy images (no scoring). Files
/// that fail to load or process are recorded and skipped; the batch always
/// runs to completion.
pub fn derain_batch(
    input: impl AsRef<Path>,
    ckpt: &ModelCheckpoint,
    cfg: &InferenceConfig,
    out_dir: impl AsRef<Path>,
) -> Result<BatchOutcome> {
    cfg.validate()?;
    let input = input.as_ref();
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let meta = std::fs::metadata(input).map_err(|e| Error::io(input, e))?;
    // (id, rainy path, clean path when known)
    let work: Vec<(String, PathBuf, Option<PathBuf>)> = if meta.is_file() {
        let manifest = load_manifest(input)?;
        (0..manifest.len())
            .map(|i| {
                (stem_of(&manifest.rainy_path(i)), manifest.rainy_path(i), Some(manifest.clean_path(i)))
            })
            .collect()
    } else {
        image_files_in(input)?
            .into_iter()
            .map(|p| (stem_of(&p), p, None))
            .collect()
    };
    let scored = meta.is_file();
    let mut outcome = BatchOutcome::default();
    let mut rows = Vec::new();
    for (id, rainy_path, clean_path) in work {
        let result = (|| -> Result<(PathBuf, Option<MetricRow>)> {
            let rainy = load_image(&rainy_path)?;
            let out = derain(ckpt, &rainy, cfg)?;
            let dest = out_dir.join(format!("{id}.png"));
            save_image(&out.image, &dest)?;
            let row = match &clean_path {
                Some(p) => {
                    let clean = load_image(p)?;
                    Some(MetricRow {
                        id: id.clone(),
                        psnr: psnr(&out.image, &clean)?,
                        ssim: ssim(&out.image, &clean)?,
                        ced: None,
                        bright_pixel_count: None,
                    })
                }
                None => None,
            };
            Ok((dest, row))
        })();
        match result {
            Ok((dest, row)) => {
                outcome.outputs.push((id, dest));
                rows.extend(row);
            }
            Err(e) => outcome.failures.push((id, e.to_string())),
        }
    }
    if scored {
        outcome.report = Some(MetricReport::from_rows(rows));
    }
    Ok(outcome)
}
