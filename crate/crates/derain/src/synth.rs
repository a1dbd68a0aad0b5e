//! Paired clean/rainy data with ground-truth rain-density maps.
//!
//! Rain is composed additively per channel: `rainy = clamp(clean + rain)`,
//! with the rain layer built from anti-aliased line segments whose
//! intensity is drawn independently per color channel. The density label
//! for supervision is 0 where the rainy-minus-clean residual is exactly
//! zero and `sigmoid(residual)` elsewhere.
//!
//! Every random choice is drawn from a stream addressed by (seed, dataset
//! entry index), so entries are individually reproducible and a rebuilt
//! dataset is bit-identical file by file.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image, save_image, ImageTensor, PatchSpec};
use crate::rng::{stream_rng, streams};

/// Rain-streak generation parameters. Angles are degrees from vertical;
/// lengths and thickness are in pixels; intensities are additive in [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RainParams {
    pub streak_count: usize,
    pub length_range: (f64, f64),
    pub angle_range: (f64, f64),
    pub intensity_range_r: (f64, f64),
    pub intensity_range_g: (f64, f64),
    pub intensity_range_b: (f64, f64),
    pub thickness: f64,
    pub blur_radius: f64,
    pub seed: u64,
}

impl Default for RainParams {
    fn default() -> Self {
        RainParams {
            streak_count: 12,
            length_range: (8.0, 24.0),
            angle_range: (-25.0, 25.0),
            intensity_range_r: (0.2, 0.8),
            intensity_range_g: (0.2, 0.8),
            intensity_range_b: (0.2, 0.8),
            thickness: 1.2,
            blur_radius: 0.0,
            seed: 0,
        }
    }
}

impl RainParams {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("length_range", self.length_range),
            ("angle_range", self.angle_range),
            ("intensity_range_r", self.intensity_range_r),
            ("intensity_range_g", self.intensity_range_g),
            ("intensity_range_b", self.intensity_range_b),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) {
                return Err(Error::Config(format!("{name} has min > max ({lo} > {hi})")));
            }
        }
        for (name, (lo, hi)) in [
            ("intensity_range_r", self.intensity_range_r),
            ("intensity_range_g", self.intensity_range_g),
            ("intensity_range_b", self.intensity_range_b),
        ] {
            if lo < 0.0 || hi > 1.0 {
                return Err(Error::Config(format!("{name} must lie within [0,1]")));
            }
        }
        if self.length_range.0 < 0.0 {
            return Err(Error::Config("streak length must be non-negative".into()));
        }
        if self.thickness <= 0.0 {
            return Err(Error::Config("thickness must be positive".into()));
        }
        if self.blur_radius < 0.0 {
            return Err(Error::Config("blur_radius must be non-negative".into()));
        }
        Ok(())
    }

    fn intensity_range(&self, channel: usize) -> (f64, f64) {
        match channel {
            0 => self.intensity_range_r,
            1 => self.intensity_range_g,
            _ => self.intensity_range_b,
        }
    }
}

/// Adds one anti-aliased segment of the given half-width profile to a
/// single-channel plane. Coverage at a pixel center `p` is
/// `clamp(thickness/2 + 0.5 - dist(p, segment), 0, 1)`, i.e. a hard core
/// with a one-pixel soft edge.
pub fn rasterize_streak(
    plane: &mut ImageTensor,
    p0: (f64, f64),
    p1: (f64, f64),
    thickness: f64,
    intensity: f64,
) {
    let (h, w) = (plane.height(), plane.width());
    debug_assert_eq!(plane.channels(), 1);
    let reach = thickness / 2.0 + 0.5;
    let r_lo = (p0.0.min(p1.0) - reach).floor().max(0.0) as usize;
    let r_hi = ((p0.0.max(p1.0) + reach).ceil() as isize).min(h as isize - 1);
    let c_lo = (p0.1.min(p1.1) - reach).floor().max(0.0) as usize;
    let c_hi = ((p0.1.max(p1.1) + reach).ceil() as isize).min(w as isize - 1);
    if r_hi < 0 || c_hi < 0 {
        return;
    }
    for r in r_lo..=r_hi as usize {
        for c in c_lo..=c_hi as usize {
            let d = point_segment_distance((r as f64, c as f64), p0, p1);
            let cov = (reach - d).clamp(0.0, 1.0);
            if cov > 0.0 {
                let v = plane.get(r, c, 0);
                plane.set(r, c, 0, v + intensity * cov);
            }
        }
    }
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let ab = (b.0 - a.0, b.1 - a.1);
    let ap = (p.0 - a.0, p.1 - a.1);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    let t = if len2 > 0.0 {
        ((ap.0 * ab.0 + ap.1 * ab.1) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = (ap.0 - t * ab.0, ap.1 - t * ab.1);
    (d.0 * d.0 + d.1 * d.1).sqrt()
}

/// Synthesizes rain on a 3-channel clean image.
///
/// Returns `(rainy, rain_layer)` with `rainy = clamp(clean + rain_layer)`.
/// The rain layer is non-negative everywhere and differs across channels
/// whenever the per-channel intensity ranges do. Identical `params`
/// (including `seed`) give bit-identical outputs.
pub fn synthesize_rain(clean: &ImageTensor, params: &RainParams) -> Result<(ImageTensor, ImageTensor)> {
    if clean.channels() != 3 {
        return Err(Error::Arity("synthesize_rain needs a 3-channel image".into()));
    }
    params.validate()?;
    let (h, w) = (clean.height(), clean.width());
    let mut rng = stream_rng(params.seed, 0);
    let mut planes = [
        ImageTensor::zeros(h, w, 1),
        ImageTensor::zeros(h, w, 1),
        ImageTensor::zeros(h, w, 1),
    ];
    for _ in 0..params.streak_count {
        // draw order is part of the determinism contract:
        // center row, center col, length, angle, then R/G/B intensity
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let len = sample_range(&mut rng, params.length_range);
        let angle = sample_range(&mut rng, params.angle_range).to_radians();
        let dir = (angle.cos(), angle.sin()); // (d_row, d_col); 0 deg falls straight down
        let half = len / 2.0;
        let p0 = (cy - half * dir.0, cx - half * dir.1);
        let p1 = (cy + half * dir.0, cx + half * dir.1);
        for ch in 0..3 {
            let intensity = sample_range(&mut rng, params.intensity_range(ch));
            if intensity > 0.0 {
                rasterize_streak(&mut planes[ch], p0, p1, params.thickness, intensity);
            }
        }
    }
    if params.blur_radius > 0.0 {
        for plane in &mut planes {
            gaussian_blur(plane, params.blur_radius);
        }
    }
    let rain = ImageTensor::merge_channels(&planes)?;
    let mut rainy = clean.clone();
    for (o, r) in rainy.data_mut().iter_mut().zip(rain.data()) {
        *o = (*o + *r).clamp(0.0, 1.0);
    }
    Ok((rainy, rain))
}

fn sample_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// In-place separable Gaussian blur (sigma in pixels, taps out to 3 sigma,
/// border-truncated with per-pixel renormalization). Rows first, then
/// columns.
fn gaussian_blur(plane: &mut ImageTensor, sigma: f64) {
    let half = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-half..=half)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let (h, w) = (plane.height() as isize, plane.width() as isize);
    let pass = |horizontal: bool, src: &[f64], dst: &mut [f64]| {
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for (i, &wt) in weights.iter().enumerate() {
                    let k = i as isize - half;
                    let (rr, cc) = if horizontal { (r, c + k) } else { (r + k, c) };
                    if rr >= 0 && rr < h && cc >= 0 && cc < w {
                        acc += wt * src[(rr * w + cc) as usize];
                        norm += wt;
                    }
                }
                dst[(r * w + c) as usize] = acc / norm;
            }
        }
    };
    let mut tmp = vec![0.0; (h * w) as usize];
    pass(true, plane.data(), &mut tmp);
    let buf = plane.data_mut();
    pass(false, &tmp, buf);
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Ground-truth rain-density maps: per channel, 0 where the residual
/// `rainy - clean` is exactly zero, `sigmoid(residual)` elsewhere.
///
/// The rule is applied to the signed residual as written; with the additive
/// rain model residuals are never negative, so values land in {0} U [0.5, 1).
pub fn density_ground_truth(clean: &ImageTensor, rainy: &ImageTensor) -> Result<[ImageTensor; 3]> {
    if clean.channels() != 3 || rainy.channels() != 3 {
        return Err(Error::Arity("density_ground_truth needs 3-channel images".into()));
    }
    if !clean.same_shape(rainy) {
        return Err(Error::Arity("clean and rainy shapes differ".into()));
    }
    let clean_planes = clean.split_channels()?;
    let rainy_planes = rainy.split_channels()?;
    let mut out = Vec::with_capacity(3);
    for ch in 0..3 {
        let data = clean_planes[ch]
            .data()
            .iter()
            .zip(rainy_planes[ch].data())
            .map(|(&c, &r)| {
                let residual = r - c;
                if residual == 0.0 {
                    0.0
                } else {
                    sigmoid(residual)
                }
            })
            .collect();
        out.push(ImageTensor::new(clean.height(), clean.width(), 1, data)?);
    }
    Ok(out.try_into().expect("three planes"))
}

/// Procedural clean-image source: smooth colored fields with a few soft
/// bright and dark blobs, values kept inside (0, 1). Stands in for a photo
/// corpus at desk scale; deterministic per seed.
pub fn synthetic_clean_image(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = stream_rng(seed, 0);
    let mut base = [0.0f64; 3];
    for b in &mut base {
        *b = rng.gen_range(0.3..0.6);
    }
    // shared low-frequency waves with per-channel amplitudes
    let mut waves = Vec::new();
    for _ in 0..4 {
        let fr = rng.gen_range(0.5..2.5) / height.max(2) as f64;
        let fc = rng.gen_range(0.5..2.5) / width.max(2) as f64;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amps = [
            rng.gen_range(0.03..0.16),
            rng.gen_range(0.03..0.16),
            rng.gen_range(0.03..0.16),
        ];
        waves.push((fr, fc, phase, amps));
    }
    let mut blobs = Vec::new();
    for i in 0..4 {
        let cy = rng.gen_range(0.0..height as f64);
        let cx = rng.gen_range(0.0..width as f64);
        let radius = rng.gen_range(0.1..0.35) * height.min(width) as f64;
        let amp = if i == 3 {
            -rng.gen_range(0.15..0.3) // one dark blob
        } else {
            rng.gen_range(0.2..0.45)
        };
        let tint = [
            rng.gen_range(0.7..1.0),
            rng.gen_range(0.7..1.0),
            rng.gen_range(0.7..1.0),
        ];
        blobs.push((cy, cx, radius, amp, tint));
    }
    ImageTensor::from_fn(height, width, 3, |r, c, ch| {
        let mut v = base[ch];
        for &(fr, fc, phase, amps) in &waves {
            v += amps[ch] * (std::f64::consts::TAU * (fr * r as f64 + fc * c as f64) + phase).cos();
        }
        for &(cy, cx, radius, amp, tint) in &blobs {
            let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
            v += amp * tint[ch] * (-d2 / (2.0 * radius * radius)).exp();
        }
        v.clamp(0.02, 0.98)
    })
}

/// One dataset triple; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clean: String,
    pub rainy: String,
    pub density: [String; 3],
}

/// Dataset description: generation parameters echoed verbatim plus the
/// entry list. Serialized as TOML next to the generated files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub patch_size: usize,
    pub seed: u64,
    pub count: usize,
    pub params: RainParams,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clean_path(&self, i: usize) -> PathBuf {
        self.base_dir.join(&self.entries[i].clean)
    }

    pub fn rainy_path(&self, i: usize) -> PathBuf {
        self.base_dir.join(&self.entries[i].rainy)
    }

    pub fn density_path(&self, i: usize, channel: usize) -> PathBuf {
        self.base_dir.join(&self.entries[i].density[channel])
    }
}

/// Writes `manifest.toml` into the manifest's `base_dir`; returns the path.
pub fn save_manifest(manifest: &DatasetManifest) -> Result<PathBuf> {
    let path = manifest.base_dir.join("manifest.toml");
    let text = toml::to_string_pretty(manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a manifest and verifies every referenced file exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::Config(format!("manifest parse: {e}")))?;
    manifest.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    if manifest.count != manifest.entries.len() {
        return Err(Error::Config(format!(
            "manifest count {} does not match {} entries",
            manifest.count,
            manifest.entries.len()
        )));
    }
    for i in 0..manifest.len() {
        for p in [manifest.clean_path(i), manifest.rainy_path(i)]
            .into_iter()
            .chain((0..3).map(|c| manifest.density_path(i, c)))
        {
            if !p.exists() {
                return Err(Error::Config(format!("manifest references missing file {}", p.display())));
            }
        }
    }
    Ok(manifest)
}

/// Generates `count` (clean, rainy, density x3) triples from random patches
/// of images under `clean_dir` and writes them plus `manifest.toml` under
/// `out_dir`.
///
/// All stored images are 8-bit quantized; density maps are computed from
/// the quantized clean/rainy pair, so the files on disk are mutually
/// consistent under the density rule. Entry `i` draws only from stream
/// (params.seed, entry i), which makes re-runs bit-identical file by file.
pub fn build_dataset(
    clean_dir: impl AsRef<Path>,
    params: &RainParams,
    count: usize,
    patch_size: usize,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    params.validate()?;
    if patch_size == 0 {
        return Err(Error::Config("patch_size must be positive".into()));
    }
    let clean_dir = clean_dir.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(clean_dir)
        .map_err(|e| Error::io(clean_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|s| s.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "bmp")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!(
            "no clean images found in {}",
            clean_dir.display()
        )));
    }
    let mut sources = Vec::new();
    for f in &files {
        let img = load_image(f)?;
        if img.channels() == 3 && img.height() >= patch_size && img.width() >= patch_size {
            sources.push(img);
        }
    }
    if sources.is_empty() {
        return Err(Error::Bounds(format!(
            "no clean image in {} is at least {patch_size}x{patch_size} with 3 channels",
            clean_dir.display()
        )));
    }

    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = stream_rng(params.seed, streams::dataset_entry(i as u64));
        let src = &sources[rng.gen_range(0..sources.len())];
        let spec = PatchSpec {
            size: patch_size,
            origin_row: rng.gen_range(0..=src.height() - patch_size),
            origin_col: rng.gen_range(0..=src.width() - patch_size),
        };
        let clean = src.extract_patch(&spec)?.quantize8();
        let entry_params = RainParams { seed: rng.gen(), ..params.clone() };
        let (rainy_raw, _) = synthesize_rain(&clean, &entry_params)?;
        let rainy = rainy_raw.quantize8();
        let density = density_ground_truth(&clean, &rainy)?;

        let entry = ManifestEntry {
            clean: format!("clean_{i:05}.png"),
            rainy: format!("rainy_{i:05}.png"),
            density: [
                format!("density_{i:05}_r.png"),
                format!("density_{i:05}_g.png"),
                format!("density_{i:05}_b.png"),
            ],
        };
        save_image(&clean, out_dir.join(&entry.clean))?;
        save_image(&rainy, out_dir.join(&entry.rainy))?;
        for (c, name) in entry.density.iter().enumerate() {
            save_image(&density[c], out_dir.join(name))?;
        }
        entries.push(entry);
    }

    let manifest = DatasetManifest {
        patch_size,
        seed: params.seed,
        count,
        params: params.clone(),
        entries,
        base_dir: out_dir.to_path_buf(),
    };
    save_manifest(&manifest)?;
    Ok(manifest)
}
