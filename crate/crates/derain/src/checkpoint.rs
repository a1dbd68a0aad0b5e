//! Binary model checkpoints. The format is little-endian throughout and
//! stores every parameter as raw f64 bits, so save/load round-trips are
//! bit-exact (subnormals, signed zeros, extremes included).
//!
//! Layout: magic, architecture fields, training metadata, then each store
//! entry in creation order as (name, trainable, shape, values). Loading
//! re-derives the expected entry list from the architecture and rejects
//! any structural deviation.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{init_params, ModelCheckpoint, NetworkConfig, TrainMeta};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"DRNCKPT1";

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_bits().to_le_bytes());
}

/// Serializes a checkpoint; the encoding is a pure function of its contents.
pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(64 + ckpt.store.num_values() * 8);
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, ckpt.config.depth as u32);
    put_u32(&mut buf, ckpt.config.filters as u32);
    put_u32(&mut buf, ckpt.config.kernel as u32);
    put_u32(&mut buf, ckpt.config.sde_layers as u32);
    put_f64(&mut buf, ckpt.config.leak);
    put_u64(&mut buf, ckpt.meta.epoch as u64);
    put_u64(&mut buf, ckpt.meta.step);
    put_u64(&mut buf, ckpt.meta.seed);
    put_u64(&mut buf, ckpt.store.entries.len() as u64);
    for e in &ckpt.store.entries {
        put_u32(&mut buf, e.name.len() as u32);
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(e.trainable as u8);
        put_u32(&mut buf, e.shape.len() as u32);
        for &d in &e.shape {
            put_u64(&mut buf, d as u64);
        }
        for &v in &e.data {
            put_f64(&mut buf, v);
        }
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: need {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}

/// Loads and structurally validates a checkpoint. Entry names, shapes,
/// order, and trainable flags must match what the stored architecture
/// prescribes; anything else is a [`Error::Checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let config = NetworkConfig {
        depth: r.u32()? as usize,
        filters: r.u32()? as usize,
        kernel: r.u32()? as usize,
        sde_layers: r.u32()? as usize,
        leak: r.f64()?,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("{}: stored architecture invalid: {e}", path.display())))?;
    let meta = TrainMeta {
        epoch: r.u64()? as usize,
        step: r.u64()?,
        seed: r.u64()?,
    };
    // Reference store carries the authoritative entry list for this
    // architecture; its values are discarded.
    let reference = init_params(&config, 0)?;
    let count = r.u64()? as usize;
    if count != reference.entries.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} entries stored, architecture requires {}",
            path.display(),
            count,
            reference.entries.len()
        )));
    }
    let mut store = ParamStore::new();
    for expect in &reference.entries {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint(format!("{}: entry name is not UTF-8", path.display())))?;
        if name != expect.name {
            return Err(Error::Checkpoint(format!(
                "{}: entry '{name}' where '{}' was expected",
                path.display(),
                expect.name
            )));
        }
        let trainable = match r.take(1)?[0] {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Checkpoint(format!(
                    "{}: entry '{name}': bad trainable flag {other}",
                    path.display()
                )))
            }
        };
        if trainable != expect.trainable {
            return Err(Error::Checkpoint(format!(
                "{}: entry '{name}': trainable flag disagrees with architecture",
                path.display()
            )));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        if shape != expect.shape {
            return Err(Error::Checkpoint(format!(
                "{}: entry '{name}': shape {shape:?} does not match expected {:?}",
                path.display(),
                expect.shape
            )));
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f64()?);
        }
        store.add(name, shape, data, trainable);
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes after last entry",
            path.display(),
            buf.len() - r.pos
        )));
    }
    Ok(ModelCheckpoint { config, store, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageTensor;
    use crate::model::{derain_channelwise_forward, ForwardMode};
    use crate::rng::stream_rng;
    use rand::Rng;

    fn tiny_config() -> NetworkConfig {
        NetworkConfig { depth: 3, filters: 4, kernel: 3, sde_layers: 3, leak: 0.2 }
    }

    fn bit_pattern(store: &ParamStore) -> Vec<u64> {
        store
            .entries
            .iter()
            .flat_map(|e| e.data.iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact_including_extreme_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut ckpt = ModelCheckpoint::init(tiny_config(), 42).unwrap();
        ckpt.meta = TrainMeta { epoch: 3, step: 1234, seed: 42 };
        let specials = [
            f64::from_bits(1), // smallest subnormal
            -0.0,
            f64::MAX,
            f64::MIN,
            f64::MIN_POSITIVE,
            1.0 + f64::EPSILON,
            -1e-310, // negative subnormal
        ];
        let n_entries = ckpt.store.entries.len();
        for (i, v) in specials.iter().enumerate() {
            ckpt.store.entries[i % n_entries].data[0] = *v;
        }
        let path = dir.path().join("model.bin");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.meta, ckpt.meta);
        assert_eq!(loaded.store.entries.len(), ckpt.store.entries.len());
        for (a, b) in loaded.store.entries.iter().zip(&ckpt.store.entries) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.trainable, b.trainable);
        }
        assert_eq!(bit_pattern(&loaded.store), bit_pattern(&ckpt.store));
    }

    #[test]
    fn loaded_model_reproduces_outputs_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = ModelCheckpoint::init(tiny_config(), 7).unwrap();
        let path = dir.path().join("model.bin");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        let mut rng = stream_rng(5, 77);
        let x = ImageTensor::from_fn(8, 8, 3, |_, _, _| rng.gen_range(0.0..1.0));
        let a = derain_channelwise_forward(&ckpt, &x, None, ForwardMode::Infer, 9).unwrap();
        let b = derain_channelwise_forward(&loaded, &x, None, ForwardMode::Infer, 9).unwrap();
        assert_eq!(a.yhat.data(), b.yhat.data());
        for c in 0..3 {
            assert_eq!(a.density[c].data(), b.density[c].data());
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not_a_checkpoint.bin");
        std::fs::write(&path, b"PNGCKPT1 some other file").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = ModelCheckpoint::init(tiny_config(), 1).unwrap();
        let path = dir.path().join("model.bin");
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [4usize, 20, 60, bytes.len() / 2, bytes.len() - 1] {
            let short = dir.path().join("short.bin");
            std::fs::write(&short, &bytes[..cut]).unwrap();
            assert!(
                matches!(load_checkpoint(&short), Err(Error::Checkpoint(_))),
                "cut at {cut} was accepted"
            );
        }
    }

    #[test]
    fn tampered_entry_name_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = ModelCheckpoint::init(tiny_config(), 1).unwrap();
        let path = dir.path().join("model.bin");
        save_checkpoint(&ckpt, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let first = ckpt.store.entries[0].name.as_bytes();
        let at = bytes.windows(first.len()).position(|w| w == first).unwrap();
        bytes[at] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = ModelCheckpoint::init(tiny_config(), 1).unwrap();
        let path = dir.path().join("model.bin");
        save_checkpoint(&ckpt, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn wrong_entry_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = ModelCheckpoint::init(tiny_config(), 1).unwrap();
        let path = dir.path().join("model.bin");
        save_checkpoint(&ckpt, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // entry count sits after magic(8) + config(16+8) + meta(24)
        let off = 8 + 16 + 8 + 24;
        bytes[off] = bytes[off].wrapping_add(1);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_checkpoint("/nonexistent/dir/model.bin"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn save_into_missing_directory_is_io_error() {
        let ckpt = ModelCheckpoint::init(tiny_config(), 1).unwrap();
        assert!(matches!(
            save_checkpoint(&ckpt, "/nonexistent/dir/model.bin"),
            Err(Error::Io { .. })
        ));
    }
}
