//! Binary checkpoint format.
//!
//! ```text
//! "TURBOAE\0"  u32 version  u64 manifest_len  manifest (key=value lines)
//! u32 tensor_count  { u32 name_len  name  u8 dtype_bytes  u32 rank  u64 dims..  data }
//! sha256 of everything above
//! ```
//! All integers and values are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Architecture, PowerMode, TurboAe};
use crate::blocks::Permutation;
use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

const MAGIC: &[u8; 8] = b"TURBOAE\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

fn join<I: IntoIterator<Item = String>>(it: I) -> String {
    it.into_iter().collect::<Vec<_>>().join(",")
}

fn manifest<T: Real>(model: &TurboAe<T>, meta: &BTreeMap<String, String>) -> String {
    let a = model.architecture();
    let mut m = BTreeMap::new();
    m.insert("block_len", a.block_len.to_string());
    m.insert("filters", a.filters.to_string());
    m.insert("kernel", a.kernel.to_string());
    m.insert("enc_layers", a.enc_layers.to_string());
    m.insert("dec_layers", a.dec_layers.to_string());
    m.insert("iterations", a.iterations.to_string());
    m.insert("feature_size", a.feature_size.to_string());
    m.insert("power", model.power_mode().name().to_string());
    m.insert("dtype", T::DTYPE.name().to_string());
    m.insert("permutation_seed", model.permutation().seed().to_string());
    m.insert("permutation", join(model.permutation().forward().iter().map(|i| i.to_string())));
    if let Some(stats) = model.frozen_stats() {
        m.insert("frozen_stats", join(stats.iter().map(|(mu, sd)| format!("{mu:?}:{sd:?}"))));
    }
    let mut out = String::new();
    for (k, v) in &m {
        out.push_str(&format!("{k}={v}\n"));
    }
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            continue;
        }
        out.push_str(&format!("meta.{k}={v}\n"));
    }
    out
}

/// Serializes the model plus free-form `meta` entries.
pub fn save_model<T: Real>(model: &TurboAe<T>, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = manifest(model, meta);
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (_, p) in model.params().iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(T::DTYPE.size() as u8);
        buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut buf);
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::MalformedCheckpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::MalformedCheckpoint("length overflow".into()))
    }
}

fn field<'m>(m: &'m BTreeMap<String, String>, key: &str) -> Result<&'m str> {
    m.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::MalformedCheckpoint(format!("missing manifest key `{key}`")))
}

fn parse<V: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<V> {
    field(m, key)?
        .parse()
        .map_err(|_| Error::MalformedCheckpoint(format!("bad value for `{key}`")))
}

/// Reads a checkpoint. Values stored in another precision are converted to `T`.
/// Returns the model and its `meta` entries.
pub fn load_model<T: Real>(path: &Path) -> Result<(TurboAe<T>, BTreeMap<String, String>)> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::FileNotFound(path.to_path_buf())),
        Err(e) => return Err(e.into()),
    };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::ChecksumMismatch);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::ChecksumMismatch);
    }
    let mut r = Reader { buf: body, pos: 12 };
    let mlen = r.len()?;
    let text = std::str::from_utf8(r.take(mlen)?).map_err(|_| Error::MalformedCheckpoint("manifest is not UTF-8".into()))?;
    let mut m = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::MalformedCheckpoint(format!("manifest line `{line}`")))?;
        m.insert(k.to_string(), v.to_string());
    }
    let arch = Architecture {
        block_len: parse(&m, "block_len")?,
        filters: parse(&m, "filters")?,
        kernel: parse(&m, "kernel")?,
        enc_layers: parse(&m, "enc_layers")?,
        dec_layers: parse(&m, "dec_layers")?,
        iterations: parse(&m, "iterations")?,
        feature_size: parse(&m, "feature_size")?,
    };
    let power: PowerMode = field(&m, "power")?
        .parse()
        .map_err(|_| Error::MalformedCheckpoint("bad power mode".into()))?;
    let mut model = TurboAe::<T>::new(arch, power, 0)?;

    let forward = field(&m, "permutation")?
        .split(',')
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::MalformedCheckpoint("bad permutation".into()))?;
    let perm = Permutation::from_forward(forward, parse(&m, "permutation_seed")?)
        .map_err(|e| Error::MalformedCheckpoint(format!("permutation: {e}")))?;
    model.set_permutation(perm);

    if let Some(s) = m.get("frozen_stats") {
        let stats = s
            .split(',')
            .map(|pair| {
                let (a, b) = pair.split_once(':')?;
                Some((a.parse::<f64>().ok()?, b.parse::<f64>().ok()?))
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::MalformedCheckpoint("bad frozen_stats".into()))?;
        model.set_frozen_stats(Some(stats));
    }

    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(Error::MalformedCheckpoint(format!(
            "{count} tensors, architecture needs {}",
            model.params().len()
        )));
    }
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::MalformedCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let width = r.take(1)?[0] as usize;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(width).ok_or_else(|| Error::MalformedCheckpoint("size overflow".into()))?)?;
        let data: Vec<T> = match width {
            4 => raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
            8 => raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
            w => return Err(Error::MalformedCheckpoint(format!("unsupported element width {w}"))),
        };
        let id = model
            .params()
            .find(&name)
            .ok_or_else(|| Error::MalformedCheckpoint(format!("unknown tensor `{name}`")))?;
        let slot = &mut model.params_mut().get_mut(id).value;
        if slot.shape() != shape.as_slice() {
            return Err(Error::MalformedCheckpoint(format!(
                "tensor `{name}` has shape {shape:?}, expected {:?}",
                slot.shape()
            )));
        }
        *slot = Tensor::new(shape, data)?;
    }
    if r.pos != body.len() {
        return Err(Error::MalformedCheckpoint("trailing bytes".into()));
    }
    let meta = m
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
        .collect();
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{make_permutation, Rng};

    fn model() -> TurboAe<f64> {
        let mut m = TurboAe::new(Architecture::tiny(), PowerMode::Binary, 11).unwrap();
        m.compute_frozen_stats(4, 16, &mut Rng::new(3)).unwrap();
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        let meta = BTreeMap::from([("epoch".to_string(), "7".to_string())]);
        save_model(&m, &path, &meta).unwrap();
        let (back, meta_back) = load_model::<f64>(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta_back, meta);
    }

    #[test]
    fn custom_permutation_survives() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = model();
        m.set_permutation(make_permutation(8, 999));
        save_model(&m, &path, &BTreeMap::new()).unwrap();
        assert_eq!(load_model::<f64>(&path).unwrap().0.permutation(), m.permutation());
    }

    #[test]
    fn f64_checkpoint_loads_as_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        save_model(&m, &path, &BTreeMap::new()).unwrap();
        let (back, _) = load_model::<f32>(&path).unwrap();
        let id = m.params().find("enc.f1.conv0.weight").unwrap();
        let a = m.params().get(id).value.data()[0];
        let b = back.params().get(id).value.data()[0];
        assert!((a - b as f64).abs() < 1e-7);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&model(), &path, &BTreeMap::new()).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut flipped = good.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(load_model::<f64>(&path), Err(Error::ChecksumMismatch)));

        std::fs::write(&path, &good[..good.len() - 10]).unwrap();
        assert!(matches!(load_model::<f64>(&path), Err(Error::ChecksumMismatch)));

        let mut magic = good.clone();
        magic[0] = b'X';
        std::fs::write(&path, &magic).unwrap();
        assert!(matches!(load_model::<f64>(&path), Err(Error::BadMagic)));

        let mut version = good.clone();
        version[8] = 9;
        std::fs::write(&path, &version).unwrap();
        assert!(matches!(
            load_model::<f64>(&path),
            Err(Error::VersionMismatch { found: 9, expected: 1 })
        ));

        assert!(matches!(
            load_model::<f64>(&dir.path().join("missing")),
            Err(Error::FileNotFound(_))
        ));
    }
}
