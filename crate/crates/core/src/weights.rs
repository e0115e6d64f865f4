//! Binary weights files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RANW" | version u32 | entries u32
//! per entry: name_len u32 | name (UTF-8) | dtype u8 | rank u8 | extents u64 * rank | payload
//! crc32 of every preceding byte
//! ```
//!
//! Batch-norm running statistics are stored as three entries per layer:
//! `<layer>.running_mean`, `<layer>.running_var` (element dtype) and
//! `<layer>.running_count` (a single `u64`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result, WeightsError};
use crate::kernels::RunningStats;
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"RANW";
pub const VERSION: u32 = 1;
/// Dtype code of the batch-norm update counters.
pub const DTYPE_U64: u8 = 3;

const MEAN: &str = ".running_mean";
const VAR: &str = ".running_var";
const COUNT: &str = ".running_count";

enum Payload<'a, T> {
    Tensor(&'a [usize], &'a [T]),
    Vector(&'a [T]),
    Count(u64),
}

fn entries<T: Scalar>(store: &ParamStore<T>) -> BTreeMap<String, Payload<'_, T>> {
    let mut out = BTreeMap::new();
    for (name, t) in store.params() {
        out.insert(name.clone(), Payload::Tensor(t.shape(), t.data()));
    }
    for (layer, s) in store.all_stats() {
        out.insert(format!("{layer}{MEAN}"), Payload::Vector(&s.mean));
        out.insert(format!("{layer}{VAR}"), Payload::Vector(&s.var));
        out.insert(format!("{layer}{COUNT}"), Payload::Count(s.updates));
    }
    out
}

/// Serialize a store. Entries are written in name order, so equal stores
/// produce identical bytes.
pub fn encode_weights<T: Scalar>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let entries = entries(store);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(entries.len()).map_err(|_| Error::config("too many tensors"))?.to_le_bytes());
    for (name, payload) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match *payload {
            Payload::Tensor(_, data) | Payload::Vector(data) => {
                let shape = match *payload {
                    Payload::Tensor(shape, _) => shape.to_vec(),
                    _ => vec![data.len()],
                };
                let rank =
                    u8::try_from(shape.len()).map_err(|_| Error::config(format!("`{name}` has too many axes")))?;
                out.push(T::DTYPE_CODE);
                out.push(rank);
                for d in shape {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in data.iter() {
                    v.write_le(&mut out);
                }
            }
            Payload::Count(c) => {
                out.push(DTYPE_U64);
                out.push(1);
                out.extend_from_slice(&1u64.to_le_bytes());
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], WeightsError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| WeightsError::Malformed(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, WeightsError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, WeightsError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

enum Decoded<T> {
    Tensor(Tensor<T>),
    Count(u64),
}

/// Parse bytes produced by [`encode_weights`].
pub fn decode_weights<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    Ok(decode_inner(bytes)?)
}

fn decode_inner<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>, WeightsError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(WeightsError::Magic);
    }
    if bytes.len() < 16 {
        return Err(WeightsError::Malformed(format!("{} bytes is shorter than the fixed header", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(WeightsError::Crc { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(WeightsError::Version(version));
    }
    let count = r.u32("entry count")?;
    let mut decoded: BTreeMap<String, Decoded<T>> = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| WeightsError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8("dtype")?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64("extent")?;
            shape.push(usize::try_from(d).map_err(|_| WeightsError::Malformed(format!("extent {d} of `{name}`")))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| WeightsError::Malformed(format!("extents of `{name}` overflow")))?;
        let entry = match dtype {
            DTYPE_U64 => {
                if numel != 1 {
                    return Err(WeightsError::Malformed(format!("counter `{name}` holds {numel} values")));
                }
                Decoded::Count(r.u64("counter")?)
            }
            1 | 2 if dtype == T::DTYPE_CODE => {
                let size = numel
                    .checked_mul(T::BYTES)
                    .ok_or_else(|| WeightsError::Malformed(format!("`{name}` is too large")))?;
                let raw = r.take(size, "payload")?;
                let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
                Decoded::Tensor(
                    Tensor::new(&shape, data).map_err(|e| WeightsError::Malformed(format!("`{name}`: {e}")))?,
                )
            }
            1 | 2 => {
                return Err(WeightsError::Malformed(format!(
                    "`{name}` has dtype code {dtype}, expected {}",
                    T::DTYPE_CODE
                )))
            }
            other => return Err(WeightsError::Dtype(other)),
        };
        if decoded.insert(name.clone(), entry).is_some() {
            return Err(WeightsError::DuplicateName(name));
        }
    }
    if r.pos != body.len() {
        return Err(WeightsError::Malformed(format!("{} unread bytes before the checksum", body.len() - r.pos)));
    }
    assemble(decoded)
}

fn assemble<T: Scalar>(mut decoded: BTreeMap<String, Decoded<T>>) -> Result<ParamStore<T>, WeightsError> {
    let mut store = ParamStore::new();
    let layers: Vec<String> = decoded.keys().filter_map(|n| n.strip_suffix(COUNT)).map(str::to_string).collect();
    for layer in layers {
        let mut grab = |suffix: &str| decoded.remove(&format!("{layer}{suffix}"));
        let (Some(Decoded::Count(updates)), Some(Decoded::Tensor(mean)), Some(Decoded::Tensor(var))) =
            (grab(COUNT), grab(MEAN), grab(VAR))
        else {
            return Err(WeightsError::Malformed(format!("incomplete running statistics for `{layer}`")));
        };
        if mean.rank() != 1 || mean.shape() != var.shape() {
            return Err(WeightsError::Malformed(format!("running statistics of `{layer}` disagree in shape")));
        }
        store.insert_stats(layer, RunningStats { mean: mean.into_data(), var: var.into_data(), updates });
    }
    for (name, entry) in decoded {
        match entry {
            Decoded::Tensor(t) => store.insert(name, t),
            Decoded::Count(_) => unreachable!("counters were consumed above"),
        }
    }
    Ok(store)
}

/// Write atomically: the bytes go to a sibling temp file that is renamed
/// over `path`.
pub fn save_weights<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_weights(store)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_weights<T: Scalar>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("enc.conv1.w", Tensor::from_fn(&[2, 1, 3, 3], |i| i as f32 * 0.5 - 3.0));
        s.insert("cls.fc.b", Tensor::new(&[3], vec![0.1, -0.2, f32::MIN_POSITIVE]).unwrap());
        s.insert_stats("enc.bn1", RunningStats { mean: vec![0.5, 1.5], var: vec![2.0, 0.25], updates: 17 });
        s
    }

    #[test]
    fn roundtrip_is_exact() {
        let s = sample();
        let bytes = encode_weights(&s).unwrap();
        let back: ParamStore<f32> = decode_weights(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_weights(&back).unwrap(), bytes);
    }

    #[test]
    fn empty_store_has_zero_entries() {
        let bytes = encode_weights(&ParamStore::<f64>::new()).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[8..12], &0u32.to_le_bytes());
        assert!(decode_weights::<f64>(&bytes).unwrap().is_empty());
    }

    #[test]
    fn flipped_payload_byte_fails_crc() {
        let mut bytes = encode_weights(&sample()).unwrap();
        let i = bytes.len() - 10;
        bytes[i] ^= 0x01;
        assert!(matches!(decode_weights::<f32>(&bytes), Err(Error::Weights(WeightsError::Crc { .. }))));
    }

    fn reseal(mut body: Vec<u8>) -> Vec<u8> {
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        body
    }

    #[test]
    fn unknown_version_is_rejected() {
        let bytes = encode_weights(&sample()).unwrap();
        let mut body = bytes[..bytes.len() - 4].to_vec();
        body[4] = 9;
        assert!(matches!(decode_weights::<f32>(&reseal(body)), Err(Error::Weights(WeightsError::Version(9)))));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::new(&[1], vec![1.0]).unwrap());
        let bytes = encode_weights(&s).unwrap();
        let entry = &bytes[12..bytes.len() - 4];
        let mut body = bytes[..12].to_vec();
        body[8] = 2;
        body.extend_from_slice(entry);
        body.extend_from_slice(entry);
        assert_eq!(decode_weights::<f32>(&reseal(body)).unwrap_err().to_string(), "duplicate tensor name `a`");
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let bytes = encode_weights(&sample()).unwrap();
        assert!(matches!(decode_weights::<f64>(&bytes), Err(Error::Weights(WeightsError::Malformed(_)))));
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(decode_weights::<f32>(b"NOPE0000000000000000"), Err(Error::Weights(WeightsError::Magic))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.ranw");
        save_weights(&sample(), &p).unwrap();
        assert_eq!(load_weights::<f32>(&p).unwrap(), sample());
        assert!(matches!(load_weights::<f32>(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
