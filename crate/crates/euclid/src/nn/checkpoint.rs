//! Versioned binary serialization of named tensors.
//!
//! Layout: the magic string `EUCLID1`, a u64 tensor count, then per tensor a
//! u32 name length, the UTF-8 name, u32 row and column counts, and the
//! row-major values as little-endian f64. Readers reject any other magic, so
//! a future format bump only has to change the string.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::nn::error::{NnError, NnResult};
use crate::nn::optim::ParamStore;
use crate::nn::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"EUCLID1";

/// Guards against absurd allocations when reading a corrupt file.
const MAX_SIDE: usize = 1 << 20;
const MAX_ELEMS: usize = 1 << 27;

pub fn write_tensors<W: Write>(w: &mut W, tensors: &BTreeMap<String, Tensor>) -> NnResult<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, tensor) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.rows() as u32).to_le_bytes())?;
        w.write_all(&(tensor.cols() as u32).to_le_bytes())?;
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(r: &mut R) -> NnResult<BTreeMap<String, Tensor>> {
    let mut magic = [0u8; MAGIC.len()];
    r.read_exact(&mut magic)
        .map_err(|_| NnError::MalformedCheckpoint("file shorter than the magic string".into()))?;
    if &magic != MAGIC {
        return Err(NnError::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }

    let count = read_u64(r)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        if name_len > 1 << 16 {
            return Err(NnError::MalformedCheckpoint(format!(
                "tensor name length {name_len} is implausible"
            )));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| NnError::MalformedCheckpoint("truncated tensor name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| NnError::MalformedCheckpoint("tensor name is not UTF-8".into()))?;

        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        if rows == 0 || cols == 0 || rows > MAX_SIDE || cols > MAX_SIDE || rows * cols > MAX_ELEMS {
            return Err(NnError::MalformedCheckpoint(format!(
                "tensor `{name}` declares shape {rows}x{cols}"
            )));
        }
        let mut data = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)
                .map_err(|_| NnError::MalformedCheckpoint(format!("truncated data in `{name}`")))?;
            *v = f64::from_le_bytes(buf);
        }
        out.insert(name, Tensor::from_vec(rows, cols, data)?);
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> NnResult<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| NnError::MalformedCheckpoint("truncated u32 field".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> NnResult<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| NnError::MalformedCheckpoint("truncated u64 field".into()))?;
    Ok(u64::from_le_bytes(buf))
}

impl ParamStore {
    /// Flatten parameters, Adam moments, and the step counter into `out`
    /// under `prefix`. Moments appear as `{prefix}opt.m/{name}` and
    /// `{prefix}opt.v/{name}`, the counter as `{prefix}opt.step`.
    pub fn export_named(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
        for (name, value) in self.iter() {
            out.insert(format!("{prefix}{name}"), value.clone());
        }
        for (name, _) in self.iter() {
            let (m, v) = self.adam_moments(name);
            if let Some(m) = m {
                out.insert(format!("{prefix}opt.m/{name}"), m.clone());
            }
            if let Some(v) = v {
                out.insert(format!("{prefix}opt.v/{name}"), v.clone());
            }
        }
        out.insert(format!("{prefix}opt.step"), Tensor::scalar(self.step_count() as f64));
    }

    /// Rebuild a store from tensors exported with [`ParamStore::export_named`].
    pub fn import_named(prefix: &str, named: &BTreeMap<String, Tensor>) -> NnResult<Self> {
        let mut store = ParamStore::new();
        let opt_prefix = format!("{prefix}opt.");
        for (name, value) in named {
            let Some(rest) = name.strip_prefix(prefix) else { continue };
            if name.starts_with(&opt_prefix) {
                continue;
            }
            store.insert(rest, value.clone());
        }
        for (name, value) in named {
            let Some(rest) = name.strip_prefix(&opt_prefix) else { continue };
            if let Some(param) = rest.strip_prefix("m/") {
                store.restore_moment_m(param, value.clone())?;
            } else if let Some(param) = rest.strip_prefix("v/") {
                store.restore_moment_v(param, value.clone())?;
            } else if rest == "step" {
                store.restore_step(value.item()? as u64);
            }
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::dense::{Activation, DenseNet};
    use crate::nn::tape::GradMap;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn trained_store() -> ParamStore {
        let net = DenseNet::new("f", &[2, 4, 1], Activation::Identity);
        let mut store = ParamStore::new();
        net.init(&mut store, &mut StdRng::seed_from_u64(5));
        // A couple of optimizer steps so moments and counter are non-trivial.
        for _ in 0..2 {
            let mut grads = GradMap::new();
            grads.insert("f.w0".into(), Tensor::full(4, 2, 0.1));
            store.adam_step(&grads, 1e-3).unwrap();
        }
        store
    }

    #[test]
    fn store_round_trips_bitwise() {
        let store = trained_store();
        let mut named = BTreeMap::new();
        store.export_named("model/", &mut named);

        let mut buf = Vec::new();
        write_tensors(&mut buf, &named).unwrap();
        let read = read_tensors(&mut buf.as_slice()).unwrap();
        assert_eq!(named, read);

        let restored = ParamStore::import_named("model/", &read).unwrap();
        assert_eq!(restored.step_count(), store.step_count());
        for (name, value) in store.iter() {
            assert_eq!(restored.get(name).unwrap().data(), value.data());
        }
        let (m0, v0) = store.adam_moments("f.w0");
        let (m1, v1) = restored.adam_moments("f.w0");
        assert_eq!(m0.unwrap().data(), m1.unwrap().data());
        assert_eq!(v0.unwrap().data(), v1.unwrap().data());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &BTreeMap::new()).unwrap();
        buf[6] = b'2'; // EUCLID1 -> EUCLID2
        match read_tensors(&mut buf.as_slice()) {
            Err(NnError::BadMagic { found, .. }) => assert_eq!(found, "EUCLID2"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_malformed() {
        let store = trained_store();
        let mut named = BTreeMap::new();
        store.export_named("", &mut named);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &named).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_tensors(&mut buf.as_slice()),
            Err(NnError::MalformedCheckpoint(_))
        ));
    }
}
