//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `UIFMCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then for
//! every parameter in header order its value, first moment and second
//! moment as raw little-endian arrays of the header's dtype.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Result, UifmError};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"UIFMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub step: u64,
    pub schema_fingerprint: String,
    pub params: Vec<ParamEntry>,
    /// Arrays stored per parameter, in order.
    pub arrays: Vec<String>,
    /// Model description needed to rebuild the network around the weights.
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn encode<T: Scalar>(store: &ParamStore<T>, schema_fingerprint: &str, extra: serde_json::Value) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        dtype: T::DTYPE.to_string(),
        step: store.step,
        schema_fingerprint: schema_fingerprint.to_string(),
        params: store
            .iter()
            .map(|(_, p)| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), decay: p.decay })
            .collect(),
        arrays: vec!["value".into(), "m".into(), "v".into()],
        extra,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 3 * store.num_scalars() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in store.iter() {
        for t in [&p.value, &p.m, &p.v] {
            t.data().iter().for_each(|x| x.write_le(&mut out));
        }
    }
    Ok(out)
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(UifmError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(UifmError::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + len).ok_or_else(|| UifmError::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    Ok((header, &bytes[20 + len..]))
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(ParamStore<T>, CheckpointHeader)> {
    let (header, mut rest) = split_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(UifmError::Checkpoint(format!("checkpoint dtype {} but loading as {}", header.dtype, T::DTYPE)));
    }
    let mut store = ParamStore::new();
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let read = |rest: &mut &[u8]| -> Result<Tensor<T>> {
            let nbytes = n * T::BYTES;
            if rest.len() < nbytes {
                return Err(UifmError::Checkpoint(format!("truncated data for {}", entry.name)));
            }
            let data = rest[..nbytes].chunks_exact(T::BYTES).map(T::read_le).collect();
            *rest = &rest[nbytes..];
            Tensor::new(entry.shape.clone(), data)
        };
        let value = read(&mut rest)?;
        let m = read(&mut rest)?;
        let v = read(&mut rest)?;
        let id = store.insert(&entry.name, value, entry.decay)?;
        let p = store.get_mut(id);
        p.m = m;
        p.v = v;
    }
    if !rest.is_empty() {
        return Err(UifmError::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    store.step = header.step;
    Ok((store, header))
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|_| UifmError::MissingInput(path.to_path_buf()))?;
    Ok(split_header(&bytes)?.0)
}

pub fn save<T: Scalar>(path: &Path, store: &ParamStore<T>, fingerprint: &str, extra: serde_json::Value) -> Result<()> {
    fs::write(path, encode(store, fingerprint, extra)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|_| UifmError::MissingInput(path.to_path_buf()))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", vec![3, 4], Init::TruncNormal(0.02), true, &mut rng).unwrap();
        store.add("b", vec![4], Init::Const(1.0), false, &mut rng).unwrap();
        store.get_mut(a).m = Tensor::full(vec![3, 4], 0.25);
        store.step = 17;
        let bytes = encode(&store, "abc", serde_json::json!({"k": 1})).unwrap();
        assert_eq!(&bytes[..8], b"UIFMCKPT");
        let (back, header) = decode::<f32>(&bytes).unwrap();
        assert_eq!(header.schema_fingerprint, "abc");
        assert_eq!(back.step, 17);
        for ((_, p), (_, q)) in store.iter().zip(back.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
            assert_eq!(p.m, q.m);
            assert_eq!(p.decay, q.decay);
        }
        assert!(decode::<f64>(&bytes).is_err());
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
    }
}
