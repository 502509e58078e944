//! Binary checkpoint format.
//!
//! ```text
//! "MMELCKPT"            8 bytes
//! version               u8 (= 1)
//! dtype                 u8 (0 = f32, 1 = f64)
//! header length         u32 LE
//! header                UTF-8 JSON (architecture, input normalization)
//! per parameter, in declaration order, until EOF:
//!   rank                u32 LE
//!   extents             rank × u32 LE
//!   values              little-endian, dtype width
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::model::{Model, ModelSpec};
use crate::diffcore::tensor::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MMELCKPT";
pub const VERSION: u8 = 1;

/// Per-channel input standardization computed from a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelSpec,
    #[serde(default)]
    pub normalization: Option<Normalization>,
}

pub fn encode<T: Real>(model: &Model<T>, normalization: Option<&Normalization>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        model: model.spec().clone(),
        normalization: normalization.cloned(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(18 + header.len() + model.num_scalars() * T::DTYPE.width());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in model.params() {
        out.extend_from_slice(&(p.rank() as u32).to_le_bytes());
        for &e in p.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in p.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {}", what)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Stored element type of an encoded checkpoint.
pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
    if bytes.len() < 10 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    DType::from_code(bytes[9]).ok_or_else(|| Error::Checkpoint(format!("unknown dtype {}", bytes[9])))
}

/// Decodes into element type `T`, converting if the stored dtype differs.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<(Model<T>, CheckpointHeader)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic").ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", version)));
    }
    let dtype = peek_dtype(bytes)?;
    r.take(1, "dtype")?;
    let header_len = r.u32("header length")? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("header: {}", e)))?;
    let mut params = Vec::new();
    while !r.done() {
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {}", rank)));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * dtype.width(), "values")?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        params.push(Tensor::new(shape, data)?);
    }
    let model = Model::from_params(header.model.clone(), params).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((model, header))
}

pub fn save<T: Real>(path: &Path, model: &Model<T>, normalization: Option<&Normalization>) -> Result<()> {
    let bytes = encode(model, normalization)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load<T: Real>(path: &Path) -> Result<(Model<T>, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = Model::<f32>::init(ModelSpec::small_cnn(3, 16, 16, 4), &mut rng).unwrap();
        let norm = Normalization {
            mean: vec![0.1, 0.2, 0.3],
            std: vec![1.0, 0.5, 0.25],
        };
        let bytes = encode(&model, Some(&norm)).unwrap();
        let (back, header) = decode::<f32>(&bytes).unwrap();
        assert_eq!(header.normalization.as_ref(), Some(&norm));
        assert_eq!(encode(&back, Some(&norm)).unwrap(), bytes);
        for (a, b) in model.params().iter().zip(back.params()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn layout_prefix() {
        let model = Model::<f64>::zeros(ModelSpec::linear(2, 2)).unwrap();
        let bytes = encode(&model, None).unwrap();
        assert_eq!(&bytes[..8], b"MMELCKPT");
        assert_eq!(bytes[8], 1);
        assert_eq!(bytes[9], 1);
        let hlen = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let body = &bytes[14 + hlen..];
        // weight [2,2] then bias [2]
        assert_eq!(u32::from_le_bytes(body[..4].try_into().unwrap()), 2);
        assert_eq!(body.len(), (4 + 8 + 32) + (4 + 4 + 16));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let model = Model::<f64>::zeros(ModelSpec::linear(2, 2)).unwrap();
        let mut bytes = encode(&model, None).unwrap();
        let err = decode::<f64>(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"));
        bytes[0] = b'X';
        let err = decode::<f64>(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }
}
