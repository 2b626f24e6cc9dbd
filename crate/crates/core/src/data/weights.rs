//! Weight file format.
//!
//! ```text
//! magic   "RONW"                      4 bytes
//! version u32 = 1
//! config  u32 length + UTF-8 key=value model configuration
//! count   u32 number of parameters
//! count × { u32 name length, name bytes, 4 × u32 shape (N, C, H, W), u64 byte offset }
//! data    little-endian f32 values; offsets are relative to the start of this section
//! ```
//! All integers are little-endian.

use std::path::Path;

use crate::config::{model_config_from_text, model_config_to_text};
use crate::error::{Error, Result};
use crate::network::{Model, Param};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"RONW";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model_config_to_text(model.config());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        for d in p.tensor.shape().dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * p.tensor.shape().numel() as u64;
    }
    for p in model.params() {
        for &v in p.tensor.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            source_name: self.name.to_string(),
            location: format!("byte {}", self.pos),
            message: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(format!("unexpected end of file reading {n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        let start = self.pos;
        std::str::from_utf8(self.take(n)?).map_err(|_| {
            self.pos = start;
            self.err("invalid UTF-8")
        })
    }
}

pub fn decode<T: Scalar>(bytes: &[u8], name: &str) -> Result<Model<T>> {
    let mut r = Reader { bytes, pos: 0, name };
    if r.take(4)? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic; not a weight file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let cfg_text = r.string()?;
    let config = model_config_from_text(cfg_text, name)?;
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let pname = r.string()?.to_string();
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
        let offset = r.u64()? as usize;
        manifest.push((pname, Shape::new(dims[0], dims[1], dims[2], dims[3]), offset));
    }
    let data_start = r.pos;
    let mut params = Vec::with_capacity(count);
    for (pname, shape, offset) in manifest {
        r.pos = data_start + offset;
        let raw = r.take(4 * shape.numel())?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        params.push(Param {
            name: pname,
            tensor: Tensor::from_vec(shape, data)?,
        });
    }
    Model::from_params(config, params)
}

pub fn save<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;

    #[test]
    fn truncated_file_is_a_parse_error() {
        let m = Model::<f32>::build(ModelConfig::default(), 3).unwrap();
        let bytes = encode(&m);
        let e = decode::<f32>(&bytes[..bytes.len() - 10], "t").unwrap_err();
        assert!(matches!(e, Error::Parse { .. }));
        let e = decode::<f32>(b"NOPE", "t").unwrap_err();
        assert!(e.to_string().contains("magic"));
    }

    #[test]
    fn config_survives_roundtrip() {
        let cfg = ModelConfig {
            num_classes: 5,
            detect_layers: vec![2, 3],
            objectness: false,
            s_min: Some(20.0),
            ..ModelConfig::default()
        };
        let m = Model::<f32>::build(cfg.clone(), 3).unwrap();
        let back = decode::<f32>(&encode(&m), "t").unwrap();
        assert_eq!(back.config(), &cfg);
        assert_eq!(back, m);
    }
}
