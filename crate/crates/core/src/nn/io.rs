//! Binary model files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "DSNM" | version u32 | arch id u32 | widen f64 | num_classes u32
//! | standardize u8 | input rank u32 | input dims u32…
//! | layer count u32 | per layer: kind u8 | tensor count u32
//!   | per tensor: dtype u8 (1 = f32) | rank u32 | dims u32… | f32 payload
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::layers::{Conv2d, Layer, Linear};
use super::model::{Arch, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"DSNM";
pub const MODEL_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

fn kind_id(layer: &Layer) -> u8 {
    match layer {
        Layer::Conv2d(_) => 1,
        Layer::Relu => 2,
        Layer::MaxPool2 => 3,
        Layer::Linear(_) => 4,
    }
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&model.arch.id().to_le_bytes());
    out.extend_from_slice(&model.widen.to_le_bytes());
    out.extend_from_slice(&(model.num_classes as u32).to_le_bytes());
    out.push(u8::from(model.standardize_input));
    out.extend_from_slice(&(model.input_shape.len() as u32).to_le_bytes());
    for &d in &model.input_shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for layer in &model.layers {
        out.push(kind_id(layer));
        let params = layer.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for t in params {
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes).map_err(|reason| Error::format(path, reason))
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], String> {
        let mut buf = [0u8; N];
        self.0
            .read_exact(&mut buf)
            .map_err(|_| "truncated model file".to_string())?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn usize(&mut self) -> Result<usize, String> {
        Ok(self.u32()? as usize)
    }

    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn tensor(&mut self) -> Result<Tensor, String> {
        if self.u8()? != DTYPE_F32 {
            return Err("unsupported tensor dtype".into());
        }
        let rank = self.usize()?;
        if rank == 0 || rank > 8 {
            return Err(format!("bad tensor rank {rank}"));
        }
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let remaining = self.0.get_ref().len() - self.0.position() as usize;
        if n.checked_mul(4).map_or(true, |b| b > remaining) {
            return Err("truncated tensor payload".into());
        }
        let data = (0..n)
            .map(|_| Ok(f64::from(f32::from_le_bytes(self.bytes()?))))
            .collect::<Result<Vec<_>, String>>()?;
        Tensor::from_vec(&shape, data).map_err(|e| e.to_string())
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Model, String> {
    let mut r = Reader(Cursor::new(bytes));
    if &r.bytes::<4>()? != MODEL_MAGIC {
        return Err("bad magic, not a model file".into());
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(format!("unsupported model version {version}"));
    }
    let arch_id = r.u32()?;
    let arch = Arch::from_id(arch_id).ok_or_else(|| format!("unknown arch id {arch_id}"))?;
    let widen = r.f64()?;
    let num_classes = r.usize()?;
    let standardize_input = r.u8()? != 0;
    let rank = r.usize()?;
    if rank == 0 || rank > 8 {
        return Err(format!("bad input rank {rank}"));
    }
    let input_shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
    let n_layers = r.usize()?;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        let kind = r.u8()?;
        let n_tensors = r.usize()?;
        let mut ts = (0..n_tensors.min(2))
            .map(|_| r.tensor())
            .collect::<Result<Vec<_>, _>>()?;
        let layer = match (kind, n_tensors) {
            (1, 2) => {
                let bias = ts.pop().expect("two tensors");
                let weight = ts.pop().expect("two tensors");
                let &[out_channels, in_channels, kernel, k2] = weight.shape() else {
                    return Err("conv weight must be rank 4".into());
                };
                if kernel != k2 || kernel % 2 == 0 || bias.shape() != [out_channels] {
                    return Err("inconsistent conv tensors".into());
                }
                Layer::Conv2d(Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    weight,
                    bias,
                })
            }
            (2, 0) => Layer::Relu,
            (3, 0) => Layer::MaxPool2,
            (4, 2) => {
                let bias = ts.pop().expect("two tensors");
                let weight = ts.pop().expect("two tensors");
                let &[out_features, in_features] = weight.shape() else {
                    return Err("linear weight must be rank 2".into());
                };
                if bias.shape() != [out_features] {
                    return Err("inconsistent linear tensors".into());
                }
                Layer::Linear(Linear {
                    in_features,
                    out_features,
                    weight,
                    bias,
                })
            }
            _ => return Err(format!("bad layer record (kind {kind}, {n_tensors} tensors)")),
        };
        layers.push(layer);
    }
    if (r.0.position() as usize) != bytes.len() {
        return Err("trailing bytes after model".into());
    }
    let model = Model {
        arch,
        widen,
        num_classes,
        input_shape,
        standardize_input,
        layers,
    };
    model.validate().map_err(|e| e.to_string())?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_for_f32_weights() {
        let m = Model::build(Arch::Lenet, 0.125, 10, &[1, 12, 12], 5)
            .unwrap()
            .with_standardization(true);
        let back = decode_model(&encode_model(&m)).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let m = Model::build(Arch::Linear, 1.0, 2, &[4], 0).unwrap();
        let mut bytes = encode_model(&m);
        assert!(decode_model(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode_model(&bytes).unwrap_err().contains("magic"));
    }
}
