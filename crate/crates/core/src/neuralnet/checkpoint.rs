//! Binary checkpoint codec.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "NANN" | version u32 | layer count u32
//! input_side u32 | class_count u32 | dropout_active u32 | l2_lambda f64 | seed u64
//! per layer: kind u32, then
//!   conv:    kernel u32, stride u32, pad u32, maps u32, weight shape, weights, bias
//!   dense:   units u32, weight shape, weights, bias
//!   dropout: rate f64
//!   relu, flatten: nothing
//! weight shape = ndim u32 + dims u32; weights/bias = count u32 + f32 values
//! ```

use alloc::vec::Vec;

use super::network::{LayerSpec, NetConfig, Network, Layer};
use super::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NANN";
pub const VERSION: u32 = 1;

const KIND_CONV: u32 = 1;
const KIND_DENSE: u32 = 2;
const KIND_RELU: u32 = 3;
const KIND_DROPOUT: u32 = 4;
const KIND_FLATTEN: u32 = 5;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn floats<T: Scalar>(&mut self, vals: &[T]) {
        self.u32(vals.len() as u32);
        for v in vals {
            self.0.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(alloc::format!("truncated checkpoint at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn floats(&mut self, expect: usize) -> Result<Vec<f32>> {
        let n = self.u32()? as usize;
        if n != expect {
            return Err(Error::Format(alloc::format!("expected {expect} parameters, found {n}")));
        }
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Serializes a network; parameters are stored as `f32`.
pub fn encode<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(net.layers.len() as u32);
    let cfg = &net.config;
    w.u32(cfg.input_side as u32);
    w.u32(cfg.class_count as u32);
    w.u32(cfg.dropout_active as u32);
    w.f64(cfg.l2_lambda);
    w.u64(net.seed);
    for (layer, spec) in net.layers.iter().zip(&cfg.layers) {
        match (layer, spec) {
            (Layer::Conv { weights, bias, .. }, LayerSpec::Conv { kernel, stride, pad, maps }) => {
                w.u32(KIND_CONV);
                for v in [*kernel, *stride, *pad, *maps] {
                    w.u32(v as u32);
                }
                w.u32(weights.shape().len() as u32);
                for &d in weights.shape() {
                    w.u32(d as u32);
                }
                w.floats(weights.data());
                w.floats(bias);
            }
            (Layer::Dense { weights, bias }, LayerSpec::Dense { units }) => {
                w.u32(KIND_DENSE);
                w.u32(*units as u32);
                w.u32(weights.shape().len() as u32);
                for &d in weights.shape() {
                    w.u32(d as u32);
                }
                w.floats(weights.data());
                w.floats(bias);
            }
            (Layer::Relu, _) => w.u32(KIND_RELU),
            (Layer::Flatten, _) => w.u32(KIND_FLATTEN),
            (Layer::Dropout { rate }, _) => {
                w.u32(KIND_DROPOUT);
                w.f64(*rate);
            }
            _ => unreachable!("layers are built from their specs"),
        }
    }
    w.0
}

/// Parses a checkpoint. Any truncation, bad magic, unknown version or shape
/// inconsistency is a format error; no partial network is returned.
pub fn decode(bytes: &[u8]) -> Result<Network<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(alloc::format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let input_side = r.u32()? as usize;
    let class_count = r.u32()? as usize;
    let dropout_active = match r.u32()? {
        0 => false,
        1 => true,
        v => return Err(Error::Format(alloc::format!("bad dropout flag {v}"))),
    };
    let l2_lambda = r.f64()?;
    let seed = r.u64()?;
    let mut specs = Vec::with_capacity(count.min(1024));
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        match r.u32()? {
            KIND_CONV => {
                let kernel = r.u32()? as usize;
                let stride = r.u32()? as usize;
                let pad = r.u32()? as usize;
                let maps = r.u32()? as usize;
                let shape = read_shape(&mut r)?;
                let n = shape.iter().product();
                let weights = Tensor::new(shape, r.floats(n)?)?;
                let bias = r.floats(maps)?;
                specs.push(LayerSpec::Conv { kernel, stride, pad, maps });
                layers.push(Layer::Conv { stride, pad, weights, bias });
            }
            KIND_DENSE => {
                let units = r.u32()? as usize;
                let shape = read_shape(&mut r)?;
                let n = shape.iter().product();
                let weights = Tensor::new(shape, r.floats(n)?)?;
                let bias = r.floats(units)?;
                specs.push(LayerSpec::Dense { units });
                layers.push(Layer::Dense { weights, bias });
            }
            KIND_RELU => {
                specs.push(LayerSpec::Relu);
                layers.push(Layer::Relu);
            }
            KIND_FLATTEN => {
                specs.push(LayerSpec::Flatten);
                layers.push(Layer::Flatten);
            }
            KIND_DROPOUT => {
                let rate = r.f64()?;
                specs.push(LayerSpec::Dropout { rate });
                layers.push(Layer::Dropout { rate });
            }
            k => return Err(Error::Format(alloc::format!("unknown layer kind {k}"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(alloc::format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let config = NetConfig { input_side, layers: specs, dropout_active, l2_lambda, class_count };
    let expected = config
        .weight_shapes()
        .map_err(|e| Error::Format(alloc::format!("inconsistent checkpoint: {e}")))?;
    for (i, (shape, layer)) in expected.iter().zip(&layers).enumerate() {
        let found = layer.weights().map(|(w, _)| w.shape());
        if shape.as_deref() != found {
            return Err(Error::Format(alloc::format!(
                "layer {i}: weight shape {found:?} does not match config {shape:?}"
            )));
        }
    }
    Ok(Network { config, seed, layers })
}

fn read_shape(r: &mut Reader<'_>) -> Result<Vec<usize>> {
    let ndim = r.u32()? as usize;
    if ndim > 8 {
        return Err(Error::Format(alloc::format!("implausible tensor rank {ndim}")));
    }
    (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect()
}
