//! Uniform affine quantization grids.
//!
//! A grid is described by a real scale `s`, an integer zero-point `z` and a
//! bitwidth `b`. Quantization maps `x` to the integer
//! `clamp(round(x / s) + z, 0, 2^b - 1)` and dequantization maps an integer
//! `k` back to `s * k - c` with the offset `c = s * z`. Keeping the offset as a
//! separate real number is what lets a bias correction be folded into it.
//!
//! Rounding is half away from zero (`f64::round`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Asymmetric,
    /// Signed-symmetric grid stored on the unsigned range with `z = 2^(b-1)`.
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct QuantParams {
    scale: f64,
    zero_point: u32,
    bitwidth: u8,
    scheme: Scheme,
}

#[derive(Deserialize)]
struct RawParams {
    scale: f64,
    zero_point: u32,
    bitwidth: u8,
    scheme: Scheme,
}

impl TryFrom<RawParams> for QuantParams {
    type Error = Error;

    fn try_from(r: RawParams) -> Result<Self> {
        QuantParams::new(r.scale, r.zero_point, r.bitwidth, r.scheme)
    }
}

fn check_bits(bitwidth: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bitwidth) {
        return Err(Error::InvalidParams(format!(
            "bitwidth {bitwidth} outside [{MIN_BITS}, {MAX_BITS}]"
        )));
    }
    Ok(())
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: u32, bitwidth: u8, scheme: Scheme) -> Result<Self> {
        check_bits(bitwidth)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidParams(format!(
                "scale {scale} must be positive and finite"
            )));
        }
        let qmax = (1u32 << bitwidth) - 1;
        if zero_point > qmax {
            return Err(Error::InvalidParams(format!(
                "zero-point {zero_point} outside [0, {qmax}]"
            )));
        }
        if scheme == Scheme::Symmetric && zero_point != 1 << (bitwidth - 1) {
            return Err(Error::InvalidParams(format!(
                "symmetric {bitwidth}-bit grid needs zero-point {}, got {zero_point}",
                1u32 << (bitwidth - 1)
            )));
        }
        Ok(Self {
            scale,
            zero_point,
            bitwidth,
            scheme,
        })
    }

    pub fn asymmetric(scale: f64, zero_point: u32, bitwidth: u8) -> Result<Self> {
        Self::new(scale, zero_point, bitwidth, Scheme::Asymmetric)
    }

    pub fn symmetric(scale: f64, bitwidth: u8) -> Result<Self> {
        check_bits(bitwidth)?;
        Self::new(scale, 1 << (bitwidth - 1), bitwidth, Scheme::Symmetric)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn zero_point(&self) -> u32 {
        self.zero_point
    }

    pub fn bitwidth(&self) -> u8 {
        self.bitwidth
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Largest integer level, `2^b - 1`.
    pub fn qmax(&self) -> u32 {
        (1u32 << self.bitwidth) - 1
    }

    /// Grid offset `c = s * z`.
    pub fn offset(&self) -> f64 {
        self.scale * f64::from(self.zero_point)
    }

    pub fn grid_min(&self) -> f64 {
        self.dequantize_value(0)
    }

    pub fn grid_max(&self) -> f64 {
        self.dequantize_value(self.qmax())
    }

    pub fn quantize_value(&self, x: f64) -> u32 {
        let level = (x / self.scale).round() + f64::from(self.zero_point);
        level.clamp(0.0, f64::from(self.qmax())) as u32
    }

    pub fn dequantize_value(&self, level: u32) -> f64 {
        self.scale * f64::from(level) - self.offset()
    }

    pub fn fake_quant_value(&self, x: f64) -> f64 {
        self.dequantize_value(self.quantize_value(x))
    }
}

/// Integer grid levels together with the bitwidth that bounds them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<u32>,
    bitwidth: u8,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<u32>, bitwidth: u8) -> Result<Self> {
        check_bits(bitwidth)?;
        if shape.contains(&0) {
            return Err(Error::EmptyDimension(shape));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::LengthMismatch { shape, len: data.len() });
        }
        let qmax = (1u32 << bitwidth) - 1;
        if let Some(bad) = data.iter().find(|&&k| k > qmax) {
            return Err(Error::InvalidParams(format!("level {bad} exceeds {qmax}")));
        }
        Ok(Self { shape, data, bitwidth })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn bitwidth(&self) -> u8 {
        self.bitwidth
    }

    /// The `i`-th slice along the leading axis.
    pub fn outer(&self, i: usize) -> &[u32] {
        let n = self.shape.first().copied().unwrap_or(1);
        let stride = self.data.len() / n;
        &self.data[i * stride..(i + 1) * stride]
    }
}

pub fn quantize_int(x: &Tensor, p: &QuantParams) -> IntTensor {
    IntTensor {
        shape: x.shape().to_vec(),
        data: x.data().iter().map(|&v| p.quantize_value(v)).collect(),
        bitwidth: p.bitwidth,
    }
}

/// Quantize-dequantize round trip: `s * INT(x) - s * z`.
pub fn fake_quant(x: &Tensor, p: &QuantParams) -> Tensor {
    x.map(|v| p.fake_quant_value(v))
}

/// Deployment-side dequantization `s * q - c` with an arbitrary offset `c`.
///
/// With `c = s * z` this reproduces [`fake_quant`]; with a bias-corrected
/// offset it yields the corrected activations without an extra add.
pub fn dequantize_with_offset(q: &IntTensor, scale: f64, offset: f64) -> Result<Tensor> {
    check_dequant_args(scale, offset)?;
    let data = dequantize_slice(q.data(), scale, offset).collect();
    Ok(Tensor::from_parts(q.shape.clone(), data))
}

pub(crate) fn check_dequant_args(scale: f64, offset: f64) -> Result<()> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidParams(format!(
            "scale {scale} must be positive and finite"
        )));
    }
    if !offset.is_finite() {
        return Err(Error::InvalidParams(format!("offset {offset} must be finite")));
    }
    Ok(())
}

pub(crate) fn dequantize_slice(levels: &[u32], scale: f64, offset: f64) -> impl Iterator<Item = f64> + '_ {
    levels.iter().map(move |&k| scale * f64::from(k) - offset)
}

/// Canonical asymmetric grid covering exactly `[0, 1]`.
pub fn softmax_grid(bitwidth: u8) -> Result<QuantParams> {
    check_bits(bitwidth)?;
    let levels = f64::from((1u32 << bitwidth) - 1);
    QuantParams::asymmetric(1.0 / levels, 0, bitwidth)
}

/// Running min/max over observed activations. Observers over disjoint shards
/// can be merged in any order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinMaxObserver {
    min: f64,
    max: f64,
    count: usize,
}

impl Default for MinMaxObserver {
    fn default() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            count: 0,
        }
    }
}

impl MinMaxObserver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, x: &Tensor) {
        for &v in x.data() {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &MinMaxObserver) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.count += other.count;
    }

    pub fn range(&self) -> Option<(f64, f64)> {
        (self.count > 0).then_some((self.min, self.max))
    }

    pub fn finish(&self, bitwidth: u8, scheme: Scheme) -> Result<QuantParams> {
        check_bits(bitwidth)?;
        let (min, max) = self.range().ok_or(Error::Empty("calibrate_minmax"))?;
        let qmax = (1u32 << bitwidth) - 1;
        match scheme {
            Scheme::Asymmetric => {
                // The range always contains zero so that zero is exactly representable.
                let lo = min.min(0.0);
                let hi = max.max(0.0);
                if hi == lo {
                    let z = (-min).round().clamp(0.0, f64::from(qmax)) as u32;
                    return QuantParams::asymmetric(1.0, z, bitwidth);
                }
                let scale = (hi - lo) / f64::from(qmax);
                let z = (-lo / scale).round().clamp(0.0, f64::from(qmax)) as u32;
                QuantParams::asymmetric(scale, z, bitwidth)
            }
            Scheme::Symmetric => {
                let abs_max = min.abs().max(max.abs());
                let scale = if abs_max == 0.0 {
                    1.0
                } else {
                    abs_max / f64::from((1u32 << (bitwidth - 1)) - 1)
                };
                QuantParams::symmetric(scale, bitwidth)
            }
        }
    }
}

/// Min-max calibration over a set of activation samples.
pub fn calibrate_minmax(samples: &[Tensor], bitwidth: u8, scheme: Scheme) -> Result<QuantParams> {
    let mut obs = MinMaxObserver::new();
    for s in samples {
        obs.observe(s);
    }
    obs.finish(bitwidth, scheme)
}
