//! Per-channel affine quantization with dense little-endian bit packing.
//!
//! `x ≈ scale·(code − zero_point)`, codes in `[0, 2^b − 1]`. Each slice along
//! the channel axis gets its own `(scale, zero_point)`; the quantization range
//! of a slice is its `[min, max]` widened to include zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum BitWidth {
    B2,
    B4,
    B8,
}

impl BitWidth {
    pub fn bits(self) -> u32 {
        match self {
            BitWidth::B2 => 2,
            BitWidth::B4 => 4,
            BitWidth::B8 => 8,
        }
    }

    pub fn max_code(self) -> u32 {
        (1 << self.bits()) - 1
    }

    pub fn codes_per_byte(self) -> usize {
        8 / self.bits() as usize
    }

    pub fn from_bits(bits: u8) -> Option<BitWidth> {
        match bits {
            2 => Some(BitWidth::B2),
            4 => Some(BitWidth::B4),
            8 => Some(BitWidth::B8),
            _ => None,
        }
    }
}

impl TryFrom<u8> for BitWidth {
    type Error = String;

    fn try_from(bits: u8) -> Result<Self, String> {
        BitWidth::from_bits(bits).ok_or_else(|| format!("unsupported bit width {bits}; expected 2, 4 or 8"))
    }
}

impl From<BitWidth> for u8 {
    fn from(b: BitWidth) -> u8 {
        b.bits() as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub bits: BitWidth,
    /// Dimension indexing channels; `None` quantizes the tensor as one slice.
    pub axis: Option<usize>,
    pub scales: Vec<f32>,
    pub zero_points: Vec<u32>,
}

impl QuantParams {
    pub fn channels(&self) -> usize {
        self.scales.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub params: QuantParams,
    pub packed: Vec<u8>,
}

impl QuantizedTensor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn codes(&self) -> Result<Vec<u8>> {
        unpack_codes(&self.packed, self.len(), self.params.bits)
    }
}

/// Output-channel axis for conv-style 4-D tensors, column axis for
/// matrices, whole-tensor otherwise.
pub fn default_channel_axis(shape: &[usize]) -> Option<usize> {
    match shape.len() {
        4 => Some(0),
        2 => Some(1),
        _ => None,
    }
}

pub fn channel_count(shape: &[usize], axis: Option<usize>) -> usize {
    axis.map_or(1, |a| shape[a])
}

/// Maps a flat index to its channel.
struct ChannelIndexer {
    inner: usize,
    channels: usize,
}

impl ChannelIndexer {
    fn new(shape: &[usize], axis: Option<usize>) -> Result<Self> {
        match axis {
            None => Ok(ChannelIndexer { inner: 1, channels: 1 }),
            Some(a) if a < shape.len() => Ok(ChannelIndexer {
                inner: shape[a + 1..].iter().product(),
                channels: shape[a],
            }),
            Some(a) => Err(Error::shape("quantize", format!("axis {a} out of range for {shape:?}"))),
        }
    }

    fn channel(&self, flat: usize) -> usize {
        if self.channels == 1 {
            0
        } else {
            (flat / self.inner) % self.channels
        }
    }
}

pub fn compute_affine_params(x: &Tensor, axis: Option<usize>, bits: BitWidth) -> Result<QuantParams> {
    let idx = ChannelIndexer::new(x.shape(), axis)?;
    let mut lo = vec![0.0f32; idx.channels];
    let mut hi = vec![0.0f32; idx.channels];
    for (i, &v) in x.data().iter().enumerate() {
        let c = idx.channel(i);
        lo[c] = lo[c].min(v);
        hi[c] = hi[c].max(v);
    }
    let max_code = bits.max_code();
    let mut scales = Vec::with_capacity(idx.channels);
    let mut zero_points = Vec::with_capacity(idx.channels);
    for (&min, &max) in lo.iter().zip(&hi) {
        let range = max - min;
        if !range.is_finite() || range <= 0.0 {
            // Only an all-zero slice lands here once the range includes 0.
            scales.push(1.0);
            zero_points.push(0);
            continue;
        }
        let scale = range / max_code as f32;
        let zp = (-min / scale).round().clamp(0.0, max_code as f32) as u32;
        scales.push(scale);
        zero_points.push(zp);
    }
    Ok(QuantParams { bits, axis, scales, zero_points })
}

pub fn quantize(x: &Tensor, qp: &QuantParams) -> Result<QuantizedTensor> {
    let idx = ChannelIndexer::new(x.shape(), qp.axis)?;
    if idx.channels != qp.channels() || qp.zero_points.len() != qp.channels() {
        return Err(Error::shape(
            "quantize",
            format!("{} channel parameters for {} channels", qp.channels(), idx.channels),
        ));
    }
    let max_code = qp.bits.max_code() as f32;
    let codes: Vec<u8> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = idx.channel(i);
            // f32::round rounds half away from zero.
            let q = (v / qp.scales[c]).round() + qp.zero_points[c] as f32;
            q.clamp(0.0, max_code) as u8
        })
        .collect();
    Ok(QuantizedTensor {
        shape: x.shape().to_vec(),
        params: qp.clone(),
        packed: pack_codes(&codes, qp.bits),
    })
}

pub fn quantize_tensor(x: &Tensor, bits: BitWidth) -> Result<QuantizedTensor> {
    let qp = compute_affine_params(x, default_channel_axis(x.shape()), bits)?;
    quantize(x, &qp)
}

pub fn dequantize(q: &QuantizedTensor) -> Result<Tensor> {
    let n = q.len();
    let expected = packed_len(n, q.params.bits);
    if q.packed.len() != expected {
        return Err(Error::Integrity(format!(
            "packed payload is {} bytes, {n} codes at {} bits need {expected}",
            q.packed.len(),
            q.params.bits.bits()
        )));
    }
    let idx = ChannelIndexer::new(&q.shape, q.params.axis)?;
    if idx.channels != q.params.channels() {
        return Err(Error::Integrity(format!(
            "{} channel parameters for {} channels",
            q.params.channels(),
            idx.channels
        )));
    }
    let codes = unpack_codes(&q.packed, n, q.params.bits)?;
    let data = codes
        .iter()
        .enumerate()
        .map(|(i, &code)| {
            let c = idx.channel(i);
            q.params.scales[c] * (code as f32 - q.params.zero_points[c] as f32)
        })
        .collect();
    Tensor::new(&q.shape, data)
}

pub fn packed_len(codes: usize, bits: BitWidth) -> usize {
    (codes * bits.bits() as usize).div_ceil(8)
}

/// Code bytes plus an FP32 scale and an FP32 zero point per channel.
pub fn quantized_payload_bytes(shape: &[usize], axis: Option<usize>, bits: BitWidth) -> usize {
    let elements: usize = shape.iter().product();
    packed_len(elements, bits) + channel_count(shape, axis) * 8
}

/// Code `i` occupies bits `(i mod k)·b ..` of byte `i / k`, `k = 8/b`.
pub fn pack_codes(codes: &[u8], bits: BitWidth) -> Vec<u8> {
    let b = bits.bits() as usize;
    let per_byte = bits.codes_per_byte();
    let mask = bits.max_code() as u8;
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    for (i, &c) in codes.iter().enumerate() {
        out[i / per_byte] |= (c & mask) << ((i % per_byte) * b);
    }
    out
}

pub fn unpack_codes(packed: &[u8], count: usize, bits: BitWidth) -> Result<Vec<u8>> {
    if packed.len() != packed_len(count, bits) {
        return Err(Error::Integrity(format!(
            "{} packed bytes cannot hold exactly {count} codes at {} bits",
            packed.len(),
            bits.bits()
        )));
    }
    let b = bits.bits() as usize;
    let per_byte = bits.codes_per_byte();
    let mask = bits.max_code() as u8;
    Ok((0..count).map(|i| (packed[i / per_byte] >> ((i % per_byte) * b)) & mask).collect())
}
