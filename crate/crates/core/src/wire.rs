//! Update-message byte format and communication-cost accounting.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! header   magic "FLCR" | version u16 | reserved u16 | round u32 | sender u32 | count u32
//! record   name_len u16 | name (UTF-8)
//!          rank u8 | extents u32 × rank
//!          encoding u8 (0 = fp32, 2/4/8 = quantized bits)
//!          axis u8 (0xFF = whole tensor)
//!          [quantized only] channels u32 | (scale f32, zero_point f32) × channels
//!          payload_len u32 | payload
//! ```
//!
//! FP32 payloads are the raw little-endian values; quantized payloads are the
//! packed codes from [`crate::quant`]. The same container stores checkpoints.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{AdaptedModel, TrainingMode};
use crate::nn::{split_param_name, CountFilter, ModelSpec, ParamSet};
use crate::quant::{self, BitWidth, QuantParams, QuantizedTensor};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"FLCR";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 20;
/// Sender id used for server broadcasts and checkpoints.
pub const SERVER_ID: u32 = u32::MAX;

const TAG_FP32: u8 = 0;
const NO_AXIS: u8 = 0xFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Encoding {
    Fp32,
    Quantized(BitWidth),
}

impl Encoding {
    pub fn from_bits(bits: Option<BitWidth>) -> Self {
        bits.map_or(Encoding::Fp32, Encoding::Quantized)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Fp32(Tensor),
    Quantized(QuantizedTensor),
}

impl Payload {
    pub fn shape(&self) -> &[usize] {
        match self {
            Payload::Fp32(t) => t.shape(),
            Payload::Quantized(q) => &q.shape,
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        match self {
            Payload::Fp32(t) => Ok(t.clone()),
            Payload::Quantized(q) => quant::dequantize(q),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub payload: Payload,
}

impl TensorRecord {
    /// Bytes this record occupies on the wire.
    pub fn encoded_len(&self) -> usize {
        let rank = self.payload.shape().len();
        let fixed = 2 + self.name.len() + 1 + 4 * rank + 1 + 1 + 4;
        match &self.payload {
            Payload::Fp32(t) => fixed + 4 * t.len(),
            Payload::Quantized(q) => fixed + 4 + q.params.channels() * 8 + q.packed.len(),
        }
    }
}

/// Per-record bytes outside the payload and channel parameters.
pub fn record_overhead(name: &str, rank: usize, quantized: bool) -> usize {
    2 + name.len() + 1 + 4 * rank + 1 + 1 + 4 + if quantized { 4 } else { 0 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateMessage {
    pub round: u32,
    pub sender: u32,
    pub records: Vec<TensorRecord>,
}

/// Group-norm affine parameters always travel as FP32.
fn travels_unquantized(name: &str) -> bool {
    split_param_name(name).is_some_and(|(_, role)| role.is_norm())
}

impl UpdateMessage {
    pub fn new(round: u32, sender: u32, records: Vec<TensorRecord>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if !seen.insert(r.name.as_str()) {
                return Err(Error::Protocol(format!("duplicate tensor name {}", r.name)));
            }
            if r.name.len() > u16::MAX as usize || r.payload.shape().len() > u8::MAX as usize {
                return Err(Error::Protocol(format!("tensor {} cannot be framed", r.name)));
            }
        }
        Ok(UpdateMessage { round, sender, records })
    }

    /// Encodes named tensors; norm parameters bypass quantization.
    pub fn encode<'a>(
        round: u32,
        sender: u32,
        tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
        encoding: Encoding,
    ) -> Result<Self> {
        let mut records = Vec::new();
        for (name, t) in tensors {
            let payload = match encoding {
                Encoding::Quantized(bits) if !travels_unquantized(name) => {
                    Payload::Quantized(quant::quantize_tensor(t, bits)?)
                }
                _ => Payload::Fp32(t.clone().with_requires_grad(false)),
            };
            records.push(TensorRecord { name: name.to_string(), payload });
        }
        Self::new(round, sender, records)
    }

    pub fn encode_params(round: u32, sender: u32, params: &ParamSet, encoding: Encoding) -> Result<Self> {
        Self::encode(round, sender, params.iter(), encoding)
    }

    /// Reconstructs FP32 tensors, dequantizing where needed.
    pub fn decode(&self) -> Result<ParamSet> {
        self.records
            .iter()
            .map(|r| Ok((r.name.clone(), r.payload.to_tensor()?)))
            .collect()
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES + self.records.iter().map(TensorRecord::encoded_len).sum::<usize>()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            let shape = r.payload.shape();
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &r.payload {
                Payload::Fp32(t) => {
                    out.push(TAG_FP32);
                    out.push(NO_AXIS);
                    out.extend_from_slice(&((t.len() * 4) as u32).to_le_bytes());
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Payload::Quantized(q) => {
                    out.push(q.params.bits.bits() as u8);
                    out.push(q.params.axis.map_or(NO_AXIS, |a| a as u8));
                    out.extend_from_slice(&(q.params.channels() as u32).to_le_bytes());
                    for (s, &z) in q.params.scales.iter().zip(&q.params.zero_points) {
                        out.extend_from_slice(&s.to_le_bytes());
                        out.extend_from_slice(&(z as f32).to_le_bytes());
                    }
                    out.extend_from_slice(&(q.packed.len() as u32).to_le_bytes());
                    out.extend_from_slice(&q.packed);
                }
            }
        }
        debug_assert_eq!(out.len(), self.encoded_len());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Integrity("bad magic".into()));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Integrity(format!("unsupported format version {version}")));
        }
        r.u16()?;
        let round = r.u32()?;
        let sender = r.u32()?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape.contains(&0) {
                return Err(Error::Integrity(format!("{name}: zero extent")));
            }
            let elements: usize = shape.iter().product();
            let tag = r.u8()?;
            let axis = match r.u8()? {
                NO_AXIS => None,
                a if (a as usize) < rank => Some(a as usize),
                a => return Err(Error::Integrity(format!("{name}: axis {a} out of range"))),
            };
            let payload = if tag == TAG_FP32 {
                let len = r.u32()? as usize;
                if len != elements * 4 {
                    return Err(Error::Integrity(format!("{name}: declared {len} payload bytes for {elements} values")));
                }
                let data = r.take(len)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Payload::Fp32(Tensor::new(&shape, data)?)
            } else {
                let bits = BitWidth::from_bits(tag).ok_or_else(|| Error::Integrity(format!("{name}: unknown encoding {tag}")))?;
                let channels = r.u32()? as usize;
                if channels != quant::channel_count(&shape, axis) {
                    return Err(Error::Integrity(format!("{name}: {channels} channels for shape {shape:?}")));
                }
                let mut scales = Vec::with_capacity(channels);
                let mut zero_points = Vec::with_capacity(channels);
                for _ in 0..channels {
                    scales.push(r.f32()?);
                    let z = r.f32()?;
                    if !(z >= 0.0 && z <= bits.max_code() as f32 && z.fract() == 0.0) {
                        return Err(Error::Integrity(format!("{name}: zero point {z} invalid")));
                    }
                    zero_points.push(z as u32);
                }
                let len = r.u32()? as usize;
                if len != quant::packed_len(elements, bits) {
                    return Err(Error::Integrity(format!("{name}: declared {len} code bytes for {elements} codes")));
                }
                let packed = r.take(len)?.to_vec();
                Payload::Quantized(QuantizedTensor { shape, params: QuantParams { bits, axis, scales, zero_points }, packed })
            };
            records.push(TensorRecord { name, payload });
        }
        if r.pos != bytes.len() {
            return Err(Error::Integrity(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Self::new(round, sender, records)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Integrity(format!("message truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn serialize(round: u32, sender: u32, params: &ParamSet, encoding: Encoding) -> Result<Vec<u8>> {
    Ok(UpdateMessage::encode_params(round, sender, params, encoding)?.to_bytes())
}

pub fn deserialize(bytes: &[u8]) -> Result<UpdateMessage> {
    UpdateMessage::from_bytes(bytes)
}

pub fn save_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    fs::write(path, serialize(0, SERVER_ID, params, Encoding::Fp32)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    deserialize(&fs::read(path)?)?.decode()
}

/// Total communication cost over `rounds`: one download and one upload of
/// `bytes_per_exchange` each round.
pub fn tcc(rounds: u64, bytes_per_exchange: u64) -> u64 {
    2 * rounds * bytes_per_exchange
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub client: usize,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
}

/// Per-round, per-client byte counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostLedger {
    entries: Vec<LedgerEntry>,
    total_uplink: u64,
    total_downlink: u64,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, round: usize, client: usize, uplink_bytes: u64, downlink_bytes: u64) {
        self.entries.push(LedgerEntry { round, client, uplink_bytes, downlink_bytes });
        self.total_uplink += uplink_bytes;
        self.total_downlink += downlink_bytes;
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total_uplink(&self) -> u64 {
        self.total_uplink
    }

    pub fn total_downlink(&self) -> u64 {
        self.total_downlink
    }

    pub fn total(&self) -> u64 {
        self.total_uplink + self.total_downlink
    }

    /// `(uplink, downlink)` summed over the clients of one round.
    pub fn round_totals(&self, round: usize) -> (u64, u64) {
        self.entries
            .iter()
            .filter(|e| e.round == round)
            .fold((0, 0), |(u, d), e| (u + e.uplink_bytes, d + e.downlink_bytes))
    }

    /// Largest single-client `(uplink, downlink)` in a round.
    pub fn round_client_cost(&self, round: usize) -> (u64, u64) {
        self.entries
            .iter()
            .filter(|e| e.round == round)
            .map(|e| (e.uplink_bytes, e.downlink_bytes))
            .max_by_key(|&(u, d)| u + d)
            .unwrap_or((0, 0))
    }

    /// Cost borne by one participating client over every recorded round.
    pub fn client_tcc(&self) -> u64 {
        let rounds: std::collections::BTreeSet<usize> = self.entries.iter().map(|e| e.round).collect();
        rounds
            .into_iter()
            .map(|r| {
                let (u, d) = self.round_client_cost(r);
                u + d
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeReport {
    pub model: String,
    pub total_params: usize,
    pub trainable_params: usize,
    pub message_bytes: u64,
    pub rounds: u64,
    pub tcc_bytes: u64,
}

/// Sizes measured from an actual serialized message of the trainable set.
pub fn message_size_report(spec: &ModelSpec, mode: &TrainingMode, encoding: Encoding, rounds: u64) -> Result<SizeReport> {
    let spec = Arc::new(spec.clone());
    let base = Arc::new(spec.init_params(0));
    let model = AdaptedModel::from_mode(spec.clone(), base, mode, 0)?;
    let message = UpdateMessage::encode_params(0, SERVER_ID, model.trainable_tensors(), encoding)?;
    let message_bytes = message.to_bytes().len() as u64;
    Ok(SizeReport {
        model: spec.name.clone(),
        total_params: model.count_parameters(CountFilter::All),
        trainable_params: model.count_parameters(CountFilter::Trainable),
        message_bytes,
        rounds,
        tcc_bytes: tcc(rounds, message_bytes),
    })
}
