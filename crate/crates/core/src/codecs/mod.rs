//! Uplink codecs: unbiased stochastic quantizers (PQ, QSGD), the biased TopK
//! sparsifier and an uncompressed pass-through, all sharing one wire format
//! and one traffic ledger.
//!
//! Every [`EncodedUpdate`] carries its exact uplink cost in `payload_bits`,
//! computed by [`traffic_bits`] from the scheme parameters actually used.

pub mod bits;
mod pq;
mod qsgd;
mod topk;
mod wire;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use pq::pq_encode;
pub use qsgd::qsgd_encode;
pub use topk::topk_encode;

use bits::{index_width, BitReader};

/// Bytes per raw model value when no other width is configured.
pub const DEFAULT_VALUE_BYTES: u32 = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("update vector must have at least one element")]
    Empty,
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("{scheme:?} needs at least {min} levels, got {got}")]
    LevelCount { scheme: Scheme, min: u32, got: u32 },
    #[error("kept count {k} outside [1, {d}]")]
    KeptCount { k: usize, d: usize },
    #[error("raw value width must be positive")]
    ValueBytes,
    #[error("dimension {0} does not fit the wire format")]
    Dimension(usize),
    #[error("corrupt payload: {0}")]
    Corrupt(String),
}

/// Compression scheme tag; the discriminant is the wire tag byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Pq = 0,
    Qsgd = 1,
    TopK = 2,
    /// Uncompressed values, `8h` bits each.
    Raw = 3,
}

impl Scheme {
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Scheme::Pq),
            1 => Some(Scheme::Qsgd),
            2 => Some(Scheme::TopK),
            3 => Some(Scheme::Raw),
            _ => None,
        }
    }
}

/// A client's accumulated local-gradient sum for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateVector(Vec<f64>);

impl UpdateVector {
    pub fn new(values: Vec<f64>) -> Result<Self, CodecError> {
        if values.is_empty() {
            return Err(CodecError::Empty);
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(CodecError::NonFinite { index, value });
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Result<Self, CodecError> {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn squared_distance(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

impl AsRef<[f64]> for UpdateVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Compressed wire representation of one update.
///
/// `count` is the centroid count Z (PQ), the level count Z (QSGD), the kept
/// count K (TopK) or the dimension (Raw). `table` holds the centroids (PQ),
/// the scale norm (QSGD), the kept values in index order (TopK) or the raw
/// values.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedUpdate {
    scheme: Scheme,
    dim: usize,
    count: u32,
    table: Vec<f64>,
    index_payload: Vec<u8>,
    index_bits: u64,
    value_bytes: u32,
    payload_bits: u64,
}

impl EncodedUpdate {
    /// Validates the parts against the scheme layout and stamps the accounted
    /// traffic.
    pub(crate) fn from_parts(
        scheme: Scheme,
        dim: usize,
        count: u32,
        table: Vec<f64>,
        index_payload: Vec<u8>,
        value_bytes: u32,
    ) -> Result<Self, CodecError> {
        let layout = Layout::of(scheme, dim, count)?;
        if table.len() != layout.table_len {
            return Err(CodecError::Corrupt(format!(
                "table has {} entries, expected {}",
                table.len(),
                layout.table_len
            )));
        }
        if let Some((index, &value)) = table.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(CodecError::Corrupt(format!(
                "non-finite table entry {value} at {index}"
            )));
        }
        if index_payload.len() as u64 != layout.index_bits.div_ceil(8) {
            return Err(CodecError::Corrupt(format!(
                "index payload is {} bytes, expected {} for {} bits",
                index_payload.len(),
                layout.index_bits.div_ceil(8),
                layout.index_bits
            )));
        }
        let payload_bits = traffic_bits(scheme, dim, count, value_bytes)?;
        Ok(Self {
            scheme,
            dim,
            count,
            table,
            index_payload,
            index_bits: layout.index_bits,
            value_bytes,
            payload_bits,
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Z (PQ/QSGD), K (TopK) or d (Raw).
    pub fn count(&self) -> u32 {
        self.count
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn index_payload(&self) -> &[u8] {
        &self.index_payload
    }

    /// Unpadded length of the index payload.
    pub fn index_bits(&self) -> u64 {
        self.index_bits
    }

    pub fn value_bytes(&self) -> u32 {
        self.value_bytes
    }

    /// Exact accounted uplink cost, tables included.
    pub fn payload_bits(&self) -> u64 {
        self.payload_bits
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        wire::serialize(self)
    }

    /// Parses the wire form. `value_bytes` is not carried on the wire and must
    /// match the sender's configuration for `payload_bits` to agree.
    pub fn from_bytes(bytes: &[u8], value_bytes: u32) -> Result<Self, CodecError> {
        wire::deserialize(bytes, value_bytes)
    }

    /// Reconstructs the update.
    pub fn decode(&self) -> Result<UpdateVector, CodecError> {
        let mut out = vec![0.0; self.dim];
        self.decode_into(&mut out)?;
        Ok(UpdateVector(out))
    }

    /// Decodes into `out`, which must have length `dim`.
    pub fn decode_into(&self, out: &mut [f64]) -> Result<(), CodecError> {
        if out.len() != self.dim {
            return Err(CodecError::Corrupt(format!(
                "output buffer has length {}, expected {}",
                out.len(),
                self.dim
            )));
        }
        let mut reader = BitReader::new(&self.index_payload, self.index_bits);
        let short = || CodecError::Corrupt("index payload ended early".into());
        match self.scheme {
            Scheme::Pq => {
                let width = index_width(self.count as u64);
                for slot in out.iter_mut() {
                    let idx = reader.read(width).ok_or_else(short)?;
                    if idx >= self.count as u64 {
                        return Err(CodecError::Corrupt(format!(
                            "centroid index {idx} >= {}",
                            self.count
                        )));
                    }
                    *slot = self.table[idx as usize];
                }
            }
            Scheme::Qsgd => {
                let norm = self.table[0];
                if norm < 0.0 {
                    return Err(CodecError::Corrupt(format!("negative scale {norm}")));
                }
                let levels = self.count as u64;
                let width = index_width(levels + 1);
                let magnitude = |level: u64| norm * level as f64 / levels as f64;
                // tabulate the magnitudes when that is cheaper than the divisions
                let table: Vec<f64> = if levels < self.dim as u64 {
                    (0..=levels).map(magnitude).collect()
                } else {
                    Vec::new()
                };
                for slot in out.iter_mut() {
                    // sign bit first, then the level
                    let code = reader.read(width + 1).ok_or_else(short)?;
                    let level = code >> 1;
                    if level > levels {
                        return Err(CodecError::Corrupt(format!("level {level} > {levels}")));
                    }
                    let m = table.get(level as usize).copied().unwrap_or_else(|| magnitude(level));
                    *slot = if code & 1 == 1 { -m } else { m };
                }
            }
            Scheme::TopK => {
                out.fill(0.0);
                let width = index_width(self.dim as u64);
                let mut previous: Option<u64> = None;
                for &value in &self.table {
                    let idx = reader.read(width).ok_or_else(short)?;
                    if idx >= self.dim as u64 {
                        return Err(CodecError::Corrupt(format!(
                            "kept index {idx} >= {}",
                            self.dim
                        )));
                    }
                    // indices are written in increasing order, so this also
                    // rules out duplicates
                    if previous.is_some_and(|p| idx <= p) {
                        return Err(CodecError::Corrupt(format!(
                            "kept index {idx} repeated or out of order"
                        )));
                    }
                    previous = Some(idx);
                    out[idx as usize] = value;
                }
            }
            Scheme::Raw => out.copy_from_slice(&self.table),
        }
        Ok(())
    }
}

/// Uncompressed pass-through.
pub fn raw_encode(u: &UpdateVector, value_bytes: u32) -> Result<EncodedUpdate, CodecError> {
    let d = u.dim();
    let count = u32::try_from(d).map_err(|_| CodecError::Dimension(d))?;
    EncodedUpdate::from_parts(Scheme::Raw, d, count, u.0.clone(), Vec::new(), value_bytes)
}

/// Exact uplink bits for one encoded update.
///
/// * PQ: `8·Z·h + d·ceil(log2 Z)` (centroid table plus indices)
/// * QSGD: `8h + d·(1 + ceil(log2(Z+1)))` (norm, sign, level)
/// * TopK: `K·(8h + ceil(log2 d))`
/// * Raw: `8h·d`
pub fn traffic_bits(scheme: Scheme, d: usize, count: u32, value_bytes: u32) -> Result<u64, CodecError> {
    let layout = Layout::of(scheme, d, count)?;
    if value_bytes == 0 {
        return Err(CodecError::ValueBytes);
    }
    let value_bits = 8 * value_bytes as u64;
    Ok(layout.table_len as u64 * value_bits + layout.index_bits)
}

/// The allocator's traffic approximation `d·log2 Z`.
pub fn approx_traffic_bits(d: usize, z: f64) -> f64 {
    d as f64 * z.log2()
}

/// Compression rate `Λ = 8h / log2 Z` relative to raw `h`-byte values.
pub fn compression_rate(value_bytes: u32, z: f64) -> f64 {
    8.0 * value_bytes as f64 / z.log2()
}

/// Table length and index-stream length for a scheme instance.
#[derive(Debug, Clone, Copy)]
struct Layout {
    table_len: usize,
    index_bits: u64,
}

impl Layout {
    fn of(scheme: Scheme, d: usize, count: u32) -> Result<Self, CodecError> {
        if d == 0 {
            return Err(CodecError::Empty);
        }
        if u32::try_from(d).is_err() {
            return Err(CodecError::Dimension(d));
        }
        let d64 = d as u64;
        let layout = match scheme {
            Scheme::Pq => {
                // a single centroid only arises from a constant input vector
                if count < 1 {
                    return Err(CodecError::LevelCount { scheme, min: 1, got: count });
                }
                Layout {
                    table_len: count as usize,
                    index_bits: d64 * index_width(count as u64) as u64,
                }
            }
            Scheme::Qsgd => {
                if count < 1 {
                    return Err(CodecError::LevelCount { scheme, min: 1, got: count });
                }
                Layout {
                    table_len: 1,
                    index_bits: d64 * (1 + index_width(count as u64 + 1) as u64),
                }
            }
            Scheme::TopK => {
                if count == 0 || count as usize > d {
                    return Err(CodecError::KeptCount { k: count as usize, d });
                }
                Layout {
                    table_len: count as usize,
                    index_bits: count as u64 * index_width(d64) as u64,
                }
            }
            Scheme::Raw => {
                if count as usize != d {
                    return Err(CodecError::Corrupt(format!(
                        "raw update count {count} differs from dimension {d}"
                    )));
                }
                Layout { table_len: d, index_bits: 0 }
            }
        };
        Ok(layout)
    }
}

/// Codec selection with its per-call parameter, used by the training engine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Codec {
    Raw,
    Pq { levels: u32 },
    Qsgd { levels: u32 },
    TopK { keep: usize },
}

impl Codec {
    pub fn scheme(&self) -> Scheme {
        match self {
            Codec::Raw => Scheme::Raw,
            Codec::Pq { .. } => Scheme::Pq,
            Codec::Qsgd { .. } => Scheme::Qsgd,
            Codec::TopK { .. } => Scheme::TopK,
        }
    }

    pub fn encode<R: Rng + ?Sized>(
        &self,
        u: &UpdateVector,
        value_bytes: u32,
        rng: &mut R,
    ) -> Result<EncodedUpdate, CodecError> {
        match *self {
            Codec::Raw => raw_encode(u, value_bytes),
            Codec::Pq { levels } => pq_encode(u, levels, value_bytes, rng),
            Codec::Qsgd { levels } => qsgd_encode(u, levels, value_bytes, rng),
            Codec::TopK { keep } => topk_encode(u, keep, value_bytes),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pq_compression_rate_at_sixteen_centroids() {
        assert_eq!(compression_rate(4, 16.0), 8.0);
        assert_eq!(approx_traffic_bits(7850, 16.0), 4.0 * 7850.0);
    }

    #[test]
    fn exact_traffic_formulas() {
        assert_eq!(traffic_bits(Scheme::TopK, 1024, 10, 4).unwrap(), 420);
        assert_eq!(traffic_bits(Scheme::Pq, 7850, 16, 4).unwrap(), 8 * 16 * 4 + 7850 * 4);
        assert_eq!(traffic_bits(Scheme::Qsgd, 100, 8, 4).unwrap(), 32 + 100 * (1 + 4));
        assert_eq!(traffic_bits(Scheme::Qsgd, 100, 1, 4).unwrap(), 32 + 100 * 2);
        assert_eq!(traffic_bits(Scheme::Raw, 7850, 7850, 4).unwrap(), 32 * 7850);
        // degenerate single-centroid table
        assert_eq!(traffic_bits(Scheme::Pq, 10, 1, 4).unwrap(), 32);
    }

    #[test]
    fn traffic_parameter_validation() {
        assert!(traffic_bits(Scheme::TopK, 10, 11, 4).is_err());
        assert!(traffic_bits(Scheme::TopK, 10, 0, 4).is_err());
        assert!(traffic_bits(Scheme::Qsgd, 10, 0, 4).is_err());
        assert!(traffic_bits(Scheme::Pq, 0, 4, 4).is_err());
        assert!(traffic_bits(Scheme::Pq, 10, 4, 0).is_err());
    }

    #[test]
    fn update_vector_rejects_bad_input() {
        assert_eq!(UpdateVector::new(vec![]), Err(CodecError::Empty));
        assert!(matches!(
            UpdateVector::new(vec![0.0, f64::NAN]),
            Err(CodecError::NonFinite { index: 1, .. })
        ));
        assert!(UpdateVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn raw_round_trip_is_exact() {
        let u = UpdateVector::new(vec![1.5, -2.25, 1e-300]).unwrap();
        let e = raw_encode(&u, 4).unwrap();
        assert_eq!(e.payload_bits(), 96);
        assert_eq!(e.decode().unwrap(), u);
    }

    #[test]
    fn decode_checks_buffer_length() {
        let u = UpdateVector::new(vec![1.0, 2.0]).unwrap();
        let e = raw_encode(&u, 4).unwrap();
        assert!(e.decode_into(&mut [0.0; 3]).is_err());
    }
}
