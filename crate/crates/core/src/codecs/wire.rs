//! Wire layout, all integers little-endian:
//!
//! ```text
//! u8   scheme tag
//! u32  d
//! u32  count (Z or K; d for raw)
//! f64  table[table_len]
//! u8   index payload, ceil(index_bits / 8) bytes, zero padded
//! ```

use super::{CodecError, EncodedUpdate, Layout, Scheme};

const HEADER_LEN: usize = 9;

pub(super) fn serialize(e: &EncodedUpdate) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * e.table.len() + e.index_payload.len());
    out.push(e.scheme.tag());
    out.extend_from_slice(&(e.dim as u32).to_le_bytes());
    out.extend_from_slice(&e.count.to_le_bytes());
    for v in &e.table {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&e.index_payload);
    out
}

pub(super) fn deserialize(bytes: &[u8], value_bytes: u32) -> Result<EncodedUpdate, CodecError> {
    if bytes.len() < HEADER_LEN {
        return Err(CodecError::Corrupt(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    let scheme = Scheme::from_tag(bytes[0])
        .ok_or_else(|| CodecError::Corrupt(format!("unknown scheme tag {}", bytes[0])))?;
    let dim = u32::from_le_bytes(bytes[1..5].try_into().expect("4 bytes")) as usize;
    let count = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
    let layout = Layout::of(scheme, dim, count).map_err(|e| CodecError::Corrupt(e.to_string()))?;

    let table_bytes = 8 * layout.table_len;
    let payload_bytes = layout.index_bits.div_ceil(8) as usize;
    let expected = HEADER_LEN + table_bytes + payload_bytes;
    if bytes.len() != expected {
        return Err(CodecError::Corrupt(format!(
            "message is {} bytes, layout requires {expected}",
            bytes.len()
        )));
    }
    let table: Vec<f64> = bytes[HEADER_LEN..HEADER_LEN + table_bytes]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let payload = bytes[HEADER_LEN + table_bytes..].to_vec();
    let tail = layout.index_bits % 8;
    if tail != 0 && payload.last().is_some_and(|b| b >> tail != 0) {
        return Err(CodecError::Corrupt("nonzero padding bits".into()));
    }
    let encoded = EncodedUpdate::from_parts(scheme, dim, count, table, payload, value_bytes)?;
    // surface index-range corruption at parse time
    encoded.decode()?;
    Ok(encoded)
}
