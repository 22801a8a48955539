//! LSB-first bit packing for fixed-width index streams.

/// Number of bits needed to address `n` distinct symbols, `ceil(log2(n))`.
/// A single symbol needs zero bits.
pub fn index_width(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

#[derive(Debug, Default, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    len: u64,
    // fewer than 64 bits not yet flushed to `bytes`
    pending: u64,
    pending_bits: u32,
}

impl BitWriter {
    pub fn with_capacity(bits: u64) -> Self {
        Self {
            bytes: Vec::with_capacity(bits.div_ceil(8) as usize),
            ..Self::default()
        }
    }

    /// Appends the low `width` bits of `value`.
    pub fn write(&mut self, value: u64, width: u32) {
        debug_assert!(width <= 64);
        debug_assert!(width == 64 || value >> width == 0);
        if width == 0 {
            return;
        }
        if self.pending_bits + width < 64 {
            self.pending |= value << self.pending_bits;
            self.pending_bits += width;
        } else {
            let take = 64 - self.pending_bits;
            self.pending |= value << self.pending_bits;
            self.bytes.extend_from_slice(&self.pending.to_le_bytes());
            self.pending = if take == 64 { 0 } else { value >> take };
            self.pending_bits = width - take;
        }
        self.len += width as u64;
    }

    pub fn bit_len(&self) -> u64 {
        self.len
    }

    pub fn into_bytes(mut self) -> Vec<u8> {
        let tail = self.pending_bits.div_ceil(8) as usize;
        self.bytes.extend_from_slice(&self.pending.to_le_bytes()[..tail]);
        self.bytes
    }
}

#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
    limit: u64,
}

impl<'a> BitReader<'a> {
    /// Reader over the first `bit_len` bits of `bytes`.
    pub fn new(bytes: &'a [u8], bit_len: u64) -> Self {
        debug_assert!(bit_len <= bytes.len() as u64 * 8);
        Self {
            bytes,
            pos: 0,
            limit: bit_len,
        }
    }

    pub fn read(&mut self, width: u32) -> Option<u64> {
        if self.pos + width as u64 > self.limit {
            return None;
        }
        let start = (self.pos / 8) as usize;
        let offset = (self.pos % 8) as u32;
        if width + offset <= 64 {
            if let Some(word) = self.bytes.get(start..start + 8) {
                let word = u64::from_le_bytes(word.try_into().expect("8 bytes"));
                let shifted = word >> offset;
                self.pos += width as u64;
                return Some(if width == 64 { shifted } else { shifted & ((1u64 << width) - 1) });
            }
        }
        let mut out = 0u64;
        let mut done = 0u32;
        while done < width {
            let byte = self.bytes[(self.pos / 8) as usize] as u64;
            let offset = (self.pos % 8) as u32;
            let take = (width - done).min(8 - offset);
            let bits = (byte >> offset) & ((1u64 << take) - 1);
            out |= bits << done;
            done += take;
            self.pos += take as u64;
        }
        Some(out)
    }
}
