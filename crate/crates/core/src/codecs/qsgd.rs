use rand::Rng;

use super::bits::{index_width, BitWriter};
use super::{CodecError, EncodedUpdate, Scheme, UpdateVector};

/// QSGD with `levels` = s quantization levels of `|u_e| / ‖u‖₂`.
///
/// Each element is sent as a sign bit and a level in `0..=s`; the level is
/// `l` or `l + 1` where `l = floor(s·|u_e|/‖u‖₂)`, picking the upper one with
/// probability `s·|u_e|/‖u‖₂ − l`. The decoded value `‖u‖₂·sgn(u_e)·level/s`
/// is unbiased. The zero vector is sent with scale 0 and all-zero levels.
pub fn qsgd_encode<R: Rng + ?Sized>(
    u: &UpdateVector,
    levels: u32,
    value_bytes: u32,
    rng: &mut R,
) -> Result<EncodedUpdate, CodecError> {
    if levels < 1 {
        return Err(CodecError::LevelCount {
            scheme: Scheme::Qsgd,
            min: 1,
            got: levels,
        });
    }
    let values = u.as_slice();
    let d = values.len();
    let norm = u.norm_sq().sqrt();
    let width = index_width(levels as u64 + 1);
    let mut writer = BitWriter::with_capacity(d as u64 * (1 + width as u64));
    let s = levels as f64;
    let scale = s / norm;

    for &v in values {
        let level = if norm == 0.0 {
            0
        } else {
            let r = (v.abs() * scale).min(s);
            let l = r.floor();
            let p_up = r - l;
            l as u64 + u64::from(rng.random::<f64>() < p_up)
        };
        // sign bit, then the level: LSB-first packing makes this one write
        writer.write(u64::from(v < 0.0) | level << 1, width + 1);
    }

    EncodedUpdate::from_parts(
        Scheme::Qsgd,
        d,
        levels,
        vec![norm],
        writer.into_bytes(),
        value_bytes,
    )
}
