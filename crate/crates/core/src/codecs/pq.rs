use rand::Rng;

use super::bits::{index_width, BitWriter};
use super::{CodecError, EncodedUpdate, Scheme, UpdateVector};

/// Probability quantization with `levels` equally spaced centroids over
/// `[min(u), max(u)]`.
///
/// An element between neighbouring centroids `lo <= u_e <= hi` is sent as `hi`
/// with probability `(u_e - lo) / (hi - lo)` and as `lo` otherwise, so the
/// decoded value is unbiased. A constant vector becomes a one-centroid table
/// with zero-width indices.
pub fn pq_encode<R: Rng + ?Sized>(
    u: &UpdateVector,
    levels: u32,
    value_bytes: u32,
    rng: &mut R,
) -> Result<EncodedUpdate, CodecError> {
    if levels < 2 {
        return Err(CodecError::LevelCount {
            scheme: Scheme::Pq,
            min: 2,
            got: levels,
        });
    }
    let values = u.as_slice();
    let d = values.len();
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));

    if lo == hi {
        return EncodedUpdate::from_parts(Scheme::Pq, d, 1, vec![lo], Vec::new(), value_bytes);
    }

    let centroids = centroid_table(lo, hi, levels);
    let last = levels as usize - 1;
    let spacing = (hi - lo) / last as f64;
    let inv_spacing = 1.0 / spacing;
    let inv_width: Vec<f64> = centroids.windows(2).map(|c| 1.0 / (c[1] - c[0])).collect();
    let width = index_width(levels as u64);
    let mut writer = BitWriter::with_capacity(d as u64 * width as u64);

    for &v in values {
        // interval guess from the position, then corrected against the
        // materialized table so that c[l] <= v <= c[l + 1] holds exactly
        let mut l = (((v - lo) * inv_spacing) as usize).min(last - 1);
        while l > 0 && v < centroids[l] {
            l -= 1;
        }
        while l + 1 < last && v > centroids[l + 1] {
            l += 1;
        }
        let p_up = (v - centroids[l]) * inv_width[l];
        // one draw per element; p_up = 0 never moves up
        let index = l + usize::from(rng.random::<f64>() < p_up);
        writer.write(index as u64, width);
    }

    EncodedUpdate::from_parts(
        Scheme::Pq,
        d,
        levels,
        centroids,
        writer.into_bytes(),
        value_bytes,
    )
}

/// `levels` points from `lo` to `hi` inclusive; the endpoints are exact.
pub(crate) fn centroid_table(lo: f64, hi: f64, levels: u32) -> Vec<f64> {
    let last = levels as usize - 1;
    let spacing = (hi - lo) / last as f64;
    let mut table: Vec<f64> = (0..levels as usize).map(|j| lo + j as f64 * spacing).collect();
    table[last] = hi;
    table
}
