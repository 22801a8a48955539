use super::bits::{index_width, BitWriter};
use super::{CodecError, EncodedUpdate, Scheme, UpdateVector};

/// Keeps the `keep` largest-magnitude elements; equal magnitudes are resolved
/// in favour of the lower index.
pub fn topk_encode(u: &UpdateVector, keep: usize, value_bytes: u32) -> Result<EncodedUpdate, CodecError> {
    let values = u.as_slice();
    let d = values.len();
    if keep == 0 || keep > d {
        return Err(CodecError::KeptCount { k: keep, d });
    }
    let mut order: Vec<usize> = (0..d).collect();
    let by_magnitude = |a: &usize, b: &usize| {
        values[*b]
            .abs()
            .total_cmp(&values[*a].abs())
            .then_with(|| a.cmp(b))
    };
    if keep < d {
        order.select_nth_unstable_by(keep - 1, by_magnitude);
        order.truncate(keep);
    }
    order.sort_unstable();

    let width = index_width(d as u64);
    let mut writer = BitWriter::with_capacity(keep as u64 * width as u64);
    let mut kept = Vec::with_capacity(keep);
    for &i in &order {
        writer.write(i as u64, width);
        kept.push(values[i]);
    }
    EncodedUpdate::from_parts(
        Scheme::TopK,
        d,
        keep as u32,
        kept,
        writer.into_bytes(),
        value_bytes,
    )
}
