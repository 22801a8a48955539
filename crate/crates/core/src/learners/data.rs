use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, LearnerError};
use crate::seeds::rng_from;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const IDX_CLASSES: usize = 10;

/// Reads an IDX image file and its label file; pixels are scaled by 1/255.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset, LearnerError> {
    let images = images.as_ref();
    let labels = labels.as_ref();
    let image_bytes =
        fs::read(images).map_err(|e| LearnerError::Format(format!("{}: {e}", images.display())))?;
    let label_bytes =
        fs::read(labels).map_err(|e| LearnerError::Format(format!("{}: {e}", labels.display())))?;
    parse_idx(&image_bytes, &label_bytes)
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, LearnerError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| LearnerError::Format(format!("{what}: truncated header")))
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset, LearnerError> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES {
        return Err(LearnerError::Format(format!(
            "images: magic {magic:#010x}, expected {IDX_IMAGES:#010x}"
        )));
    }
    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS {
        return Err(LearnerError::Format(format!(
            "labels: magic {magic:#010x}, expected {IDX_LABELS:#010x}"
        )));
    }
    let n = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let n_labels = be_u32(labels, 4, "labels")? as usize;
    if n != n_labels {
        return Err(LearnerError::Format(format!("{n} images but {n_labels} labels")));
    }
    let pixels = rows * cols;
    if images.len() != 16 + n * pixels {
        return Err(LearnerError::Format(format!(
            "images: {} bytes, header implies {}",
            images.len(),
            16 + n * pixels
        )));
    }
    if labels.len() != 8 + n {
        return Err(LearnerError::Format(format!(
            "labels: {} bytes, header implies {}",
            labels.len(),
            8 + n
        )));
    }
    let features = images[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<u32> = labels[8..].iter().map(|&b| b as u32).collect();
    if let Some(&label) = labels.iter().find(|&&l| l as usize >= IDX_CLASSES) {
        return Err(LearnerError::Format(format!("label {label} outside 0..=9")));
    }
    Dataset::new(features, labels, pixels, IDX_CLASSES)
}

/// Gaussian clusters with unit variance around `separation·u_c`. The unit
/// directions `u_c` are orthonormal when `n_classes ≤ n_features`, otherwise
/// independent. Labels cycle through the classes and are shuffled.
///
/// Panics if `n_features` or `n_classes` is zero.
pub fn synthetic_classification(
    seed: u64,
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    separation: f64,
) -> Dataset {
    assert!(n_features > 0 && n_classes > 0, "empty feature or class space");
    let mut rng = rng_from(seed);
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };

    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let mut v: Vec<f64> = (0..n_features).map(|_| gauss()).collect();
        if n_classes <= n_features {
            for u in &directions {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= dot * ui;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
        directions.push(v);
    }

    let mut labels: Vec<u32> = (0..n_samples).map(|i| (i % n_classes) as u32).collect();
    let mut order_rng = rng_from(seed ^ 0x9e37_79b9_7f4a_7c15);
    labels.shuffle(&mut order_rng);

    let mut features = Vec::with_capacity(n_samples * n_features);
    for &l in &labels {
        let center = &directions[l as usize];
        for c in center {
            features.push((separation * c + gauss()) as f32);
        }
    }
    Dataset::new(features, labels, n_features, n_classes).expect("consistent by construction")
}

pub const FIXTURE_MAGIC: [u8; 4] = *b"FCDS";

/// `FCDS`, then `u32` sample, feature and class counts, then `f32` features
/// and `u32` labels, all little-endian.
pub fn write_fixture<W: Write>(data: &Dataset, mut out: W) -> Result<(), LearnerError> {
    out.write_all(&FIXTURE_MAGIC)?;
    for n in [data.len(), data.n_features(), data.n_classes()] {
        let n = u32::try_from(n).map_err(|_| LearnerError::Format(format!("count {n} exceeds u32")))?;
        out.write_all(&n.to_le_bytes())?;
    }
    for v in data.features() {
        out.write_all(&v.to_le_bytes())?;
    }
    for l in data.labels() {
        out.write_all(&l.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_fixture<R: Read>(mut input: R) -> Result<Dataset, LearnerError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || bytes[..4] != FIXTURE_MAGIC {
        return Err(LearnerError::Format("not a dataset fixture".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (n, f, c) = (word(4), word(8), word(12));
    let expected = 16 + 4 * n * f + 4 * n;
    if bytes.len() != expected {
        return Err(LearnerError::Format(format!(
            "fixture is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let body = &bytes[16..];
    let (feat, lab) = body.split_at(4 * n * f);
    let features = feat
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let labels = lab
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Dataset::new(features, labels, f, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_pair(pixels: &[u8], labels: &[u8], rows: u32, cols: u32) -> (Vec<u8>, Vec<u8>) {
        let n = labels.len() as u32;
        let mut img = Vec::new();
        for v in [IDX_IMAGES, n, rows, cols] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend_from_slice(pixels);
        let mut lab = Vec::new();
        for v in [IDX_LABELS, n] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend_from_slice(labels);
        (img, lab)
    }

    #[test]
    fn two_image_round_trip() {
        let pixels = [0u8, 255, 51, 102, 7, 8, 9, 10];
        let (img, lab) = idx_pair(&pixels, &[3, 9], 2, 2);
        let data = parse_idx(&img, &lab).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.n_features(), 4);
        assert_eq!(data.labels(), &[3, 9]);
        let back: Vec<u8> = data.features().iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(back, pixels);
        assert_eq!(data.row(0)[1], 1.0);
    }

    #[test]
    fn idx_errors() {
        let (mut img, lab) = idx_pair(&[1, 2, 3, 4], &[1], 2, 2);
        assert!(parse_idx(&img[..img.len() - 1], &lab).is_err());
        assert!(parse_idx(&img, &lab[..8]).is_err());
        let (_, two) = idx_pair(&[1, 2, 3, 4, 5, 6, 7, 8], &[1, 2], 2, 2);
        assert!(parse_idx(&img, &two).is_err());
        let (bad_img, bad_lab) = idx_pair(&[1, 2, 3, 4], &[10], 2, 2);
        assert!(parse_idx(&bad_img, &bad_lab).is_err());
        img[3] = 0x01;
        assert!(matches!(parse_idx(&img, &lab), Err(LearnerError::Format(m)) if m.contains("magic")));
    }

    #[test]
    fn load_from_files() {
        let dir = std::env::temp_dir().join(format!("fedcomp-idx-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let (img, lab) = idx_pair(&[0, 255], &[1, 0], 1, 1);
        fs::write(dir.join("img"), img).unwrap();
        fs::write(dir.join("lab"), lab).unwrap();
        let data = load_idx(dir.join("img"), dir.join("lab")).unwrap();
        assert_eq!(data.features(), &[0.0, 1.0]);
        assert!(load_idx(dir.join("missing"), dir.join("lab")).is_err());
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = synthetic_classification(42, 103, 7, 5, 3.0);
        let b = synthetic_classification(42, 103, 7, 5, 3.0);
        assert_eq!(a, b);
        let bits_a: Vec<u32> = a.features().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.features().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
        assert_ne!(a, synthetic_classification(43, 103, 7, 5, 3.0));
        let counts = a.class_counts();
        assert_eq!(counts.iter().sum::<usize>(), 103);
        assert!(counts.iter().all(|&c| c == 20 || c == 21));
    }

    #[test]
    fn fixture_round_trip() {
        let data = synthetic_classification(1, 17, 3, 4, 2.0);
        let mut buf = Vec::new();
        write_fixture(&data, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"FCDS");
        assert_eq!(buf.len(), 16 + 17 * 3 * 4 + 17 * 4);
        assert_eq!(read_fixture(&buf[..]).unwrap(), data);
        assert!(read_fixture(&buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(read_fixture(&buf[..]).is_err());
    }
}
