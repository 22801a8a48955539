use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

use fedcomp::engine::RoundMetrics;

pub const CSV_SCHEMA: &str = "fedcomp-metrics/1";
pub const CSV_HEADER: &str = "t,Z,loss,acc,bits_exact,bits_cum,comm_s";
pub const TRUNCATED: &str = "# truncated";
pub const MANIFEST_SCHEMA: &str = "fedcomp-manifest/1";
pub const COMPARE_SCHEMA: &str = "fedcomp-compare/1";

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`, so readers never see a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// SHA-256 over `blob <len>\0<bytes>`, the object hash git uses for file
/// contents.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Floats use the shortest representation that parses back to the same value.
pub fn csv_row(m: &RoundMetrics) -> String {
    format!(
        "{},{},{:?},{:?},{},{},{:?}\n",
        m.t, m.z, m.train_loss, m.test_accuracy, m.bits_exact, m.bits_cum, m.comm_s
    )
}

/// The metrics file for the completed rounds. A failed run ends with a
/// `# truncated` comment naming the round and the error.
pub fn metrics_csv(rows: &[RoundMetrics], failure: Option<&str>) -> String {
    let mut out = format!("# schema: {CSV_SCHEMA}\n{CSV_HEADER}\n");
    for m in rows {
        out.push_str(&csv_row(m));
    }
    if let Some(reason) = failure {
        let reason = reason.replace('\n', " ");
        let _ = writeln!(out, "{TRUNCATED} after round {}: {reason}", rows.len());
    }
    out
}

/// One parsed metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub t: usize,
    pub z: u32,
    pub loss: f64,
    pub acc: f64,
    pub bits_exact: u64,
    pub bits_cum: u64,
    pub comm_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsFile {
    pub rows: Vec<MetricsRow>,
    pub truncated: bool,
}

pub fn parse_metrics(text: &str) -> Result<MetricsFile> {
    let mut lines = text.lines();
    let schema = lines.next().context("empty metrics file")?;
    if schema != format!("# schema: {CSV_SCHEMA}") {
        bail!("schema line {schema:?}, expected \"# schema: {CSV_SCHEMA}\"");
    }
    if lines.next() != Some(CSV_HEADER) {
        bail!("header does not match {CSV_HEADER:?}");
    }
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut truncated = false;
    for (i, line) in lines.enumerate() {
        if line.starts_with(TRUNCATED) {
            truncated = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            bail!("row {}: {} fields, expected 7", i + 1, f.len());
        }
        let bad = |what: &str| format!("row {}: bad {what}", i + 1);
        let row = MetricsRow {
            t: f[0].parse().with_context(|| bad("t"))?,
            z: f[1].parse().with_context(|| bad("Z"))?,
            loss: f[2].parse().with_context(|| bad("loss"))?,
            acc: f[3].parse().with_context(|| bad("acc"))?,
            bits_exact: f[4].parse().with_context(|| bad("bits_exact"))?,
            bits_cum: f[5].parse().with_context(|| bad("bits_cum"))?,
            comm_s: f[6].parse().with_context(|| bad("comm_s"))?,
        };
        if rows.last().is_some_and(|prev| prev.t >= row.t) {
            bail!("row {}: t = {} does not increase", i + 1, row.t);
        }
        rows.push(row);
    }
    Ok(MetricsFile { rows, truncated })
}
