//! File emitters: metric CSV, summary documents, pair-scan CSV and the
//! binary Gramian container.
//!
//! Floats are formatted with 17 significant digits in scientific notation,
//! which round-trips `f64` exactly and is locale independent.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pso_core::kernel::{DiffRecord, KernelScan};
use pso_core::linalg::Mat;
use pso_core::train::MetricsTrace;

use crate::config::fnv1a;

/// 17-significant-digit scientific formatting (exact f64 round trip).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub const METRICS_HEADER: &str = "iter,lr,psqr,lsqr,is_err,grad_norm,wall_time";

pub fn write_metrics_csv(path: &Path, trace: &MetricsTrace<f64>) -> Result<()> {
    let mut out = String::new();
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for row in &trace.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.3}\n",
            row.iteration,
            fmt_f64(row.lr),
            fmt_f64(row.psqr),
            fmt_f64(row.lsqr),
            fmt_f64(row.is_err),
            fmt_f64(row.grad_norm),
            row.wall_time_s,
        ));
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Flat `key = value` summary document.
pub fn write_summary(path: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn write_scan_csv(path: &Path, scan: &KernelScan<f64>) -> Result<()> {
    let mut out = String::from("distance,similarity\n");
    for (d, s) in &scan.pairs {
        out.push_str(&format!("{},{}\n", fmt_f64(*d), fmt_f64(*s)));
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn write_differential_csv(path: &Path, records: &[DiffRecord<f64>]) -> Result<()> {
    let mut out = String::from("probe,delta,df_real,df_approx,ratio,degenerate\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.probe,
            fmt_f64(r.delta),
            fmt_f64(r.df_real),
            fmt_f64(r.df_approx),
            fmt_f64(r.ratio),
            r.degenerate,
        ));
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

const GRAMIAN_MAGIC: &[u8; 8] = b"PSOGRAM\0";

/// Binary Gramian container: magic, n, row-major f64 entries, FNV checksum.
pub fn write_gramian(path: &Path, g: &Mat<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + g.n() * g.n() * 8 + 8);
    buf.extend_from_slice(GRAMIAN_MAGIC);
    buf.extend_from_slice(&(g.n() as u64).to_le_bytes());
    for v in g.flat() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let checksum = fnv1a(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    let mut f =
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_gramian(path: &Path) -> Result<Mat<f64>> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() < 24 || &bytes[..8] != GRAMIAN_MAGIC {
        bail!("not a gramian file");
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    if fnv1a(body) != stored {
        bail!("gramian checksum mismatch");
    }
    let n = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    if body.len() != 16 + n * n * 8 {
        bail!("gramian size field does not match file length");
    }
    let data: Vec<f64> = body[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Mat::from_flat(n, data))
}

/// Samples written as CSV, one row per point.
pub fn write_samples_csv(path: &Path, batch: &pso_core::batch::Batch<f64>) -> Result<()> {
    let mut out = String::new();
    for row in batch.iter_rows() {
        let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Loads a headerless numeric CSV as a batch.
pub fn read_samples_csv(path: &Path) -> Result<pso_core::batch::Batch<f64>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .with_context(|| format!("{}:{}: bad number", path.display(), lineno + 1))
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                bail!("{}:{}: ragged row", path.display(), lineno + 1);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("{}: empty dataset", path.display());
    }
    let cols = rows[0].len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let n = flat.len() / cols;
    Ok(pso_core::batch::Batch::from_flat(flat, n, cols))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_formatting_round_trips() {
        for &v in &[0.1, 1.0 / 3.0, 2.5e-300, -7.1e200, 0.0035] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
    }

    #[test]
    fn gramian_round_trips_bitwise() {
        let dir = std::env::temp_dir().join("pso_gram_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("g.bin");
        let mut g = Mat::zeros(3);
        for i in 0..3 {
            for j in 0..3 {
                g[(i, j)] = (i * 3 + j) as f64 * 0.37 - 1.0;
            }
        }
        write_gramian(&path, &g).unwrap();
        let back = read_gramian(&path).unwrap();
        assert_eq!(g.flat(), back.flat());
    }
}
