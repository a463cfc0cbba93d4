//! Metrics and on-disk formats: CSV tables, 8-bit PGM images and flat binary
//! tensors.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::numerics;

/// Reported when the reconstruction is exact.
pub const PSNR_CAP_DB: f64 = 200.0;

pub fn psnr(x: &[f64], reference: &[f64], max_value: f64) -> Result<f64> {
    check_dim(reference.len(), x.len())?;
    if x.is_empty() {
        return Err(Error::EmptyDimension);
    }
    if !(max_value > 0.0) {
        return Err(Error::InvalidParameter {
            name: "max_value",
            reason: format!("must be positive, got {max_value}"),
        });
    }
    let mse = numerics::norm_sq(&numerics::sub(x, reference)) / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_value * max_value / mse).log10()).min(PSNR_CAP_DB))
}

/// `2 E|a - b| - E|a - a'| - E|b - b'|` with all-pairs means (V-statistic, so
/// never negative).
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidParameter {
            name: "samples",
            reason: "both sample sets must be nonempty".into(),
        });
    }
    let dim = a[0].len();
    for v in a.iter().chain(b) {
        check_dim(dim, v.len())?;
    }
    let mean_dist = |p: &[Vec<f64>], q: &[Vec<f64>]| {
        let mut s = 0.0;
        for x in p {
            for y in q {
                s += x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
            }
        }
        s / (p.len() * q.len()) as f64
    };
    let ed = 2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b);
    Ok(ed.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryMetrics {
    pub index: usize,
    pub psnr: f64,
    pub residual: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// Mean over trajectories, dB.
    pub psnr: f64,
    /// Mean `|y - A(xhat)|`.
    pub residual: f64,
    /// Distance between the sample mean and the reference mean.
    pub sample_mean_error: f64,
    /// Against analytic posterior samples when available, else the ground truth.
    pub energy_distance: f64,
    /// Kernel l2 error for blind runs.
    pub kernel_error: Option<f64>,
    pub wall_time: f64,
    pub per_trajectory: Vec<TrajectoryMetrics>,
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    scope: &'a str,
    index: String,
    psnr: f64,
    residual: f64,
    sample_mean_error: String,
    energy_distance: String,
    kernel_error: String,
    wall_time: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Columns: scope,index,psnr,residual,sample_mean_error,energy_distance,kernel_error,wall_time.
/// One `summary` row followed by one `trajectory` row per trajectory.
pub fn write_metrics_csv(path: &Path, m: &MetricsRecord) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.serialize(MetricsRow {
        scope: "summary",
        index: String::new(),
        psnr: m.psnr,
        residual: m.residual,
        sample_mean_error: m.sample_mean_error.to_string(),
        energy_distance: m.energy_distance.to_string(),
        kernel_error: opt(m.kernel_error),
        wall_time: m.wall_time,
    })?;
    for t in &m.per_trajectory {
        w.serialize(MetricsRow {
            scope: "trajectory",
            index: t.index.to_string(),
            psnr: t.psnr,
            residual: t.residual,
            sample_mean_error: String::new(),
            energy_distance: String::new(),
            kernel_error: String::new(),
            wall_time: t.wall_time,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub trajectory: usize,
    pub t: f64,
    pub u_norm: f64,
    pub c_score: f64,
    pub c_control: f64,
    pub c_terminal: f64,
    pub total: f64,
    pub residual: f64,
}

/// Columns: trajectory,t,u_norm,c_score,c_control,c_terminal,total,residual.
pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    write_rows(path, rows, "trajectory,t,u_norm,c_score,c_control,c_terminal,total,residual")
}

/// Serializes `rows`; writes just `header` when there are none.
pub(crate) fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &str) -> Result<()> {
    if rows.is_empty() {
        std::fs::write(path, format!("{header}\n"))?;
        return Ok(());
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Binary greyscale image; values map linearly from `[lo, hi]` onto 0..=255 and
/// are clamped.
pub fn write_pgm(path: &Path, values: &[f64], width: usize, height: usize, lo: f64, hi: f64) -> Result<()> {
    check_dim(width * height, values.len())?;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| {
        let s = ((v - lo) / span * 255.0).round();
        if s.is_nan() {
            0
        } else {
            s.clamp(0.0, 255.0) as u8
        }
    }));
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let bad = || Error::Format(format!("{} is not a binary PGM", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos..pos + w * h).ok_or_else(bad)?.to_vec();
    Ok((w, h, data))
}

pub const TENSOR_MAGIC: &[u8; 8] = b"DTMTNS01";

/// `DTMTNS01`, rows and cols as little-endian u64, then row-major f64 LE.
pub fn write_tensor(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let cols = rows.first().map_or(0, Vec::len);
    for r in rows {
        check_dim(cols, r.len())?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(rows.len() as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())?;
    for r in rows {
        for v in r {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |why: &str| Error::Format(format!("{}: {why}", path.display()));
    if bytes.len() < 24 || &bytes[..8] != TENSOR_MAGIC {
        return Err(bad("missing tensor header"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes")) as usize;
    let (rows, cols) = (word(8), word(16));
    let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| bad("size overflow"))?;
    if bytes.len() - 24 != expected {
        return Err(bad("payload length does not match shape"));
    }
    Ok(bytes[24..]
        .chunks_exact(8 * cols.max(1))
        .take(rows)
        .map(|row| row.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn psnr_examples() {
        let x = [0.2, -0.4, 1.0];
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP_DB);
        // every entry off by 0.1: MSE 0.01
        let y = [0.3, -0.3, 1.1];
        assert!((psnr(&y, &x, 1.0).unwrap() - 20.0).abs() < 1e-10);
        let c = 7.5;
        let (xs, ys): (Vec<f64>, Vec<f64>) = x.iter().zip(&y).map(|(a, b)| (a * c, b * c)).unzip();
        assert!((psnr(&ys, &xs, c).unwrap() - 20.0).abs() < 1e-10);
        assert!(psnr(&x, &x, 0.0).is_err());
        assert!(psnr(&x, &x[..2], 1.0).is_err());
    }

    #[test]
    fn energy_distance_examples() {
        let mut rng = Rng::new(3);
        let a: Vec<Vec<f64>> = (0..1000).map(|_| vec![rng.normal()]).collect();
        assert!(energy_distance(&a, &a).unwrap() <= 1e-12);
        let b: Vec<Vec<f64>> = (0..1000).map(|_| vec![10.0 + rng.normal()]).collect();
        // E|z - z'| = 2/sqrt(pi) for unit normals; the cross term is ~10
        let expected = 2.0 * 10.0 - 2.0 * (2.0 / std::f64::consts::PI.sqrt());
        let ed = energy_distance(&a, &b).unwrap();
        assert!((ed - expected).abs() < 0.05 * expected, "{ed} vs {expected}");
        assert!(energy_distance(&[], &a).is_err());
    }

    #[test]
    fn energy_distance_nonnegative_fuzz() {
        let mut rng = Rng::new(11);
        for _ in 0..100 {
            let n = 1 + rng.below(20);
            let m = 1 + rng.below(20);
            let shift = 3.0 * rng.normal();
            let a: Vec<Vec<f64>> = (0..n).map(|_| rng.gaussian(3).unwrap()).collect();
            let b: Vec<Vec<f64>> = (0..m).map(|_| rng.gaussian(3).unwrap().iter().map(|v| v * 2.0 + shift).collect()).collect();
            assert!(energy_distance(&a, &b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.pgm");
        let vals: Vec<f64> = (0..64).map(|i| i as f64 / 63.0).collect();
        write_pgm(&p, &vals, 8, 8, 0.0, 1.0).unwrap();
        let (w, h, data) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (8, 8));
        assert_eq!(data[0], 0);
        assert_eq!(data[63], 255);
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n8 8\n255\n"));
        assert_eq!(bytes.len(), 11 + 64);
        assert!(write_pgm(&p, &vals[..10], 8, 8, 0.0, 1.0).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let rows = vec![vec![1.0, -2.5, f64::MIN_POSITIVE], vec![0.0, 1e300, -0.0]];
        write_tensor(&p, &rows).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in rows.iter().flatten().zip(back.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 24 + 48);
        std::fs::write(&p, b"DTMTNS01short").unwrap();
        assert!(read_tensor(&p).is_err());
        assert!(write_tensor(&p, &[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    proptest! {
        #[test]
        fn psnr_scale_invariant(
            x in proptest::collection::vec(-5.0f64..5.0, 1..16),
            noise in proptest::collection::vec(-1.0f64..1.0, 16),
            c in 0.1f64..10.0,
        ) {
            let y: Vec<f64> = x.iter().zip(&noise).map(|(a, n)| a + n + 1e-3).collect();
            let p1 = psnr(&y, &x, 2.0).unwrap();
            let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
            let ys: Vec<f64> = y.iter().map(|v| v * c).collect();
            let p2 = psnr(&ys, &xs, 2.0 * c).unwrap();
            prop_assert!((p1 - p2).abs() < 1e-9);
        }
    }
}
