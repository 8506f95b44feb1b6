//! CSV and JSON output.
//!
//! Matrices are written row-major. Every CSV has a header row and one row
//! per time sample, with time in the first column.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::Result;
use crate::manifold::{ExtendedPose, ImuStream};
use crate::observer::ObserverLogRow;
use crate::preint::PreintegralSegment;

pub fn row_major(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

pub fn fmt(x: f64) -> String {
    format!("{x:.17e}")
}

/// Columns `t, {prefix}0, {prefix}1, ...`.
pub fn write_series_csv(path: &Path, prefix: &str, times: &[f64], values: &[DVector<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n = values.first().map_or(0, |v| v.len());
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("{prefix}{i}")));
    w.write_record(&header)?;
    for (t, v) in times.iter().zip(values) {
        let mut row = vec![fmt(*t)];
        row.extend(v.iter().map(|x| fmt(*x)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `t, r00..r22, vx, vy, vz, px, py, pz`.
pub fn write_pose_csv(path: &Path, times: &[f64], poses: &[ExtendedPose]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    for i in 0..3 {
        for j in 0..3 {
            header.push(format!("r{i}{j}"));
        }
    }
    for s in ["vx", "vy", "vz", "px", "py", "pz"] {
        header.push(s.to_string());
    }
    w.write_record(&header)?;
    for (t, x) in times.iter().zip(poses) {
        let mut row = vec![fmt(*t)];
        row.extend(x.r.row_major().iter().map(|v| fmt(*v)));
        row.extend(x.v.iter().chain(x.p.iter()).map(|v| fmt(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `t, wx, wy, wz, ax, ay, az` at every fine grid point.
pub fn write_imu_csv(path: &Path, imu: &ImuStream) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "wx", "wy", "wz", "ax", "ay", "az"])?;
    let grid = imu.grid();
    for i in 0..grid.len() {
        let (om, a) = imu.at_grid(i);
        let mut row = vec![fmt(grid.time(i))];
        row.extend(om.iter().chain(a.iter()).map(|v| fmt(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_observer_log(path: &Path, log: &[ObserverLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "innovation_norm", "error_norm", "trace_p"])?;
    for r in log {
        let e = r.error_norm.map(fmt).unwrap_or_default();
        w.write_record([fmt(r.t), fmt(r.innovation_norm), e, fmt(r.trace_p)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct SegmentRecord {
    pub k: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub f: Vec<Vec<f64>>,
    pub v: Vec<f64>,
}

impl From<&PreintegralSegment> for SegmentRecord {
    fn from(s: &PreintegralSegment) -> Self {
        Self { k: s.k, t_start: s.t_start, t_end: s.t_end, f: row_major(&s.f), v: s.v.iter().copied().collect() }
    }
}

pub fn write_segments_json(path: &Path, segments: &[PreintegralSegment]) -> Result<()> {
    let records: Vec<SegmentRecord> = segments.iter().map(SegmentRecord::from).collect();
    write_json(path, &records)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}
