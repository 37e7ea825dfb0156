//! Loading empirical records from delimited text and regularizing them onto
//! a uniform grid.
//!
//! Rows with a missing or unparseable value, or a missing time, are dropped
//! and counted. A time cell that is present but not numeric is an error.
//! Duplicate timestamps are collapsed to the mean of their values. The
//! series is always ordered forward in physical time; for an age axis
//! (time before present) that means descending timestamps.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::interpolate;

pub const DEFAULT_TARGET_LEN: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Timestamps grow with physical time.
    TimeForward,
    /// Timestamps are ages: they shrink as physical time advances.
    TimeReversed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeAxis {
    /// Age axis if the column name mentions an age unit (`age`, `bp`, `kyr`,
    /// `ka`) or the file lists times in descending order.
    Auto,
    Forward,
    Age,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadOptions {
    pub delimiter: u8,
    pub time_axis: TimeAxis,
    /// Defaults to the file name.
    pub source_label: Option<String>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            delimiter: b',',
            time_axis: TimeAxis::Auto,
            source_label: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalSeries {
    pub timestamps: Vec<f64>,
    pub values: Vec<f64>,
    pub source_label: String,
    pub direction: Direction,
    pub dropped_rows: usize,
    /// Rows folded into an earlier row with the same timestamp.
    pub merged_rows: usize,
}

impl EmpiricalSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn parse_cell(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn looks_like_age(name: &str) -> bool {
    let lower = name.to_ascii_lowercase();
    lower
        .split(|c: char| !c.is_ascii_alphanumeric())
        .any(|tok| matches!(tok, "age" | "bp" | "kyr" | "ka" | "kyrbp" | "yrbp"))
}

pub fn load_csv(
    path: &Path,
    time_col: &str,
    value_col: &str,
    options: &LoadOptions,
) -> Result<EmpiricalSeries> {
    let file = std::fs::File::open(path)?;
    let mut options = options.clone();
    if options.source_label.is_none() {
        options.source_label = path.file_name().map(|n| n.to_string_lossy().into_owned());
    }
    parse_csv(file, time_col, value_col, &options)
}

pub fn parse_csv<R: Read>(
    reader: R,
    time_col: &str,
    value_col: &str,
    options: &LoadOptions,
) -> Result<EmpiricalSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (ti, vi) = (column(time_col)?, column(value_col)?);
    let mut rows = Vec::new();
    let mut dropped = 0;
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        let t_cell = record.get(ti).unwrap_or("");
        let v_cell = record.get(vi).unwrap_or("");
        if t_cell.is_empty() {
            dropped += 1;
            continue;
        }
        let t = parse_cell(t_cell).ok_or_else(|| Error::NonNumericTime {
            row: k + 1,
            value: t_cell.to_string(),
        })?;
        match parse_cell(v_cell) {
            Some(v) => rows.push((t, v)),
            None => dropped += 1,
        }
    }
    if rows.len() < 2 {
        return Err(Error::TooFewRows(rows.len()));
    }
    let age = match options.time_axis {
        TimeAxis::Forward => false,
        TimeAxis::Age => true,
        TimeAxis::Auto => looks_like_age(time_col) || rows[0].0 > rows[rows.len() - 1].0,
    };
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut timestamps: Vec<f64> = Vec::with_capacity(rows.len());
    let mut values: Vec<f64> = Vec::with_capacity(rows.len());
    let mut merged = 0;
    let mut i = 0;
    while i < rows.len() {
        let t = rows[i].0;
        let mut sum = 0.0;
        let mut n = 0;
        while i < rows.len() && rows[i].0 == t {
            sum += rows[i].1;
            n += 1;
            i += 1;
        }
        merged += n - 1;
        timestamps.push(t);
        values.push(sum / n as f64);
    }
    if timestamps.len() < 2 {
        return Err(Error::TooFewRows(timestamps.len()));
    }
    if age {
        timestamps.reverse();
        values.reverse();
    }
    Ok(EmpiricalSeries {
        timestamps,
        values,
        source_label: options
            .source_label
            .clone()
            .unwrap_or_else(|| "input".into()),
        direction: if age {
            Direction::TimeReversed
        } else {
            Direction::TimeForward
        },
        dropped_rows: dropped,
        merged_rows: merged,
    })
}

/// Piecewise-linear interpolant sampled at `target_len` equally spaced
/// times from the first to the last timestamp.
pub fn regularize(series: &EmpiricalSeries, target_len: usize) -> Result<Vec<f64>> {
    let t = &series.timestamps;
    let v = &series.values;
    if t.len() < 2 || t.len() != v.len() {
        return Err(Error::TooFewRows(t.len().min(v.len())));
    }
    if target_len < 2 {
        return Err(Error::InvalidArgument(format!(
            "target length must be >= 2, got {target_len}"
        )));
    }
    // Work on a forward (increasing) axis.
    let sign = if t[t.len() - 1] > t[0] { 1.0 } else { -1.0 };
    let axis: Vec<f64> = t.iter().map(|x| sign * x).collect();
    let (t0, t1) = (axis[0], axis[axis.len() - 1]);
    let last = axis.len() - 1;
    let mut out = Vec::with_capacity(target_len);
    let mut seg = 0;
    for j in 0..target_len {
        if j == target_len - 1 {
            out.push(v[last]);
            break;
        }
        let u = j as f64 / (target_len - 1) as f64;
        let tj = t0 + (t1 - t0) * u;
        while seg + 1 < last && axis[seg + 1] <= tj {
            seg += 1;
        }
        let frac = (tj - axis[seg]) / (axis[seg + 1] - axis[seg]);
        out.push(interpolate(v[seg], v[seg + 1], frac));
    }
    Ok(out)
}
