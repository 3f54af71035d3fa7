//! Ingest-side transforms: temporal aggregation, derived climate features,
//! z-scoring, yearly IQR outlier replacement and rolling windows.

use std::collections::BTreeMap;

use chrono::{Datelike, Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::table::TimeTable;

/// Where aggregation blocks are forced to restart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlockBoundary {
    /// Restart at every calendar year and at every gap in the daily sequence
    /// (e.g. between retained month-runs after a month filter).
    #[default]
    Run,
    /// Restart only at calendar years; blocks may straddle gaps.
    Year,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregateOptions {
    pub period_days: usize,
    pub drop_leap: bool,
    pub boundary: BlockBoundary,
}

fn is_leap_day(ts: &NaiveDateTime) -> bool {
    ts.month() == 2 && ts.day() == 29
}

/// Averages consecutive blocks of `period_days` daily rows, restarting
/// blocks at year boundaries and at gaps in the daily sequence.
pub fn aggregate_time(table: &TimeTable, period_days: usize, drop_leap: bool) -> Result<TimeTable> {
    aggregate_time_with(
        table,
        &AggregateOptions {
            period_days,
            drop_leap,
            boundary: BlockBoundary::Run,
        },
    )
}

pub fn aggregate_time_with(table: &TimeTable, opts: &AggregateOptions) -> Result<TimeTable> {
    if opts.period_days == 0 {
        return Err(Error::InvalidConfig("period_days must be >= 1".into()));
    }
    let source = if opts.drop_leap {
        table.filter_rows(|ts| !is_leap_day(ts))
    } else {
        table.clone()
    };
    let f = source.n_features();
    let ts = source.timestamps();

    // Split into segments inside which blocks are laid end to end.
    let mut segments: Vec<std::ops::Range<usize>> = Vec::new();
    for r in 0..ts.len() {
        let restart = r == 0
            || ts[r].year() != ts[r - 1].year()
            || (opts.boundary == BlockBoundary::Run && !contiguous(&ts[r - 1], &ts[r], opts.drop_leap));
        if restart {
            segments.push(r..r + 1);
        } else {
            segments.last_mut().unwrap().end = r + 1;
        }
    }

    let mut out_ts = Vec::new();
    let mut out_values = Vec::new();
    let period = opts.period_days;
    for seg in segments {
        let full_blocks = seg.len() / period;
        for b in 0..full_blocks {
            let start = seg.start + b * period;
            out_ts.push(ts[start]);
            for c in 0..f {
                let sum: f64 = (start..start + period).map(|r| source.get(r, c)).sum();
                out_values.push(sum / period as f64);
            }
        }
    }
    if out_ts.is_empty() {
        return Err(Error::EmptyAfterAggregation);
    }
    source.with_rows(out_ts, out_values)
}

fn contiguous(prev: &NaiveDateTime, next: &NaiveDateTime, drop_leap: bool) -> bool {
    let step = *next - *prev;
    if step == Duration::days(1) {
        return true;
    }
    // Feb 28 -> Mar 1 across a removed leap day.
    drop_leap
        && step == Duration::days(2)
        && prev.month() == 2
        && prev.day() == 28
        && chrono::NaiveDate::from_ymd_opt(prev.year(), 2, 29).is_some()
}

/// Keeps rows whose calendar month is in `months` (1 = January).
pub fn filter_months(table: &TimeTable, months: &[u32]) -> TimeTable {
    table.filter_rows(|ts| months.contains(&ts.month()))
}

pub const TW10: &str = "tw10";
pub const SSRDAS: &str = "ssrdas";

/// Appends `tw10 = sqrt(u10² + v10²)` and `ssrdas = ssrd * (1 - asn)`.
pub fn derive_features(table: &TimeTable) -> Result<TimeTable> {
    let u10 = table.feature_index("u10")?;
    let v10 = table.feature_index("v10")?;
    let ssrd = table.feature_index("ssrd")?;
    let asn = table.feature_index("asn")?;

    let mut tw10 = Vec::with_capacity(table.n_rows());
    let mut ssrdas = Vec::with_capacity(table.n_rows());
    for r in 0..table.n_rows() {
        let (u, v) = (table.get(r, u10), table.get(r, v10));
        tw10.push(u.hypot(v));
        let albedo = table.get(r, asn);
        if !(0.0..=1.0).contains(&albedo) {
            return Err(Error::AlbedoOutOfRange { value: albedo, row: r });
        }
        ssrdas.push(table.get(r, ssrd) * (1.0 - albedo));
    }
    let mut out = table.clone();
    let wind_unit = out.units()[u10].clone();
    let rad_unit = out.units()[ssrd].clone();
    out.push_column(TW10, &wind_unit, &tw10)?;
    out.push_column(SSRDAS, &rad_unit, &ssrdas)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: f64,
    pub std: f64,
    pub degenerate: bool,
}

/// Per-feature z-score parameters, keyed by feature name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormStats {
    pub features: BTreeMap<String, FeatureNorm>,
}

impl NormStats {
    pub fn get(&self, name: &str) -> Option<&FeatureNorm> {
        self.features.get(name)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn is_degenerate(mean: f64, std: f64) -> bool {
    std <= 1e-12 * mean.abs().max(1.0)
}

/// Standardises every column with the given statistics, or with statistics
/// fitted on `table` (population std) when none are supplied.
pub fn zscore(table: &TimeTable, fitted: Option<&NormStats>) -> Result<(TimeTable, NormStats)> {
    let stats = match fitted {
        Some(s) => {
            let mut sub = NormStats::default();
            for name in table.feature_names() {
                let norm = s.get(name).ok_or_else(|| Error::MissingColumn(name.clone()))?;
                sub.features.insert(name.clone(), *norm);
            }
            sub
        }
        None => {
            if table.n_rows() < 2 {
                return Err(Error::TooFewRows {
                    needed: 2,
                    got: table.n_rows(),
                });
            }
            let mut s = NormStats::default();
            for (c, name) in table.feature_names().iter().enumerate() {
                let col = table.column(c);
                let mean = stats::mean(&col);
                let std = stats::population_variance(&col).sqrt();
                s.features.insert(
                    name.clone(),
                    FeatureNorm {
                        mean,
                        std,
                        degenerate: is_degenerate(mean, std),
                    },
                );
            }
            s
        }
    };

    let norms: Vec<FeatureNorm> = table
        .feature_names()
        .iter()
        .map(|n| stats.features[n])
        .collect();
    let mut out = table.clone();
    let f = table.n_features();
    for (i, v) in out.values_mut().iter_mut().enumerate() {
        let norm = &norms[i % f];
        *v = if norm.degenerate {
            0.0
        } else {
            (*v - norm.mean) / norm.std
        };
    }
    Ok((out, stats))
}

const IQR_MAX_PASSES: usize = 64;

/// Replaces, per feature and calendar year, values strictly outside the
/// inclusive Tukey fences `[Q1 - 1.5 IQR, Q3 + 1.5 IQR]` with the mean of that
/// year's inliers. The rule is reapplied until no value lies outside its
/// year's fences, so the result is a fixed point of the rule.
pub fn iqr_clean(table: &TimeTable) -> Result<TimeTable> {
    let mut out = table.clone();
    for (year, range) in table.year_ranges() {
        if range.len() < 4 {
            return Err(Error::TooFewRows {
                needed: 4,
                got: range.len(),
            });
        }
        for c in 0..table.n_features() {
            let mut values: Vec<f64> = range.clone().map(|r| table.get(r, c)).collect();
            for _ in 0..IQR_MAX_PASSES {
                match replace_outliers_once(&mut values) {
                    Some(0) => break,
                    Some(_) => {}
                    None => {
                        return Err(Error::AllOutliers {
                            feature: table.feature_names()[c].clone(),
                            year,
                        })
                    }
                }
            }
            for (r, v) in range.clone().zip(values) {
                out.set(r, c, v);
            }
        }
    }
    Ok(out)
}

/// One pass of the fence rule; returns the number of replaced values, or
/// `None` when no inlier exists.
fn replace_outliers_once(values: &mut [f64]) -> Option<usize> {
    let (lo, hi) = iqr_fences(values);
    let inliers: Vec<f64> = values.iter().copied().filter(|v| *v >= lo && *v <= hi).collect();
    if inliers.is_empty() {
        return None;
    }
    let outliers = values.len() - inliers.len();
    if outliers == 0 {
        return Some(0);
    }
    let min = inliers.iter().copied().fold(f64::INFINITY, f64::min);
    let max = inliers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Clamped: a mean of equal values can land one ulp outside them.
    let fill = stats::mean(&inliers).clamp(min, max);
    for v in values.iter_mut() {
        if *v < lo || *v > hi {
            *v = fill;
        }
    }
    Some(outliers)
}

/// Inclusive Tukey fences with linearly interpolated quartiles.
pub fn iqr_fences(values: &[f64]) -> (f64, f64) {
    let sorted = stats::sorted(values);
    let q1 = stats::quantile_sorted(&sorted, 0.25);
    let q3 = stats::quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    (q1 - 1.5 * iqr, q3 + 1.5 * iqr)
}

/// Rolling windows over a table: `n_windows × length × n_features`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    data: Vec<f64>,
    length: usize,
    n_features: usize,
    stride: usize,
    origin_index: Vec<usize>,
    origin_timestamps: Vec<NaiveDateTime>,
    feature_names: Vec<String>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.origin_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin_index.is_empty()
    }

    /// Window length T.
    pub fn length(&self) -> usize {
        self.length
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Row-major `length × n_features` slice of window `w`.
    pub fn window(&self, w: usize) -> &[f64] {
        let size = self.length * self.n_features;
        &self.data[w * size..(w + 1) * size]
    }

    /// Source-table row of each window's last timestep.
    pub fn origin_index(&self) -> &[usize] {
        &self.origin_index
    }

    /// Timestamp of each window's last timestep.
    pub fn origin_timestamps(&self) -> &[NaiveDateTime] {
        &self.origin_timestamps
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Subset of windows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> WindowSet {
        let size = self.length * self.n_features;
        let mut data = Vec::with_capacity(indices.len() * size);
        for &w in indices {
            data.extend_from_slice(self.window(w));
        }
        WindowSet {
            data,
            origin_index: indices.iter().map(|&w| self.origin_index[w]).collect(),
            origin_timestamps: indices.iter().map(|&w| self.origin_timestamps[w]).collect(),
            feature_names: self.feature_names.clone(),
            ..*self
        }
    }

    /// Stacks window sets from several grids for pooled training. Origins
    /// keep referring to each part's own table.
    pub fn concat(parts: &[WindowSet]) -> Result<WindowSet> {
        let first = parts.first().ok_or(Error::EmptyInput)?;
        let mut out = WindowSet {
            data: Vec::new(),
            origin_index: Vec::new(),
            origin_timestamps: Vec::new(),
            feature_names: first.feature_names.clone(),
            ..*first
        };
        for p in parts {
            if p.length != first.length || p.feature_names != first.feature_names {
                return Err(Error::ShapeMismatch(
                    "pooled window sets differ in length or features".into(),
                ));
            }
            out.data.extend_from_slice(&p.data);
            out.origin_index.extend_from_slice(&p.origin_index);
            out.origin_timestamps.extend_from_slice(&p.origin_timestamps);
        }
        Ok(out)
    }
}

/// Overlapping windows of `length` rows advancing by `stride` rows.
pub fn window(table: &TimeTable, length: usize, stride: usize) -> Result<WindowSet> {
    if length == 0 || stride == 0 {
        return Err(Error::InvalidConfig("window length and stride must be >= 1".into()));
    }
    let m = table.n_rows();
    if m < length {
        return Err(Error::SeriesTooShort { len: m, window: length });
    }
    let f = table.n_features();
    let starts: Vec<usize> = (0..=m - length).step_by(stride).collect();
    let mut data = Vec::with_capacity(starts.len() * length * f);
    for &s in &starts {
        data.extend_from_slice(&table.values()[s * f..(s + length) * f]);
    }
    let origin_index: Vec<usize> = starts.iter().map(|s| s + length - 1).collect();
    let origin_timestamps = origin_index.iter().map(|&r| table.timestamps()[r]).collect();
    Ok(WindowSet {
        data,
        length,
        n_features: f,
        stride,
        origin_index,
        origin_timestamps,
        feature_names: table.feature_names().to_vec(),
    })
}
