//! Peaks-Over-Threshold anomaly thresholds with a half-overlapping sliding
//! window.

use std::fs;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::NaiveDateTime;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clv::ScoreSeries;
use crate::error::{Error, Result};
use crate::stats;
use crate::table::{format_timestamp, parse_timestamp};

/// Fewer exceedances than this make the tail fit fall back to an empirical quantile.
pub const MIN_EXCEEDANCES: usize = 5;
pub const MIN_POT_SAMPLES: usize = 30;
pub const MIN_WINDOW: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdConfig {
    pub window: usize,
    pub init_quantile: f64,
    pub risk_q: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            window: 62,
            init_quantile: 0.98,
            risk_q: 0.01,
        }
    }
}

/// Generalised Pareto tail fit above the initial threshold `u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdFit {
    pub shape: f64,
    pub scale: f64,
    pub init_threshold: f64,
    pub n_exceedances: usize,
    /// True when too few (or degenerate) exceedances forced the empirical fallback.
    pub degraded: bool,
}

/// Method-of-moments GPD estimate `(ξ, σ)` from positive excesses. Uses the
/// sample variance. `None` when fewer than two excesses or zero spread.
pub fn fit_gpd_moments(excesses: &[f64]) -> Option<(f64, f64)> {
    if excesses.len() < 2 {
        return None;
    }
    let m = stats::mean(excesses);
    let v = stats::sample_variance(excesses);
    if !(v > 0.0) || !(m > 0.0) {
        return None;
    }
    let ratio = m * m / v;
    Some((0.5 * (1.0 - ratio), 0.5 * m * (ratio + 1.0)))
}

/// `u + (σ/ξ)((q·n/N_u)^(−ξ) − 1)`, with the `ξ → 0` limit `u − σ ln(q·n/N_u)`.
pub fn gpd_quantile(u: f64, shape: f64, scale: f64, risk_q: f64, n: usize, n_exceed: usize) -> f64 {
    let r = risk_q * n as f64 / n_exceed as f64;
    if shape.abs() < 1e-9 {
        u - scale * r.ln()
    } else {
        u + scale / shape * (r.powf(-shape) - 1.0)
    }
}

fn check_levels(init_quantile: f64, risk_q: f64) -> Result<()> {
    if !(init_quantile > 0.8 && init_quantile < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "init_quantile {init_quantile} outside (0.8, 1)"
        )));
    }
    if !(risk_q > 0.0 && risk_q < 0.1) {
        return Err(Error::InvalidConfig(format!("risk_q {risk_q} outside (0, 0.1)")));
    }
    Ok(())
}

/// Fits a GPD to the exceedances over the empirical `init_quantile` and
/// returns it with the threshold exceeded with probability `risk_q`.
pub fn fit_pot(scores: &[f64], init_quantile: f64, risk_q: f64) -> Result<(GpdFit, f64)> {
    check_levels(init_quantile, risk_q)?;
    if scores.len() < MIN_POT_SAMPLES {
        return Err(Error::TooFewRows {
            needed: MIN_POT_SAMPLES,
            got: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidConfig("scores must be finite".into()));
    }
    let sorted = stats::sorted(scores);
    let u = stats::quantile_sorted(&sorted, init_quantile);
    let excesses: Vec<f64> = sorted.iter().filter(|&&x| x > u).map(|x| x - u).collect();
    let n_exceed = excesses.len();
    let moments = if n_exceed >= MIN_EXCEEDANCES {
        fit_gpd_moments(&excesses)
    } else {
        None
    };
    match moments {
        Some((shape, scale)) => {
            let z = gpd_quantile(u, shape, scale, risk_q, scores.len(), n_exceed);
            let fit = GpdFit {
                shape,
                scale,
                init_threshold: u,
                n_exceedances: n_exceed,
                degraded: false,
            };
            Ok((fit, z))
        }
        None => {
            let fit = GpdFit {
                shape: 0.0,
                scale: if n_exceed > 0 { stats::mean(&excesses) } else { f64::EPSILON },
                init_threshold: u,
                n_exceedances: n_exceed,
                degraded: true,
            };
            Ok((fit, stats::quantile_sorted(&sorted, 1.0 - risk_q)))
        }
    }
}

/// One sliding-window fit: scores in `fit` set the threshold for `governs`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub fit: Range<usize>,
    pub governs: Range<usize>,
}

/// Segments start every `window / 2` steps while a full window fits; the
/// last one absorbs any trailing remainder. Segment 0 governs its whole span,
/// later segments the part beyond their predecessor's end.
pub fn segment_plan(len: usize, window: usize) -> Result<Vec<Segment>> {
    if window < MIN_WINDOW {
        return Err(Error::InvalidConfig(format!(
            "threshold window {window} is below the minimum of {MIN_WINDOW}"
        )));
    }
    plan(len, window)
}

fn plan(len: usize, window: usize) -> Result<Vec<Segment>> {
    if window == 0 || window > len {
        return Err(Error::WindowTooLarge { window, len });
    }
    let half = (window / 2).max(1);
    let starts: Vec<usize> = (0..).map(|j| j * half).take_while(|s| s + window <= len).collect();
    let mut segments = Vec::with_capacity(starts.len());
    let mut covered = 0;
    for (j, &s) in starts.iter().enumerate() {
        let end = if j + 1 == starts.len() { len } else { s + window };
        segments.push(Segment {
            fit: s..end,
            governs: covered..end,
        });
        covered = end;
    }
    Ok(segments)
}

/// Per-timestamp thresholds and strict-exceedance flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSeries {
    pub timestamps: Vec<NaiveDateTime>,
    pub scores: Vec<f64>,
    pub threshold: Vec<f64>,
    pub flag: Vec<bool>,
}

impl ThresholdSeries {
    pub fn len(&self) -> usize {
        self.threshold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.threshold.is_empty()
    }

    pub fn n_flagged(&self) -> usize {
        self.flag.iter().filter(|f| **f).count()
    }

    pub fn flagged_timestamps(&self) -> Vec<NaiveDateTime> {
        self.timestamps
            .iter()
            .zip(&self.flag)
            .filter(|(_, f)| **f)
            .map(|(t, _)| *t)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["timestamp", "score", "threshold", "flag"])?;
        for i in 0..self.len() {
            w.write_record([
                format_timestamp(&self.timestamps[i]),
                self.scores[i].to_string(),
                self.threshold[i].to_string(),
                u8::from(self.flag[i]).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        let cols = ["timestamp", "score", "threshold", "flag"]
            .iter()
            .map(|name| {
                headers
                    .iter()
                    .position(|h| h == *name)
                    .ok_or_else(|| Error::MissingColumn(name.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = ThresholdSeries {
            timestamps: Vec::new(),
            scores: Vec::new(),
            threshold: Vec::new(),
            flag: Vec::new(),
        };
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let raw = &rec[cols[0]];
            out.timestamps.push(parse_timestamp(raw).ok_or_else(|| Error::UnparseableTimestamp {
                value: raw.to_string(),
                line,
            })?);
            let number = |c: usize, name: &str| -> Result<f64> {
                rec[c].trim().parse().map_err(|_| Error::UnparseableValue {
                    value: rec[c].to_string(),
                    column: name.into(),
                    line,
                })
            };
            out.scores.push(number(cols[1], "score")?);
            out.threshold.push(number(cols[2], "threshold")?);
            out.flag.push(match rec[cols[3]].trim() {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::UnparseableValue {
                        value: other.to_string(),
                        column: "flag".into(),
                        line,
                    })
                }
            });
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f))
    }

    pub fn score_series(&self) -> Result<ScoreSeries> {
        ScoreSeries::new(self.timestamps.clone(), self.scores.clone())
    }
}

/// Flags `score > threshold` (strictly).
pub fn flag_anomalies(scores: &ScoreSeries, thresholds: &ThresholdSeries) -> Result<ThresholdSeries> {
    if scores.len() != thresholds.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: thresholds.len(),
        });
    }
    Ok(ThresholdSeries {
        timestamps: scores.timestamps.clone(),
        scores: scores.scores.clone(),
        flag: scores
            .scores
            .iter()
            .zip(&thresholds.threshold)
            .map(|(s, t)| s > t)
            .collect(),
        threshold: thresholds.threshold.clone(),
    })
}

/// Sliding-window POT thresholds over a score series, flags filled in.
pub fn dynamic_threshold(scores: &ScoreSeries, config: &ThresholdConfig) -> Result<ThresholdSeries> {
    check_levels(config.init_quantile, config.risk_q)?;
    let segments = segment_plan(scores.len(), config.window)?;
    let fits: Vec<f64> = segments
        .par_iter()
        .map(|s| fit_pot(&scores.scores[s.fit.clone()], config.init_quantile, config.risk_q).map(|f| f.1))
        .collect::<Result<_>>()?;
    let mut threshold = vec![f64::NAN; scores.len()];
    for (s, z) in segments.iter().zip(fits) {
        threshold[s.governs.clone()].iter_mut().for_each(|t| *t = z);
    }
    let unflagged = ThresholdSeries {
        timestamps: scores.timestamps.clone(),
        scores: scores.scores.clone(),
        flag: vec![false; scores.len()],
        threshold,
    };
    flag_anomalies(scores, &unflagged)
}
