use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use chrono::Datelike;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::threshold::ThresholdSeries;

/// First year of the decade holding `year`, with decades running x1–(x+1)0.
pub fn decade_start(year: i32) -> i32 {
    (year - 1).div_euclid(10) * 10 + 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecadalRow {
    pub decade_start: i32,
    pub month: u32,
    pub mean_count_per_grid: f64,
}

impl DecadalRow {
    pub fn decade_label(&self) -> String {
        format!("{}-{}", self.decade_start, self.decade_start + 9)
    }

    pub fn write_csv<W: Write>(rows: &[DecadalRow], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["decade", "month", "mean_count_per_grid"])?;
        for r in rows {
            w.write_record([r.decade_label(), r.month.to_string(), r.mean_count_per_grid.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))?;
        Ok(())
    }
}

/// Flag counts per (decade, month) averaged over grids. Every (decade,
/// month) that any grid observes gets a row; months outside `months` are
/// ignored (an empty `months` keeps all).
pub fn decadal_counts(grids: &[(String, ThresholdSeries)], months: &[u32]) -> Result<Vec<DecadalRow>> {
    if grids.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n_grids = grids.iter().map(|(g, _)| g).collect::<BTreeSet<_>>().len();
    let mut totals: BTreeMap<(i32, u32), usize> = BTreeMap::new();
    for (_, series) in grids {
        for (ts, flag) in series.timestamps.iter().zip(&series.flag) {
            if !months.is_empty() && !months.contains(&ts.month()) {
                continue;
            }
            *totals.entry((decade_start(ts.year()), ts.month())).or_insert(0) += usize::from(*flag);
        }
    }
    Ok(totals
        .into_iter()
        .map(|((decade_start, month), count)| DecadalRow {
            decade_start,
            month,
            mean_count_per_grid: count as f64 / n_grids as f64,
        })
        .collect())
}

/// One observation per (grid, month): the number of flags in that calendar
/// month summed over `years` (inclusive). These are the samples compared by
/// the t-test between periods.
pub fn period_counts(
    grids: &[(String, ThresholdSeries)],
    months: &[u32],
    years: std::ops::RangeInclusive<i32>,
) -> Result<Vec<f64>> {
    if grids.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut counts: BTreeMap<(&str, u32), usize> = BTreeMap::new();
    for (grid, series) in grids {
        for (ts, flag) in series.timestamps.iter().zip(&series.flag) {
            if !years.contains(&ts.year()) || (!months.is_empty() && !months.contains(&ts.month())) {
                continue;
            }
            *counts.entry((grid.as_str(), ts.month())).or_insert(0) += usize::from(*flag);
        }
    }
    Ok(counts.into_values().map(|c| c as f64).collect())
}
