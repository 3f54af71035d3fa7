//! Counterfactual feature attribution: each feature in turn is replaced by
//! its yearly median, the table is rescored and the change in anomaly score
//! decides which feature explains a flagged instant.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDateTime;
use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clv::{window_scores, ModelCheckpoint, ScoreSeries};
use crate::error::{Error, Result};
use crate::preprocess::{window, WindowSet};
use crate::stats;
use crate::table::{format_timestamp, parse_timestamp, TimeTable};
use crate::threshold::ThresholdSeries;

/// Which score changes count as evidence for a feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Counterfactual score above baseline (delta > 0); winner has the largest delta.
    #[default]
    PositiveDelta,
    /// Counterfactual score below baseline; winner has the largest drop.
    NegativeDelta,
    /// Any change; winner has the largest magnitude.
    Absolute,
}

impl Direction {
    fn evidence(self, delta: f64) -> f64 {
        match self {
            Direction::PositiveDelta => delta,
            Direction::NegativeDelta => -delta,
            Direction::Absolute => delta.abs(),
        }
    }
}

/// How membership of the exceedance set is decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Membership {
    /// Directed delta strictly positive, i.e. the counterfactual score
    /// exceeds the baseline (for the positive direction).
    #[default]
    ScoreExceedsBaseline,
    /// Directed delta strictly greater than the baseline score itself.
    DeltaExceedsScore,
}

/// Replacement values used for the counterfactual column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    #[default]
    YearlyMedian,
    /// The column's own values; every delta must come out zero.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionConfig {
    pub direction: Direction,
    pub membership: Membership,
    pub reference: Reference,
    /// Score every timestamp, not only flagged ones.
    pub all_timestamps: bool,
}

/// Replaces column `feature` by its calendar-year median, year by year.
pub fn counterfactual_table(table: &TimeTable, feature: usize) -> Result<TimeTable> {
    if feature >= table.n_features() {
        return Err(Error::IndexOutOfRange {
            index: feature,
            features: table.n_features(),
        });
    }
    let mut out = table.clone();
    let column = table.column(feature);
    let mut replaced = column.clone();
    for (_, rows) in table.year_ranges() {
        let m = stats::median(&column[rows.clone()]);
        replaced[rows].iter_mut().for_each(|v| *v = m);
    }
    out.set_column(feature, &replaced);
    Ok(out)
}

/// Anything that turns a window set into per-window anomaly scores.
pub trait WindowScorer: Sync {
    fn window_length(&self) -> usize;
    fn feature_names(&self) -> &[String];
    fn score_windows(&self, windows: &WindowSet) -> Result<Vec<f64>>;
}

impl WindowScorer for ModelCheckpoint {
    fn window_length(&self) -> usize {
        self.window_length
    }

    fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    fn score_windows(&self, windows: &WindowSet) -> Result<Vec<f64>> {
        window_scores(self, windows)
    }
}

/// Per-timestamp score changes, exceedance sets and winning features.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionSeries {
    pub timestamps: Vec<NaiveDateTime>,
    pub feature_names: Vec<String>,
    /// `delta[t][f]`: counterfactual minus baseline score; NaN where not scored.
    pub delta: Vec<Vec<f64>>,
    pub flagged: Vec<bool>,
    pub exceedance_sets: Vec<Vec<usize>>,
    pub winners: Vec<Option<usize>>,
    /// Counterfactual scoring passes performed (one per feature).
    pub passes: usize,
}

impl AttributionSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn winner_name(&self, t: usize) -> Option<&str> {
        self.winners[t].map(|f| self.feature_names[f].as_str())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["timestamp".to_string(), "winner".to_string()];
        header.extend(self.feature_names.iter().map(|f| format!("delta_{f}")));
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut rec = vec![
                format_timestamp(&self.timestamps[t]),
                self.winner_name(t).unwrap_or("").to_string(),
            ];
            rec.extend(self.delta[t].iter().map(|d| {
                if d.is_nan() {
                    String::new()
                } else {
                    d.to_string()
                }
            }));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))?;
        Ok(())
    }

    /// Reads the CSV form back. Flags, exceedance sets and pass counts are
    /// not stored there: a row counts as flagged when it has a winner.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        if headers.get(0) != Some("timestamp") {
            return Err(Error::MissingColumn("timestamp".into()));
        }
        if headers.get(1) != Some("winner") {
            return Err(Error::MissingColumn("winner".into()));
        }
        let feature_names: Vec<String> = headers
            .iter()
            .skip(2)
            .map(|h| {
                h.strip_prefix("delta_")
                    .map(str::to_string)
                    .ok_or_else(|| Error::UnexpectedColumn(h.to_string()))
            })
            .collect::<Result<_>>()?;
        let mut series = AttributionSeries {
            timestamps: Vec::new(),
            feature_names,
            delta: Vec::new(),
            flagged: Vec::new(),
            exceedance_sets: Vec::new(),
            winners: Vec::new(),
            passes: 0,
        };
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            series.timestamps.push(parse_timestamp(&rec[0]).ok_or_else(|| {
                Error::UnparseableTimestamp {
                    value: rec[0].to_string(),
                    line,
                }
            })?);
            let winner = match &rec[1] {
                "" => None,
                name => Some(
                    series
                        .feature_names
                        .iter()
                        .position(|f| f == name)
                        .ok_or_else(|| Error::UnknownFeatureInRanking(name.to_string()))?,
                ),
            };
            let mut row = Vec::with_capacity(series.feature_names.len());
            for (j, cell) in rec.iter().skip(2).enumerate() {
                row.push(if cell.is_empty() {
                    f64::NAN
                } else {
                    cell.parse().map_err(|_| Error::UnparseableValue {
                        value: cell.to_string(),
                        column: headers[j + 2].to_string(),
                        line,
                    })?
                });
            }
            series.delta.push(row);
            series.flagged.push(winner.is_some());
            series.exceedance_sets.push(winner.into_iter().collect());
            series.winners.push(winner);
        }
        Ok(series)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

/// Exceedance set and winner for one timestamp. Ties go to the lowest index.
pub fn select_winner(
    delta: &[f64],
    baseline: f64,
    direction: Direction,
    membership: Membership,
) -> (Vec<usize>, Option<usize>) {
    let cutoff = match membership {
        Membership::ScoreExceedsBaseline => 0.0,
        Membership::DeltaExceedsScore => baseline,
    };
    let members: Vec<usize> = (0..delta.len())
        .filter(|&f| direction.evidence(delta[f]) > cutoff)
        .collect();
    let mut winner: Option<usize> = None;
    for &f in &members {
        if winner.is_none_or(|w| direction.evidence(delta[f]) > direction.evidence(delta[w])) {
            winner = Some(f);
        }
    }
    (members, winner)
}

/// Runs one counterfactual pass per feature and attributes each flagged
/// timestamp. `baseline` must be the scorer's output on `window(table, T, 1)`
/// and `flags` aligned with it.
pub fn attribute<S: WindowScorer + ?Sized>(
    scorer: &S,
    table: &TimeTable,
    baseline: &ScoreSeries,
    flags: &ThresholdSeries,
    config: &AttributionConfig,
) -> Result<AttributionSeries> {
    if table.feature_names() != scorer.feature_names() {
        return Err(Error::ModelDataMismatch(format!(
            "table features {:?} differ from model features {:?}",
            table.feature_names(),
            scorer.feature_names()
        )));
    }
    let windows = window(table, scorer.window_length(), 1)?;
    if windows.origin_timestamps() != baseline.timestamps.as_slice() {
        return Err(Error::ModelDataMismatch(
            "baseline scores are not aligned with the table's windows".into(),
        ));
    }
    if flags.timestamps != baseline.timestamps {
        return Err(Error::ModelDataMismatch(
            "flags are not aligned with the baseline scores".into(),
        ));
    }
    let n = baseline.len();
    let f = table.n_features();
    let scored: Vec<usize> = if config.all_timestamps {
        (0..n).collect()
    } else {
        (0..n).filter(|&t| flags.flag[t]).collect()
    };
    let per_feature: Vec<Vec<f64>> = (0..f)
        .into_par_iter()
        .map(|i| {
            let cf = match config.reference {
                Reference::YearlyMedian => counterfactual_table(table, i)?,
                Reference::Identity => table.clone(),
            };
            let cf_windows = window(&cf, scorer.window_length(), 1)?.subset(&scored);
            debug!("counterfactual pass for `{}`", table.feature_names()[i]);
            scorer.score_windows(&cf_windows)
        })
        .collect::<Result<_>>()?;

    let mut delta = vec![vec![f64::NAN; f]; n];
    for (j, &t) in scored.iter().enumerate() {
        for i in 0..f {
            delta[t][i] = per_feature[i][j] - baseline.scores[t];
        }
    }
    let mut exceedance_sets = vec![Vec::new(); n];
    let mut winners = vec![None; n];
    for t in 0..n {
        if flags.flag[t] {
            let (members, winner) =
                select_winner(&delta[t], baseline.scores[t], config.direction, config.membership);
            exceedance_sets[t] = members;
            winners[t] = winner;
        }
    }
    Ok(AttributionSeries {
        timestamps: baseline.timestamps.clone(),
        feature_names: table.feature_names().to_vec(),
        delta,
        flagged: flags.flag.clone(),
        exceedance_sets,
        winners,
        passes: f,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub feature: String,
    pub count: usize,
    pub frequency: f64,
}

/// Features by descending winner count, ties by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankedFeatures {
    pub entries: Vec<RankedFeature>,
}

impl RankedFeatures {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.feature.clone()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Frequency = count / n_grids, sorted descending with ties by name.
pub fn rank_counts(counts: &BTreeMap<String, usize>, n_grids: usize) -> Result<RankedFeatures> {
    if n_grids == 0 {
        return Err(Error::InvalidConfig("n_grids must be at least 1".into()));
    }
    let mut entries: Vec<RankedFeature> = counts
        .iter()
        .map(|(name, &count)| RankedFeature {
            feature: name.clone(),
            count,
            frequency: count as f64 / n_grids as f64,
        })
        .collect();
    entries.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.feature.cmp(&b.feature)));
    Ok(RankedFeatures { entries })
}

/// Counts winners over all series (one per grid, or pooled). Every feature
/// appears, including those that never win.
pub fn rank_features(series: &[AttributionSeries], n_grids: usize) -> Result<RankedFeatures> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in series {
        for name in &s.feature_names {
            counts.entry(name.clone()).or_insert(0);
        }
        for t in 0..s.len() {
            if let Some(name) = s.winner_name(t) {
                *counts.get_mut(name).expect("winner is a known feature") += 1;
            }
        }
    }
    rank_counts(&counts, n_grids)
}

pub fn topk(ranked: &RankedFeatures, k: usize) -> Result<RankedFeatures> {
    if k == 0 || k > ranked.len() {
        return Err(Error::KOutOfRange {
            k,
            min: 1,
            max: ranked.len(),
        });
    }
    Ok(RankedFeatures {
        entries: ranked.entries[..k].to_vec(),
    })
}
