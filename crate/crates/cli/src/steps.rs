//! Pipeline stages shared by the individual subcommands and `pipeline`, so
//! both paths produce the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anomattr::attribution::{attribute, AttributionConfig, AttributionSeries};
use anomattr::clustering::{
    correlation_matrix, kmeans_features, select_k, silhouette, ClusterAssignment, CorrelationMatrix,
};
use anomattr::clv::{build_model, score_series, train, ModelCheckpoint, ScoreSeries, TrainHistory};
use anomattr::preprocess::{
    aggregate_time, derive_features, filter_months, iqr_clean, window, zscore, NormStats, WindowSet,
};
use anomattr::table::{load_grids, save_grids};
use anomattr::threshold::{dynamic_threshold, ThresholdConfig, ThresholdSeries};
use anomattr::{Error, TimeTable};

use crate::config::{ClusterConfig, ModelConfig, PreprocessConfig};
use crate::CliError;

/// Key used for tables without a grid id.
pub const NO_GRID: &str = "";

pub fn grid_key(table: &TimeTable) -> String {
    table.grid_id().unwrap_or(NO_GRID).to_string()
}

pub fn load_one(path: &Path, features: &[String], grid: Option<&str>) -> Result<TimeTable, CliError> {
    let grids = load_grids(path, features)?;
    match grid {
        Some(id) => grids
            .into_iter()
            .find(|t| t.grid_id() == Some(id))
            .ok_or_else(|| CliError::Usage(format!("grid `{id}` not found in {}", path.display()))),
        None if grids.len() == 1 => Ok(grids.into_iter().next().unwrap()),
        None => Err(Error::MultipleGrids(grids.len()).into()),
    }
}

pub fn save_tables(tables: &[TimeTable], path: &Path) -> Result<(), CliError> {
    match tables {
        [one] if one.grid_id().is_none() => one.save(path)?,
        _ => save_grids(tables, path)?,
    }
    Ok(())
}

pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

/// Month filter, aggregation, derived features, outlier cleaning, z-score.
pub fn preprocess(table: &TimeTable, cfg: &PreprocessConfig) -> Result<(TimeTable, NormStats), CliError> {
    let mut t = if cfg.months.is_empty() {
        table.clone()
    } else {
        filter_months(table, &cfg.months)
    };
    if let Some(days) = cfg.period_days {
        t = aggregate_time(&t, days, cfg.drop_leap)?;
    }
    if cfg.derive {
        t = derive_features(&t)?;
    }
    if cfg.iqr_clean {
        t = iqr_clean(&t)?;
    }
    Ok(zscore(&t, None)?)
}

pub fn preprocess_all(
    tables: &[TimeTable],
    cfg: &PreprocessConfig,
) -> Result<(Vec<TimeTable>, BTreeMap<String, NormStats>), CliError> {
    let mut out = Vec::with_capacity(tables.len());
    let mut norms = BTreeMap::new();
    for t in tables {
        let (clean, norm) = preprocess(t, cfg)?;
        norms.insert(grid_key(t), norm);
        out.push(clean);
    }
    Ok((out, norms))
}

/// Feature clustering on one grid, or on the element-wise mean correlation
/// of several grids.
pub fn cluster(tables: &[TimeTable], cfg: &ClusterConfig, seed: u64) -> Result<ClusterAssignment, CliError> {
    let corr = mean_correlation(tables)?;
    let n = corr.len();
    let mut chosen = match cfg.k {
        Some(k) => kmeans_features(&corr, k, seed)?,
        None => {
            let k_max = cfg.k_max.min(n);
            if cfg.k_min >= k_max {
                kmeans_features(&corr, cfg.k_min.min(n), seed)?
            } else {
                select_k(&corr, cfg.k_min, k_max, seed)?
            }
        }
    };
    if chosen.k >= 2 && chosen.silhouette.is_none() {
        chosen.silhouette = Some(silhouette(&corr, &chosen)?);
    }
    Ok(chosen)
}

fn mean_correlation(tables: &[TimeTable]) -> Result<CorrelationMatrix, CliError> {
    let first = tables.first().ok_or(Error::EmptyInput)?;
    let mats = tables.iter().map(correlation_matrix).collect::<Result<Vec<_>, _>>()?;
    let n = first.n_features();
    let mut values = vec![0.0; n * n];
    for m in &mats {
        if m.names() != first.feature_names() {
            return Err(Error::ShapeMismatch("grids disagree on features".into()).into());
        }
        for i in 0..n {
            for (j, v) in m.row(i).iter().enumerate() {
                values[i * n + j] += v / mats.len() as f64;
            }
        }
    }
    Ok(CorrelationMatrix::from_values(first.feature_names().to_vec(), values)?)
}

/// Trains one model on the windows of all given tables.
pub fn train_model(
    tables: &[TimeTable],
    assignment: &ClusterAssignment,
    window_length: usize,
    stride: usize,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<(ModelCheckpoint, TrainHistory), CliError> {
    let first = tables.first().ok_or(Error::EmptyInput)?;
    let sets = tables
        .iter()
        .map(|t| window(t, window_length, stride))
        .collect::<Result<Vec<_>, _>>()?;
    let windows = WindowSet::concat(&sets)?;
    let model = build_model(
        assignment,
        first.feature_names(),
        window_length,
        cfg.encoder_width,
        cfg.latent_dim,
        seed,
    )?;
    Ok(train(&model, &windows, &cfg.train_config(seed))?)
}

pub fn write_history(history: &TrainHistory, path: &Path) -> Result<(), CliError> {
    let mut out = String::from("epoch,train,val\n");
    for e in &history.epochs {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.train, e.val));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Scores every stride-1 window of the table.
pub fn score(model: &ModelCheckpoint, table: &TimeTable) -> Result<ScoreSeries, CliError> {
    Ok(score_series(model, &window(table, model.window_length, 1)?)?)
}

pub fn threshold(scores: &ScoreSeries, cfg: &ThresholdConfig) -> Result<ThresholdSeries, CliError> {
    Ok(dynamic_threshold(scores, cfg)?)
}

pub fn attribute_table(
    model: &ModelCheckpoint,
    table: &TimeTable,
    scores: &ScoreSeries,
    flags: &ThresholdSeries,
    cfg: &AttributionConfig,
) -> Result<AttributionSeries, CliError> {
    Ok(attribute(model, table, scores, flags, cfg)?)
}

/// Reads whitespace-, comma- or newline-separated numbers.
pub fn read_sample(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .enumerate()
        .map(|(i, s)| {
            s.parse().map_err(|_| {
                CliError::Core(Error::UnparseableValue {
                    value: s.to_string(),
                    column: path.display().to_string(),
                    line: i + 1,
                })
            })
        })
        .collect()
}

pub fn write_bytes(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> anomattr::Result<()>) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}
