//! Seeded synthetic series with correlated feature blocks, seasonality and
//! planted anomalies whose culprit features are known.
//!
//! Within block `b`, feature `f` is
//! `offset_f + scale_f · (√ρ · S_b(t) + √(1 − ρ) · e_f(t))`, where `S_b` is a
//! unit-variance shared factor (a seasonal sine with a per-block phase plus
//! Gaussian noise) and `e_f` is independent unit noise. Each feature thus has
//! standard deviation `scale_f` and within-block correlation `ρ`. Anomalies
//! add `magnitude · scale_f` to the culprit feature for 1–3 steps.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::TimeTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CulpritPolicy {
    #[default]
    SingleFeature,
    /// Two distinct features shift together.
    MultiFeature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_features: usize,
    pub length: usize,
    /// Contiguous, near-equal feature blocks.
    pub n_blocks: usize,
    pub rho: f64,
    pub period: f64,
    /// Sine amplitude relative to the shared factor's noise.
    pub amplitude: f64,
    /// Fraction of timestamps inside planted events.
    pub anomaly_rate: f64,
    /// Shift in units of the feature's standard deviation.
    pub magnitude: f64,
    pub culprit_policy: CulpritPolicy,
    /// Feature indices eligible as culprits; empty means all.
    pub culprit_pool: Vec<usize>,
    pub max_event_len: usize,
    pub start: NaiveDate,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_features: 8,
            length: 5000,
            n_blocks: 2,
            rho: 0.8,
            period: 365.0,
            amplitude: 1.0,
            anomaly_rate: 0.02,
            magnitude: 6.0,
            culprit_policy: CulpritPolicy::SingleFeature,
            culprit_pool: Vec::new(),
            max_event_len: 3,
            start: NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date"),
            seed: 42,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_features < 2 {
            return bad(format!("need at least 2 features, got {}", self.n_features));
        }
        if self.n_blocks == 0 || self.n_blocks > self.n_features {
            return bad(format!("{} blocks for {} features", self.n_blocks, self.n_features));
        }
        if self.length == 0 {
            return bad("length must be positive".into());
        }
        if !(0.0..=0.2).contains(&self.anomaly_rate) {
            return bad(format!("anomaly rate {} outside [0, 0.2]", self.anomaly_rate));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho {} outside [0, 1)", self.rho));
        }
        if self.anomaly_rate > 0.0 && self.magnitude < 3.0 {
            return bad(format!("magnitude {} below 3", self.magnitude));
        }
        if !(self.period > 0.0) || self.max_event_len == 0 {
            return bad("period and max_event_len must be positive".into());
        }
        if let Some(&i) = self.culprit_pool.iter().find(|&&i| i >= self.n_features) {
            return Err(Error::IndexOutOfRange {
                index: i,
                features: self.n_features,
            });
        }
        if self.culprit_policy == CulpritPolicy::MultiFeature
            && self.culprit_pool.len() == 1
        {
            return bad("multi-feature culprits need a pool of at least two".into());
        }
        Ok(())
    }

    pub fn feature_names(&self) -> Vec<String> {
        (0..self.n_features).map(|i| format!("f{i}")).collect()
    }

    /// Block index of each feature.
    pub fn blocks(&self) -> Vec<usize> {
        (0..self.n_features).map(|f| f * self.n_blocks / self.n_features).collect()
    }
}

/// Which timestamps are anomalous and which features caused them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub labels: Vec<bool>,
    /// Row index to culprit feature names, for every anomalous row.
    pub culprits: BTreeMap<usize, Vec<String>>,
}

impl GroundTruth {
    pub fn n_anomalous(&self) -> usize {
        self.culprits.len()
    }

    /// The `{index: [culprits]}` sidecar document.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.culprits)?)
    }

    pub fn from_json(s: &str, length: usize) -> Result<Self> {
        let culprits: BTreeMap<usize, Vec<String>> = serde_json::from_str(s)?;
        let mut labels = vec![false; length];
        for &i in culprits.keys() {
            *labels.get_mut(i).ok_or(Error::IndexOutOfRange {
                index: i,
                features: length,
            })? = true;
        }
        Ok(Self { labels, culprits })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, length: usize) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s, length)
    }
}

pub fn generate(config: &SynthConfig) -> Result<(TimeTable, GroundTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (m, f) = (config.length, config.n_features);
    let blocks = config.blocks();

    let phases: Vec<f64> = (0..config.n_blocks).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let scales: Vec<f64> = (0..f).map(|_| rng.random_range(0.5..3.0)).collect();
    let offsets: Vec<f64> = (0..f).map(|_| rng.random_range(-5.0..5.0)).collect();
    let shared_sd = (0.5 * config.amplitude * config.amplitude + 1.0).sqrt();
    let (a, b) = (config.rho.sqrt(), (1.0 - config.rho).sqrt());

    let mut values = Vec::with_capacity(m * f);
    for t in 0..m {
        let angle = 2.0 * PI * t as f64 / config.period;
        let shared: Vec<f64> = phases
            .iter()
            .map(|p| {
                let eta: f64 = rng.sample(StandardNormal);
                (config.amplitude * (angle + p).sin() + eta) / shared_sd
            })
            .collect();
        for c in 0..f {
            let own: f64 = rng.sample(StandardNormal);
            values.push(offsets[c] + scales[c] * (a * shared[blocks[c]] + b * own));
        }
    }

    let names = config.feature_names();
    let pool: Vec<usize> = if config.culprit_pool.is_empty() {
        (0..f).collect()
    } else {
        config.culprit_pool.clone()
    };
    let target = (config.anomaly_rate * m as f64).round() as usize;
    let mut labels = vec![false; m];
    let mut culprits = BTreeMap::new();
    let mut planted = 0;
    let mut attempts = 0;
    while planted < target && attempts < 100 * m {
        attempts += 1;
        let len = rng.random_range(1..=config.max_event_len).min(target - planted);
        if len > m {
            break;
        }
        let start = rng.random_range(0..=m - len);
        // Keep one clean step on either side so events stay separate.
        let lo = start.saturating_sub(1);
        let hi = (start + len + 1).min(m);
        if labels[lo..hi].iter().any(|l| *l) {
            continue;
        }
        let chosen: Vec<usize> = match config.culprit_policy {
            CulpritPolicy::SingleFeature => vec![pool[rng.random_range(0..pool.len())]],
            CulpritPolicy::MultiFeature => {
                let mut two: Vec<usize> = sample(&mut rng, pool.len(), 2).into_iter().map(|i| pool[i]).collect();
                two.sort_unstable();
                two
            }
        };
        for t in start..start + len {
            labels[t] = true;
            for &c in &chosen {
                values[t * f + c] += config.magnitude * scales[c];
            }
            culprits.insert(t, chosen.iter().map(|&c| names[c].clone()).collect());
        }
        planted += len;
    }

    let start = config.start.and_hms_opt(0, 0, 0).expect("midnight");
    let timestamps = (0..m).map(|i| start + Duration::days(i as i64)).collect();
    let table = TimeTable::new(timestamps, names, values)?;
    Ok((table, GroundTruth { labels, culprits }))
}

/// Adds `magnitude` to one cell.
pub fn inject(table: &TimeTable, t: usize, feature: &str, magnitude: f64) -> Result<TimeTable> {
    let c = table.feature_index(feature)?;
    if t >= table.n_rows() {
        return Err(Error::IndexOutOfRange {
            index: t,
            features: table.n_rows(),
        });
    }
    let mut out = table.clone();
    out.set(t, c, table.get(t, c) + magnitude);
    Ok(out)
}
