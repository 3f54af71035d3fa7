//! Supervised anomaly classifier used to judge feature rankings: stacked
//! LSTMs over short windows of the selected features, a ReLU bottleneck with
//! dropout and a sigmoid output trained with class-weighted cross-entropy.

use std::collections::BTreeSet;

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{metrics, MetricsReport};
use crate::attribution::{topk, RankedFeature, RankedFeatures};
use crate::error::{Error, Result};
use crate::nn::layers::{sigmoid, Activation, Dense, Lstm, LstmTrace};
use crate::nn::{AdamState, Objective, Params};
use crate::stats;
use crate::table::TimeTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch: usize,
    pub window: usize,
    /// Chronologically first share of windows used for fitting; the rest is the test set.
    pub train_fraction: f64,
    /// Tail of the training share held out for early stopping.
    pub val_fraction: f64,
    pub threshold: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32, 10],
            dropout: 0.2,
            lr: 0.001,
            epochs: 50,
            patience: 10,
            batch: 64,
            window: 7,
            train_fraction: 0.7,
            val_fraction: 0.1,
            threshold: 0.5,
        }
    }
}

struct Net {
    layers: Vec<Lstm>,
    head: Dense,
}

struct Pass {
    traces: Vec<LstmTrace>,
    features: Vec<f64>,
    logit: f64,
}

/// −[y ln σ(a) + (1 − y) ln(1 − σ(a))], computed without overflow.
fn bce_with_logit(logit: f64, positive: bool) -> f64 {
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    if positive {
        softplus(-logit)
    } else {
        softplus(logit)
    }
}

impl Net {
    fn new(input: usize, hidden: &[usize]) -> Result<Self> {
        if hidden.is_empty() || hidden.contains(&0) || input == 0 {
            return Err(Error::InvalidConfig("classifier widths must be positive".into()));
        }
        let mut layers = Vec::with_capacity(hidden.len());
        let mut width = input;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Lstm::new(&format!("lstm{i}"), width, h));
            width = h;
        }
        Ok(Self {
            layers,
            head: Dense::new("head", width, 1, Activation::Identity),
        })
    }

    fn init(&self, rng: &mut impl Rng) -> Params {
        let mut p = Params::new();
        for l in &self.layers {
            l.init(&mut p, rng);
        }
        self.head.init(&mut p, rng);
        p
    }

    /// `mask` holds inverted-dropout multipliers for the bottleneck, or `None` at inference.
    fn forward(&self, p: &Params, seq: &[f64], mask: Option<&[f64]>) -> Result<Pass> {
        let mut traces: Vec<LstmTrace> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let zeros = vec![0.0; l.hidden];
            let input = traces.last().map_or(seq, |t| t.hidden_states());
            let trace = l.forward(p, input, &zeros, &zeros)?;
            traces.push(trace);
        }
        let last = traces.last().expect("at least one layer");
        let mut features: Vec<f64> = last.final_h().iter().map(|v| v.max(0.0)).collect();
        if let Some(m) = mask {
            features.iter_mut().zip(m).for_each(|(f, k)| *f *= k);
        }
        let logit = self.head.forward(p, &features)?[0];
        Ok(Pass {
            traces,
            features,
            logit,
        })
    }

    fn loss_and_grad(
        &self,
        p: &Params,
        seq: &[f64],
        positive: bool,
        weight: f64,
        mask: Option<&[f64]>,
        grads: &mut Params,
    ) -> Result<f64> {
        let pass = self.forward(p, seq, mask)?;
        let target = if positive { 1.0 } else { 0.0 };
        let d_logit = weight * (sigmoid(pass.logit) - target);
        let mut dh = self
            .head
            .backward(p, &pass.features, &[pass.logit], &[d_logit], grads)?;
        let last = pass.traces.last().expect("at least one layer");
        for (j, d) in dh.iter_mut().enumerate() {
            let relu_open = last.final_h()[j] > 0.0;
            *d *= if relu_open { mask.map_or(1.0, |m| m[j]) } else { 0.0 };
        }
        let mut d_hidden: Option<Vec<f64>> = None;
        for (l, trace) in self.layers.iter().zip(&pass.traces).rev() {
            let zeros = vec![0.0; l.hidden];
            let d_final = if d_hidden.is_none() { dh.clone() } else { zeros.clone() };
            let g = l.backward(p, trace, d_hidden.as_deref(), &d_final, &zeros, grads)?;
            d_hidden = Some(g.d_seq);
        }
        Ok(weight * bce_with_logit(pass.logit, positive))
    }

    fn probability(&self, p: &Params, seq: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.forward(p, seq, None)?.logit))
    }
}

/// Weighted cross-entropy over a fixed batch; exposed for gradient checks.
struct BatchLoss<'a> {
    net: &'a Net,
    seqs: Vec<&'a [f64]>,
    labels: Vec<bool>,
    weights: [f64; 2],
    masks: Option<Vec<Vec<f64>>>,
}

impl Objective for BatchLoss<'_> {
    fn loss(&self, p: &Params) -> Result<f64> {
        let mut scratch = p.zeros_like();
        Ok(self.loss_and_grad_into(p, &mut scratch)?)
    }

    fn loss_and_grad(&self, p: &Params) -> Result<(f64, Params)> {
        let mut g = p.zeros_like();
        let loss = self.loss_and_grad_into(p, &mut g)?;
        Ok((loss, g))
    }
}

impl BatchLoss<'_> {
    fn loss_and_grad_into(&self, p: &Params, g: &mut Params) -> Result<f64> {
        let mut total = 0.0;
        for (i, seq) in self.seqs.iter().enumerate() {
            let y = self.labels[i];
            let mask = self.masks.as_ref().map(|m| m[i].as_slice());
            total += self
                .net
                .loss_and_grad(p, seq, y, self.weights[usize::from(y)], mask, g)?;
        }
        let n = self.seqs.len() as f64;
        g.scale(1.0 / n);
        Ok(total / n)
    }
}

/// Standardised `window × F` sequences ending at each row from `window − 1`
/// on, for row-major `values` with `f` columns.
fn sequences(values: &[f64], f: usize, window: usize, fit_rows: usize) -> Vec<Vec<f64>> {
    let n_rows = values.len() / f;
    let stats: Vec<(f64, f64)> = (0..f)
        .map(|c| {
            let col: Vec<f64> = values.chunks(f).take(fit_rows).map(|r| r[c]).collect();
            let sd = stats::population_variance(&col).sqrt();
            (stats::mean(&col), if sd > 1e-12 { sd } else { 1.0 })
        })
        .collect();
    (window - 1..n_rows)
        .map(|end| {
            values[(end + 1 - window) * f..(end + 1) * f]
                .chunks(f)
                .flat_map(|row| row.iter().zip(&stats).map(|(v, (m, s))| (v - m) / s))
                .collect()
        })
        .collect()
}

/// Trains on the chronologically first `train_fraction` of windows and
/// reports test-set metrics on the remainder.
pub fn classify(table: &TimeTable, labels: &[bool], config: &ClassifierConfig, seed: u64) -> Result<MetricsReport> {
    classify_columns(table, &(0..table.n_features()).collect::<Vec<_>>(), labels, config, seed)
}

fn classify_columns(
    table: &TimeTable,
    columns: &[usize],
    labels: &[bool],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<MetricsReport> {
    if labels.len() != table.n_rows() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: table.n_rows(),
        });
    }
    if config.window == 0 || config.batch == 0 || config.epochs == 0 || !(config.lr > 0.0) {
        return Err(Error::InvalidConfig("window, batch, epochs and lr must be positive".into()));
    }
    if !(0.0..1.0).contains(&config.dropout)
        || !(config.train_fraction > 0.0 && config.train_fraction < 1.0)
        || !(config.val_fraction > 0.0 && config.val_fraction < 1.0)
    {
        return Err(Error::InvalidConfig("dropout and split fractions must lie in (0, 1)".into()));
    }
    if table.n_rows() < config.window + 3 {
        return Err(Error::SeriesTooShort {
            len: table.n_rows(),
            window: config.window,
        });
    }
    let n_windows = table.n_rows() + 1 - config.window;
    let n_train = ((n_windows as f64 * config.train_fraction).round() as usize).clamp(2, n_windows - 1);
    let n_val = ((n_train as f64 * config.val_fraction).ceil() as usize).clamp(1, n_train - 1);
    let n_fit = n_train - n_val;
    let window_label = |w: usize| labels[w + config.window - 1];

    let fit_pos = (0..n_fit).filter(|&w| window_label(w)).count();
    if fit_pos == 0 || fit_pos == n_fit {
        return Err(Error::SingleClassTraining);
    }
    let weights = [
        n_fit as f64 / (2.0 * (n_fit - fit_pos) as f64),
        n_fit as f64 / (2.0 * fit_pos as f64),
    ];

    let f = columns.len();
    let values: Vec<f64> = (0..table.n_rows())
        .flat_map(|r| columns.iter().map(move |&c| table.get(r, c)))
        .collect();
    let seqs = sequences(&values, f, config.window, n_fit + config.window - 1);
    let net = Net::new(f, &config.hidden)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = net.init(&mut rng);
    let mut adam = AdamState::new(&params);
    let bottleneck = *config.hidden.last().expect("validated non-empty");
    let keep = 1.0 - config.dropout;

    let val_loss = |p: &Params| -> Result<f64> {
        let mut total = 0.0;
        for w in n_fit..n_train {
            let y = window_label(w);
            let logit = net.forward(p, &seqs[w], None)?.logit;
            total += weights[usize::from(y)] * bce_with_logit(logit, y);
        }
        Ok(total / n_val as f64)
    };

    let mut order: Vec<usize> = (0..n_fit).collect();
    let mut best = (f64::INFINITY, params.clone());
    let mut since_best = 0;
    let mut batch_index = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch) {
            let masks: Vec<Vec<f64>> = chunk
                .iter()
                .map(|_| {
                    (0..bottleneck)
                        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect()
                })
                .collect();
            let batch = BatchLoss {
                net: &net,
                seqs: chunk.iter().map(|&w| seqs[w].as_slice()).collect(),
                labels: chunk.iter().map(|&w| window_label(w)).collect(),
                weights,
                masks: Some(masks),
            };
            let (loss, grads) = batch.loss_and_grad(&params)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss { batch: batch_index });
            }
            adam.step(&mut params, &grads, config.lr)?;
            batch_index += 1;
        }
        let v = val_loss(&params)?;
        debug!("classifier epoch {epoch}: validation loss {v:.6}");
        if v < best.0 {
            best = (v, params.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= config.patience {
            break;
        }
    }

    let params = best.1;
    let probs: Vec<f64> = (n_train..n_windows)
        .map(|w| net.probability(&params, &seqs[w]))
        .collect::<Result<_>>()?;
    let test_labels: Vec<bool> = (n_train..n_windows).map(window_label).collect();
    metrics(&probs, &test_labels, config.threshold)
}

/// Classifier restricted to the `k` best-ranked features (kept in table column order).
pub fn classify_topk(
    table: &TimeTable,
    labels: &[bool],
    ranked: &RankedFeatures,
    k: usize,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<MetricsReport> {
    if let Some(unknown) = ranked.entries.iter().find(|e| !table.feature_names().contains(&e.feature)) {
        return Err(Error::UnknownFeatureInRanking(unknown.feature.clone()));
    }
    let chosen: BTreeSet<String> = topk(ranked, k)?.names().into_iter().collect();
    let columns: Vec<usize> = (0..table.n_features())
        .filter(|&c| chosen.contains(&table.feature_names()[c]))
        .collect();
    classify_columns(table, &columns, labels, config, seed)
}

/// A ranking given only as an ordered list of names, most important first.
pub fn ranking_from_names(names: &[String]) -> Result<RankedFeatures> {
    let unique: BTreeSet<&String> = names.iter().collect();
    if unique.len() != names.len() {
        return Err(Error::InvalidConfig("ranking lists a feature twice".into()));
    }
    let n = names.len();
    Ok(RankedFeatures {
        entries: names
            .iter()
            .enumerate()
            .map(|(i, name)| RankedFeature {
                feature: name.clone(),
                count: n - i,
                frequency: (n - i) as f64,
            })
            .collect(),
    })
}

/// Runs [`classify_topk`] for every named ranking under the same seed and config.
pub fn compare_rankings(
    rankings: &[(String, RankedFeatures)],
    k: usize,
    table: &TimeTable,
    labels: &[bool],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<Vec<(String, MetricsReport)>> {
    rankings
        .par_iter()
        .map(|(name, r)| Ok((name.clone(), classify_topk(table, labels, r, k, config, seed)?)))
        .collect()
}
