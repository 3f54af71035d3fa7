//! Cluster-partitioned LSTM variational autoencoder.
//!
//! Each feature cluster gets its own LSTM encoder and Gaussian latent head.
//! The per-cluster samples are concatenated, repeated over the window length
//! and decoded by a single LSTM plus a per-step linear read-out back to the
//! full feature width. The anomaly score of a window is its negative ELBO at
//! the posterior mean.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDateTime;
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterAssignment;
use crate::error::{Error, Result};
use crate::nn::layers::{Activation, Dense, Lstm, LstmTrace};
use crate::nn::vae::{self, Elbo, LatentDist};
use crate::nn::{AdamState, Objective, Params};
use crate::preprocess::{NormStats, WindowSet};
use crate::table::{format_timestamp, parse_timestamp};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Layer wiring for one model. Holds no parameter values.
#[derive(Debug, Clone)]
pub struct ClvNet {
    clusters: Vec<Vec<usize>>,
    n_features: usize,
    window_length: usize,
    latent_dims: Vec<usize>,
    encoders: Vec<Lstm>,
    mu_heads: Vec<Dense>,
    logvar_heads: Vec<Dense>,
    decoder: Lstm,
    output: Dense,
}

struct Pass {
    encoded: Vec<LstmTrace>,
    dists: Vec<LatentDist>,
    decoded: LstmTrace,
    recon: Vec<f64>,
    elbo: Elbo,
}

impl ClvNet {
    /// `clusters` lists the window columns consumed by each encoder.
    pub fn new(
        clusters: Vec<Vec<usize>>,
        n_features: usize,
        window_length: usize,
        encoder_width: usize,
        latent_dims: Vec<usize>,
    ) -> Result<Self> {
        if clusters.is_empty() || window_length == 0 || encoder_width == 0 {
            return Err(Error::InvalidConfig(
                "model needs at least one cluster and positive dimensions".into(),
            ));
        }
        if latent_dims.len() != clusters.len() || latent_dims.contains(&0) {
            return Err(Error::InvalidConfig("one positive latent dimension per cluster".into()));
        }
        if let Some(c) = clusters.iter().position(Vec::is_empty) {
            return Err(Error::EmptyCluster(c));
        }
        if let Some(&bad) = clusters.iter().flatten().find(|&&i| i >= n_features) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                features: n_features,
            });
        }
        let encoders = clusters
            .iter()
            .enumerate()
            .map(|(c, cols)| Lstm::new(&format!("enc{c}"), cols.len(), encoder_width))
            .collect();
        let mu_heads = latent_dims
            .iter()
            .enumerate()
            .map(|(c, &l)| Dense::new(&format!("mu{c}"), encoder_width, l, Activation::Identity))
            .collect();
        let logvar_heads = latent_dims
            .iter()
            .enumerate()
            .map(|(c, &l)| Dense::new(&format!("logvar{c}"), encoder_width, l, Activation::Identity))
            .collect();
        let total: usize = latent_dims.iter().sum();
        Ok(Self {
            decoder: Lstm::new("dec", total, encoder_width),
            output: Dense::new("out", encoder_width, n_features, Activation::Identity),
            clusters,
            n_features,
            window_length,
            latent_dims,
            encoders,
            mu_heads,
            logvar_heads,
        })
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    /// Width of the concatenated latent vector fed to the decoder.
    pub fn latent_total(&self) -> usize {
        self.latent_dims.iter().sum()
    }

    pub fn window_size(&self) -> usize {
        self.window_length * self.n_features
    }

    pub fn init(&self, rng: &mut impl Rng) -> Params {
        let mut p = Params::new();
        for c in 0..self.clusters.len() {
            self.encoders[c].init(&mut p, rng);
            self.mu_heads[c].init(&mut p, rng);
            self.logvar_heads[c].init(&mut p, rng);
        }
        self.decoder.init(&mut p, rng);
        self.output.init(&mut p, rng);
        p
    }

    fn forward(&self, p: &Params, x: &[f64], noise: Option<&[f64]>) -> Result<Pass> {
        if x.len() != self.window_size() {
            return Err(Error::ShapeMismatch(format!(
                "window has {} values, model expects {}×{}",
                x.len(),
                self.window_length,
                self.n_features
            )));
        }
        if let Some(e) = noise {
            if e.len() != self.latent_total() {
                return Err(Error::ShapeMismatch(format!(
                    "noise of length {} for latent width {}",
                    e.len(),
                    self.latent_total()
                )));
            }
        }
        let (t_len, f) = (self.window_length, self.n_features);
        let mut encoded = Vec::with_capacity(self.clusters.len());
        let mut dists = Vec::with_capacity(self.clusters.len());
        let mut z = Vec::with_capacity(self.latent_total());
        let mut offset = 0;
        for (c, cols) in self.clusters.iter().enumerate() {
            let seq: Vec<f64> = (0..t_len)
                .flat_map(|t| cols.iter().map(move |&j| x[t * f + j]))
                .collect();
            let h = self.encoders[c].hidden;
            let trace = self.encoders[c].forward(p, &seq, &vec![0.0; h], &vec![0.0; h])?;
            let dist = LatentDist::new(
                self.mu_heads[c].forward(p, trace.final_h())?,
                self.logvar_heads[c].forward(p, trace.final_h())?,
            )?;
            let l = self.latent_dims[c];
            match noise {
                Some(e) => z.extend(vae::reparameterize(&dist, &e[offset..offset + l])?),
                None => z.extend_from_slice(&dist.mu),
            }
            offset += l;
            encoded.push(trace);
            dists.push(dist);
        }
        let dec_in: Vec<f64> = (0..t_len).flat_map(|_| z.iter().copied()).collect();
        let h = self.decoder.hidden;
        let decoded = self.decoder.forward(p, &dec_in, &vec![0.0; h], &vec![0.0; h])?;
        let recon = self.output.forward_rows(p, decoded.hidden_states())?;
        let kl: f64 = dists.iter().map(vae::kl_divergence).sum();
        let nll = vae::gaussian_nll(x, &recon);
        Ok(Pass {
            encoded,
            dists,
            decoded,
            recon,
            elbo: Elbo {
                total: kl + nll,
                kl,
                nll,
            },
        })
    }

    /// Negative ELBO of one window. `noise = None` evaluates at the posterior mean.
    pub fn window_loss(&self, p: &Params, x: &[f64], noise: Option<&[f64]>) -> Result<Elbo> {
        Ok(self.forward(p, x, noise)?.elbo)
    }

    /// Negative ELBO of one window; its gradient is added to `grads`.
    pub fn window_loss_and_grad(
        &self,
        p: &Params,
        x: &[f64],
        noise: Option<&[f64]>,
        grads: &mut Params,
    ) -> Result<Elbo> {
        let pass = self.forward(p, x, noise)?;
        let d_recon = vae::gaussian_nll_gradient(x, &pass.recon);
        let d_hidden = self.output.backward_rows(
            p,
            pass.decoded.hidden_states(),
            &pass.recon,
            &d_recon,
            grads,
        )?;
        let h = self.decoder.hidden;
        let zeros = vec![0.0; h];
        let d_in = self
            .decoder
            .backward(p, &pass.decoded, Some(&d_hidden), &zeros, &zeros, grads)?;
        let width = self.latent_total();
        let mut dz = vec![0.0; width];
        for row in d_in.d_seq.chunks(width) {
            dz.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }

        let mut offset = 0;
        for (c, dist) in pass.dists.iter().enumerate() {
            let l = self.latent_dims[c];
            let (mut dmu, mut dlv) = vae::kl_gradient(dist);
            for j in 0..l {
                let g = dz[offset + j];
                dmu[j] += g;
                if let Some(e) = noise {
                    dlv[j] += g * 0.5 * (0.5 * dist.logvar[j]).exp() * e[offset + j];
                }
            }
            offset += l;
            let trace = &pass.encoded[c];
            let mut dh = self.mu_heads[c].backward(p, trace.final_h(), &dist.mu, &dmu, grads)?;
            let dh2 = self.logvar_heads[c].backward(p, trace.final_h(), &dist.logvar, &dlv, grads)?;
            dh.iter_mut().zip(dh2).for_each(|(a, b)| *a += b);
            let zeros = vec![0.0; self.encoders[c].hidden];
            self.encoders[c].backward(p, trace, None, &dh, &zeros, grads)?;
        }
        Ok(pass.elbo)
    }
}

/// Mean negative ELBO over a fixed batch with fixed noise draws.
pub struct BatchObjective<'a> {
    pub net: &'a ClvNet,
    pub windows: Vec<&'a [f64]>,
    /// One latent-width noise vector per window, or `None` for posterior means.
    pub noise: Option<Vec<Vec<f64>>>,
}

impl BatchObjective<'_> {
    fn noise_for(&self, i: usize) -> Option<&[f64]> {
        self.noise.as_ref().map(|n| n[i].as_slice())
    }
}

impl Objective for BatchObjective<'_> {
    fn loss(&self, p: &Params) -> Result<f64> {
        let mut total = 0.0;
        for (i, x) in self.windows.iter().enumerate() {
            total += self.net.window_loss(p, x, self.noise_for(i))?.total;
        }
        Ok(total / self.windows.len() as f64)
    }

    fn loss_and_grad(&self, p: &Params) -> Result<(f64, Params)> {
        let mut g = p.zeros_like();
        let mut total = 0.0;
        for (i, x) in self.windows.iter().enumerate() {
            total += self.net.window_loss_and_grad(p, x, self.noise_for(i), &mut g)?.total;
        }
        let n = self.windows.len() as f64;
        g.scale(1.0 / n);
        Ok((total / n, g))
    }
}

/// Trained (or freshly initialised) detector plus everything needed to
/// score new data consistently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub feature_names: Vec<String>,
    pub assignment: ClusterAssignment,
    pub window_length: usize,
    pub encoder_width: usize,
    pub latent_dims: Vec<usize>,
    pub seed: u64,
    #[serde(default)]
    pub norm: Option<NormStats>,
    pub params: Params,
}

/// Builds and initialises a model whose window columns follow `feature_names`.
pub fn build_model(
    assignment: &ClusterAssignment,
    feature_names: &[String],
    window_length: usize,
    encoder_width: usize,
    latent_dim: usize,
    seed: u64,
) -> Result<ModelCheckpoint> {
    if assignment.assignment.is_empty() {
        return Err(Error::InvalidConfig("empty cluster assignment".into()));
    }
    let groups = assignment.groups(feature_names)?;
    let latent_dims = vec![latent_dim; groups.len()];
    let net = ClvNet::new(
        groups,
        feature_names.len(),
        window_length,
        encoder_width,
        latent_dims.clone(),
    )?;
    let params = net.init(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(ModelCheckpoint {
        version: CHECKPOINT_VERSION,
        feature_names: feature_names.to_vec(),
        assignment: assignment.clone(),
        window_length,
        encoder_width,
        latent_dims,
        seed,
        norm: None,
        params,
    })
}

impl ModelCheckpoint {
    pub fn net(&self) -> Result<ClvNet> {
        ClvNet::new(
            self.assignment.groups(&self.feature_names)?,
            self.feature_names.len(),
            self.window_length,
            self.encoder_width,
            self.latent_dims.clone(),
        )
    }

    pub fn n_clusters(&self) -> usize {
        self.latent_dims.len()
    }

    pub fn with_norm(mut self, norm: NormStats) -> Self {
        self.norm = Some(norm);
        self
    }

    fn check_windows(&self, windows: &WindowSet) -> Result<()> {
        if windows.length() != self.window_length || windows.n_features() != self.feature_names.len() {
            return Err(Error::ShapeMismatch(format!(
                "windows are {}×{}, model expects {}×{}",
                windows.length(),
                windows.n_features(),
                self.window_length,
                self.feature_names.len()
            )));
        }
        if windows.feature_names() != self.feature_names.as_slice() {
            return Err(Error::ModelDataMismatch(format!(
                "data features {:?} differ from model features {:?}",
                windows.feature_names(),
                self.feature_names
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            version: u32,
        }
        let probe: Probe = serde_json::from_str(s)?;
        if probe.version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(probe.version));
        }
        let ckpt: Self = serde_json::from_str(s)?;
        let net = ckpt.net()?;
        net.init(&mut ChaCha8Rng::seed_from_u64(0)).check_same_layout(&ckpt.params)?;
        if !ckpt.params.all_finite() {
            return Err(Error::InvalidConfig("checkpoint holds non-finite parameters".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch: usize,
    pub lr: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            patience: 10,
            batch: 64,
            lr: 0.001,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub val: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochLoss>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
}

fn mean_loss(net: &ClvNet, p: &Params, windows: &WindowSet, idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &w in idx {
        total += net.window_loss(p, windows.window(w), None)?.total;
    }
    Ok(total / idx.len() as f64)
}

/// Fits the model with Adam on shuffled mini-batches, keeping the parameters
/// with the lowest validation loss. Validation uses the chronologically last
/// `val_fraction` of the windows.
pub fn train(
    model: &ModelCheckpoint,
    windows: &WindowSet,
    config: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainHistory)> {
    if config.epochs == 0 || config.batch == 0 || !(config.lr > 0.0) {
        return Err(Error::InvalidConfig(
            "epochs, batch and learning rate must be positive".into(),
        ));
    }
    if !(config.val_fraction > 0.0 && config.val_fraction <= 0.5) {
        return Err(Error::InvalidConfig(format!(
            "val_fraction {} outside (0, 0.5]",
            config.val_fraction
        )));
    }
    model.check_windows(windows)?;
    let m = windows.len();
    let n_val = ((m as f64 * config.val_fraction).ceil() as usize).max(1);
    if m < n_val + 1 {
        return Err(Error::TooFewRows {
            needed: n_val + 1,
            got: m,
        });
    }
    let n_train = m - n_val;
    let val_idx: Vec<usize> = (n_train..m).collect();
    let mut order: Vec<usize> = (0..n_train).collect();

    let net = model.net()?;
    let mut params = model.params.clone();
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let latent = net.latent_total();

    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, params.clone());
    let mut since_best = 0;
    let mut batch_index = 0usize;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for chunk in order.chunks(config.batch) {
            let noise: Vec<Vec<f64>> = chunk
                .iter()
                .map(|_| (0..latent).map(|_| rng.sample(StandardNormal)).collect())
                .collect();
            let objective = BatchObjective {
                net: &net,
                windows: chunk.iter().map(|&w| windows.window(w)).collect(),
                noise: Some(noise),
            };
            let (loss, grads) = objective.loss_and_grad(&params)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss { batch: batch_index });
            }
            adam.step(&mut params, &grads, config.lr)?;
            epoch_total += loss * chunk.len() as f64;
            batch_index += 1;
        }
        let train_loss = epoch_total / n_train as f64;
        let val_loss = mean_loss(&net, &params, windows, &val_idx)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { batch: batch_index });
        }
        debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        history.epochs.push(EpochLoss {
            epoch,
            train: train_loss,
            val: val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, params.clone());
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= config.patience {
            break;
        }
    }
    info!(
        "trained {} epochs, best validation loss {:.6} at epoch {}",
        history.epochs.len(),
        best.0,
        history.best_epoch
    );
    let mut out = model.clone();
    out.params = best.1;
    Ok((out, history))
}

/// Per-window anomaly scores anchored at each window's last timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub timestamps: Vec<NaiveDateTime>,
    pub scores: Vec<f64>,
}

impl ScoreSeries {
    pub fn new(timestamps: Vec<NaiveDateTime>, scores: Vec<f64>) -> Result<Self> {
        if timestamps.len() != scores.len() {
            return Err(Error::LengthMismatch {
                left: timestamps.len(),
                right: scores.len(),
            });
        }
        Ok(Self { timestamps, scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["timestamp", "score"])?;
        for (t, s) in self.timestamps.iter().zip(&self.scores) {
            w.write_record([format_timestamp(t), s.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        for name in ["timestamp", "score"] {
            if !headers.iter().any(|h| h == name) {
                return Err(Error::MissingColumn(name.into()));
            }
        }
        let ti = headers.iter().position(|h| h == "timestamp").unwrap_or(0);
        let si = headers.iter().position(|h| h == "score").unwrap_or(1);
        let (mut timestamps, mut scores) = (Vec::new(), Vec::new());
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let ts = &rec[ti];
            timestamps.push(parse_timestamp(ts).ok_or_else(|| Error::UnparseableTimestamp {
                value: ts.to_string(),
                line: line + 2,
            })?);
            let v = &rec[si];
            scores.push(v.trim().parse().map_err(|_| Error::UnparseableValue {
                value: v.to_string(),
                column: "score".into(),
                line: line + 2,
            })?);
        }
        Self::new(timestamps, scores)
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

/// Raw per-window scores in window order.
pub fn window_scores(model: &ModelCheckpoint, windows: &WindowSet) -> Result<Vec<f64>> {
    model.check_windows(windows)?;
    let net = model.net()?;
    (0..windows.len())
        .into_par_iter()
        .map(|w| Ok(net.window_loss(&model.params, windows.window(w), None)?.total))
        .collect()
}

/// Scores every window at its posterior mean (no sampling).
pub fn score_series(model: &ModelCheckpoint, windows: &WindowSet) -> Result<ScoreSeries> {
    let scores = window_scores(model, windows)?;
    ScoreSeries::new(windows.origin_timestamps().to_vec(), scores)
}
