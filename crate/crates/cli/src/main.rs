//! `anomattr`: anomaly detection and feature attribution pipeline.

mod config;
mod steps;

use std::collections::BTreeMap;
use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anomattr::attribution::{rank_features, AttributionSeries, Direction, Membership, RankedFeatures, Reference};
use anomattr::clustering::ClusterAssignment;
use anomattr::clv::{ModelCheckpoint, ScoreSeries};
use anomattr::eval::{
    classify, compare_rankings, decadal_counts, period_counts, ranking_from_names, welch_ttest, DecadalRow,
    MetricsReport,
};
use anomattr::preprocess::NormStats;
use anomattr::synth::{generate, CulpritPolicy, GroundTruth};
use anomattr::table::load_grids;
use anomattr::threshold::ThresholdSeries;
use anomattr::{Error, ErrorClass};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use thiserror::Error;

use config::PipelineConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn class(&self) -> ErrorClass {
        match self {
            CliError::Core(e) => e.class(),
            _ => ErrorClass::Validation,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Config(_) => "InvalidConfig",
            CliError::Usage(_) => "Usage",
        }
    }

    fn exit_code(&self) -> u8 {
        match self.class() {
            ErrorClass::Validation => 2,
            ErrorClass::Numerical => 3,
            ErrorClass::Io => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "anomattr", version, about = "Cluster-partitioned LSTM-VAE anomaly detection with counterfactual attribution")]
struct Cli {
    /// JSON pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output file, or directory for `pipeline`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter, aggregate, derive, clean and z-score a table.
    Preprocess(PreprocessArgs),
    /// Cluster features by correlation.
    Cluster(ClusterArgs),
    /// Train a detector.
    Train(TrainArgs),
    /// Score every window of a table.
    Score(ScoreArgs),
    /// Dynamic POT thresholds and flags for a score series.
    Threshold(ThresholdArgs),
    /// Counterfactual attribution of flagged timestamps.
    Attribute(AttributeArgs),
    /// Rank features by winner frequency per grid.
    Rank(RankArgs),
    /// Compare classifiers trained on ranked feature subsets.
    Evaluate(EvaluateArgs),
    /// Welch two-sample t-test.
    Ttest(TtestArgs),
    /// Mean anomaly counts per grid by decade and month.
    Decadal(DecadalArgs),
    /// Generate a synthetic table with planted anomalies.
    Synth(SynthArgs),
    /// Run everything end to end.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
struct InputArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// Select one grid from a multi-grid file.
    #[arg(long)]
    grid: Option<String>,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// Where to write the fitted z-score statistics (JSON keyed by grid id).
    #[arg(long)]
    norm_out: Option<PathBuf>,
    #[arg(long)]
    period_days: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    months: Option<Vec<u32>>,
    #[arg(long)]
    derive: bool,
    #[arg(long)]
    iqr_clean: bool,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    /// Cluster on the mean correlation over all grids.
    #[arg(long)]
    pooled: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    clusters: PathBuf,
    /// z-score statistics to store in the checkpoint.
    #[arg(long)]
    norm: Option<PathBuf>,
    /// Per-epoch losses as CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    encoder_width: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Train one model on every grid in the input.
    #[arg(long)]
    pooled: bool,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Debug, Args)]
struct ThresholdArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    init_quantile: Option<f64>,
    #[arg(long)]
    risk_q: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DirectionArg {
    PositiveDelta,
    NegativeDelta,
    Absolute,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MembershipArg {
    ScoreExceedsBaseline,
    DeltaExceedsScore,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReferenceArg {
    YearlyMedian,
    Identity,
}

#[derive(Debug, Args)]
struct AttributeArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    flags: PathBuf,
    #[arg(long, value_enum)]
    direction: Option<DirectionArg>,
    #[arg(long, value_enum)]
    membership: Option<MembershipArg>,
    #[arg(long, value_enum)]
    reference: Option<ReferenceArg>,
    #[arg(long)]
    all_timestamps: bool,
}

#[derive(Debug, Args)]
struct RankArgs {
    /// Attribution CSVs, one per grid.
    #[arg(long, num_args = 1.., required = true)]
    attributions: Vec<PathBuf>,
    /// Grid count used for normalisation (defaults to the number of files).
    #[arg(long)]
    n_grids: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Ground truth JSON `{row_index: [culprits]}`.
    #[arg(long)]
    labels: PathBuf,
    /// Named rankings as `name=path/to/ranking.json`.
    #[arg(long = "ranking")]
    rankings: Vec<String>,
    #[arg(long)]
    k: usize,
    /// Also evaluate this many seeded random rankings.
    #[arg(long, default_value_t = 0)]
    random: usize,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct TtestArgs {
    /// First sample: numbers separated by commas or whitespace.
    #[arg(long, requires = "b", conflicts_with = "flags")]
    a: Option<PathBuf>,
    #[arg(long, requires = "a")]
    b: Option<PathBuf>,
    /// Flag CSVs, one per grid; samples are per-(grid, month) anomaly counts.
    #[arg(long, num_args = 1.., requires_all = ["period_a", "period_b"])]
    flags: Vec<PathBuf>,
    /// Years as `START-END`, inclusive.
    #[arg(long)]
    period_a: Option<String>,
    #[arg(long)]
    period_b: Option<String>,
    #[arg(long, value_delimiter = ',')]
    months: Option<Vec<u32>>,
}

#[derive(Debug, Args)]
struct DecadalArgs {
    /// Flag CSVs, one per grid (grid name = file stem).
    #[arg(long, num_args = 1.., required = true)]
    flags: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    months: Option<Vec<u32>>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Ground-truth sidecar (defaults to the output with a `.truth.json` extension).
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    magnitude: Option<f64>,
    #[arg(long)]
    multi_culprit: bool,
    /// Number of grids; grid g uses seed + g and the truth file is keyed by grid id.
    #[arg(long, default_value_t = 1)]
    grids: usize,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    pooled: bool,
    #[arg(long)]
    epochs: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report(&CliError::Usage(e.to_string().trim().to_string()));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ANOMATTR_LOG", "warn"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(e.exit_code())
        }
    }
}

fn report(e: &CliError) {
    let class = match e.class() {
        ErrorClass::Validation => "validation",
        ErrorClass::Numerical => "numerical",
        ErrorClass::Io => "io",
    };
    eprintln!("{}", json!({ "error": e.code(), "class": class, "message": e.to_string() }));
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out;
    match cli.command {
        Command::Preprocess(a) => cmd_preprocess(cfg, a, out),
        Command::Cluster(a) => cmd_cluster(cfg, a, out),
        Command::Train(a) => cmd_train(cfg, a, out),
        Command::Score(a) => cmd_score(cfg, a, out),
        Command::Threshold(a) => cmd_threshold(cfg, a, out),
        Command::Attribute(a) => cmd_attribute(cfg, a, out),
        Command::Rank(a) => cmd_rank(a, out),
        Command::Evaluate(a) => cmd_evaluate(cfg, a, out),
        Command::Ttest(a) => cmd_ttest(cfg, a, out),
        Command::Decadal(a) => cmd_decadal(cfg, a, out),
        Command::Synth(a) => cmd_synth(cfg, a, out),
        Command::Pipeline(a) => cmd_pipeline(cfg, a, out),
    }
}

fn need_out(out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    out.ok_or_else(|| CliError::Usage("--out is required".into()))
}

fn input_path(cfg: &PipelineConfig, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    flag.or_else(|| cfg.input.clone())
        .ok_or_else(|| CliError::Usage("--input is required (or `input` in the config)".into()))
}

fn load_input(cfg: &PipelineConfig, a: InputArgs) -> Result<anomattr::TimeTable, CliError> {
    let path = input_path(cfg, a.input)?;
    steps::load_one(&path, &cfg.features, a.grid.as_deref())
}

fn cmd_preprocess(mut cfg: PipelineConfig, a: PreprocessArgs, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = need_out(out)?;
    if a.period_days.is_some() {
        cfg.preprocess.period_days = a.period_days;
    }
    if let Some(m) = a.months {
        cfg.preprocess.months = m;
    }
    cfg.preprocess.derive |= a.derive;
    cfg.preprocess.iqr_clean |= a.iqr_clean;
    let raw = load_grids(&input_path(&cfg, a.input)?, &cfg.features)?;
    let (tables, norms) = steps::preprocess_all(&raw, &cfg.preprocess)?;
    steps::save_tables(&tables, &out)?;
    if let Some(path) = a.norm_out {
        steps::write_json(&norms, &path)?;
    }
    Ok(())
}

fn cmd_cluster(mut cfg: PipelineConfig, a: ClusterArgs, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = need_out(out)?;
    if a.k.is_some() {
        cfg.cluster.k = a.k;
    }
    cfg.cluster.k_min = a.k_min.unwrap_or(cfg.cluster.k_min);
    cfg.cluster.k_max = a.k_max.unwrap_or(cfg.cluster.k_max);
    let tables = if a.pooled {
        load_grids(&input_path(&cfg, a.input.input)?, &cfg.features)?
    } else {
        vec![load_input(&cfg, a.input)?]
    };
    let assignment = steps::cluster(&tables, &cfg.cluster, cfg.seed)?;
    steps::write_json(&assignment, &out)
}

fn cmd_train(mut cfg: PipelineConfig, a: TrainArgs, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = need_out(out)?;
    let m = &mut cfg.model;
    m.encoder_width = a.encoder_width.unwrap_or(m.encoder_width);
    m.latent_dim = a.latent_dim.unwrap_or(m.latent_dim);
    m.epochs = a.epochs.unwrap_or(m.epochs);
    m.patience = a.patience.unwrap_or(m.patience);
    m.batch = a.batch.unwrap_or(m.batch);
    m.lr = a.lr.unwrap_or(m.lr);
    m.val_fraction = a.val_fraction.unwrap_or(m.val_fraction);
    m.pooled |= a.pooled;
    cfg.preprocess.window = a.window.unwrap_or(cfg.preprocess.window);
    cfg.preprocess.stride = a.stride.unwrap_or(cfg.preprocess.stride);

    let grid = a.input.grid.clone();
    let tables = if cfg.model.pooled {
        load_grids(&input_path(&cfg, a.input.input)?, &cfg.features)?
    } else {
        vec![load_input(&cfg, a.input)?]
    };
    let assignment: ClusterAssignment = steps::read_json(&a.clusters)?;
    let (mut model, history) = steps::train_model(
        &tables,
        &assignment,
        cfg.preprocess.window,
        cfg.preprocess.stride,
        &cfg.model,
        cfg.seed,
    )?;
    if let Some(path) = a.norm {
        let norms: BTreeMap<String, NormStats> = steps::read_json(&path)?;
        let key = if cfg.model.pooled {
            None
        } else {
            Some(grid.unwrap_or_else(|| steps::grid_key(&tables[0])))
        };
        if let Some(norm) = key.and_then(|k| norms.get(&k).cloned()) {
            model = model.with_norm(norm);
        }
    }
    model.save(&out)?;
    if let Some(path) = a.history {
        steps::write_history(&history, &path)?;
    }
    Ok(())
}

fn cmd_score(cfg: PipelineConfig, a: ScoreArgs, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = need_out(out)?;
    let table = load_input(&cfg, a.input)?;
    let model = ModelCheckpoint::load(&a.model)?;
    steps::score(&model, &table)?.save(&out)?;
    Ok(())
}

fn cmd_threshold(mut cfg: PipelineConfig, a: ThresholdArgs, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = need_out(out)?;
    let t = &mut cfg.threshold;
    t.window = a.window.unwrap_or(t.window);
    t.init_quantile = a.init_quantile.unwrap_or(t.init_quantile);
    t.risk_q = a.risk_q.unwrap_or(t.risk_q);
    let scores = ScoreSeries::load(&a.scores)?;
    steps::threshold(&scores, &cfg.threshold)?.save(&out)?;
    Ok(())
}

fn cmd_attribute(mut cfg: PipelineConfig, a: AttributeArgs, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = need_out(out)?;
    let c = &mut cfg.attribution;
    if let Some(d) = a.direction {
        c.direction = match d {
            DirectionArg::PositiveDelta => Direction::PositiveDelta,
            DirectionArg::NegativeDelta => Direction::NegativeDelta,
            DirectionArg::Absolute => Direction::Absolute,
        };
    }
    if let Some(m) = a.membership {
        c.membership = match m {
            MembershipArg::ScoreExceedsBaseline => Membership::ScoreExceedsBaseline,
            MembershipArg::DeltaExceedsScore => Membership::DeltaExceedsScore,
        };
    }
    if let Some(r) = a.reference {
        c.reference = match r {
            ReferenceArg::YearlyMedian => Reference::YearlyMedian,
            ReferenceArg::Identity => Reference::Identity,
        };
    }
    c.all_timestamps |= a.all_timestamps;
    let table = load_input(&cfg, a.input)?;
    let model = ModelCheckpoint::load(&a.model)?;
    let scores = ScoreSeries::load(&a.scores)?;
    let flags = ThresholdSeries::load(&a.flags)?;
    steps::attribute_table(&model, &table, &scores, &flags, &cfg.attribution)?.save(&out)?;
    Ok(())
}

fn cmd_rank(a: RankArgs, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = need_out(out)?;
    let series = a
        .attributions
        .iter()
        .map(|p| AttributionSeries::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let ranked = rank_features(&series, a.n_grids.unwrap_or(series.len()))?;
    steps::write_json(&ranked, &out)
}

fn random_rankings(names: &[String], n: usize, seed: u64) -> Result<Vec<(String, RankedFeatures)>, CliError> {
    (0..n)
        .map(|i| {
            let mut shuffled = names.to_vec();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64)));
            Ok((format!("random-{i}"), ranking_from_names(&shuffled)?))
        })
        .collect()
}

fn cmd_evaluate(mut cfg: PipelineConfig, a: EvaluateArgs, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = need_out(out)?;
    cfg.classifier.epochs = a.epochs.unwrap_or(cfg.classifier.epochs);
    let table = load_input(&cfg, a.input)?;
    let truth = GroundTruth::load(&a.labels, table.n_rows())?;
    let mut rankings = Vec::new();
    for spec in &a.rankings {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--ranking expects name=path, got `{spec}`")))?;
        rankings.push((name.to_string(), steps::read_json::<RankedFeatures>(Path::new(path))?));
    }
    rankings.extend(random_rankings(table.feature_names(), a.random, cfg.seed)?);
    let mut rows = vec![(
        "all-features".to_string(),
        classify(&table, &truth.labels, &cfg.classifier, cfg.seed)?,
    )];
    rows.extend(compare_rankings(&rankings, a.k, &table, &truth.labels, &cfg.classifier, cfg.seed)?);
    steps::write_bytes(&out, |buf| MetricsReport::write_table(&rows, buf))
}

fn parse_years(s: &str) -> Result<RangeInclusive<i32>, CliError> {
    let bad = || CliError::Usage(format!("expected a year range START-END, got `{s}`"));
    let (a, b) = s.split_once('-').ok_or_else(bad)?;
    let (a, b): (i32, i32) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a > b {
        return Err(bad());
    }
    Ok(a..=b)
}

fn named_flags(paths: &[PathBuf]) -> Result<Vec<(String, ThresholdSeries)>, CliError> {
    paths
        .iter()
        .map(|p| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, ThresholdSeries::load(p)?))
        })
        .collect()
}

fn season_months(cfg: &PipelineConfig, flag: Option<Vec<u32>>) -> Vec<u32> {
    let months = flag.unwrap_or_else(|| cfg.preprocess.months.clone());
    if months.is_empty() {
        (1..=12).collect()
    } else {
        months
    }
}

fn cmd_ttest(cfg: PipelineConfig, a: TtestArgs, out: Option<PathBuf>) -> Result<(), CliError> {
    let (x, y) = match (a.a, a.b) {
        (Some(pa), Some(pb)) => (steps::read_sample(&pa)?, steps::read_sample(&pb)?),
        _ if !a.flags.is_empty() => {
            let grids = named_flags(&a.flags)?;
            let months = season_months(&cfg, a.months);
            let pa = parse_years(a.period_a.as_deref().unwrap_or_default())?;
            let pb = parse_years(a.period_b.as_deref().unwrap_or_default())?;
            (period_counts(&grids, &months, pa)?, period_counts(&grids, &months, pb)?)
        }
        _ => return Err(CliError::Usage("give either --a/--b or --flags".into())),
    };
    let result = welch_ttest(&x, &y)?;
    match out {
        Some(path) => steps::write_json(&result, &path),
        None => {
            println!("{}", serde_json::to_string_pretty(&result).map_err(Error::from)?);
            Ok(())
        }
    }
}

fn cmd_decadal(cfg: PipelineConfig, a: DecadalArgs, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = need_out(out)?;
    let grids = named_flags(&a.flags)?;
    let rows = decadal_counts(&grids, &season_months(&cfg, a.months))?;
    steps::write_bytes(&out, |buf| DecadalRow::write_csv(&rows, buf))
}

fn cmd_synth(mut cfg: PipelineConfig, a: SynthArgs, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = need_out(out)?;
    let s = &mut cfg.synth;
    s.seed = cfg.seed;
    s.n_features = a.features.unwrap_or(s.n_features);
    s.length = a.length.unwrap_or(s.length);
    s.n_blocks = a.blocks.unwrap_or(s.n_blocks);
    s.rho = a.rho.unwrap_or(s.rho);
    s.anomaly_rate = a.rate.unwrap_or(s.anomaly_rate);
    s.magnitude = a.magnitude.unwrap_or(s.magnitude);
    if a.multi_culprit {
        s.culprit_policy = CulpritPolicy::MultiFeature;
    }
    let truth_path = a.truth.unwrap_or_else(|| out.with_extension("truth.json"));
    if a.grids == 0 {
        return Err(CliError::Usage("--grids must be at least 1".into()));
    }
    if a.grids == 1 {
        let (table, truth) = generate(&cfg.synth)?;
        table.save(&out)?;
        truth.save(&truth_path)?;
        return Ok(());
    }
    let mut tables = Vec::with_capacity(a.grids);
    let mut truths = BTreeMap::new();
    for g in 0..a.grids {
        let id = format!("g{g:03}");
        let grid_cfg = anomattr::synth::SynthConfig {
            seed: cfg.synth.seed.wrapping_add(g as u64),
            ..cfg.synth.clone()
        };
        let (table, truth) = generate(&grid_cfg)?;
        tables.push(table.with_grid_id(Some(id.clone())));
        truths.insert(id, truth.culprits);
    }
    steps::save_tables(&tables, &out)?;
    steps::write_json(&truths, &truth_path)
}

fn grid_dir(out_dir: &Path, key: &str) -> Result<PathBuf, CliError> {
    let dir = if key == steps::NO_GRID {
        out_dir.to_path_buf()
    } else {
        out_dir.join(key)
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Everything downstream of a trained model for one grid.
fn detect_grid(
    cfg: &PipelineConfig,
    model: &ModelCheckpoint,
    table: &anomattr::TimeTable,
    dir: &Path,
) -> Result<(AttributionSeries, ThresholdSeries), CliError> {
    let scores = steps::score(model, table)?;
    scores.save(&dir.join("scores.csv"))?;
    let flags = steps::threshold(&scores, &cfg.threshold)?;
    flags.save(&dir.join("flags.csv"))?;
    let attribution = steps::attribute_table(model, table, &scores, &flags, &cfg.attribution)?;
    attribution.save(&dir.join("attributions.csv"))?;
    Ok((attribution, flags))
}

fn cmd_pipeline(mut cfg: PipelineConfig, a: PipelineArgs, out: Option<PathBuf>) -> Result<(), CliError> {
    let out_dir = out
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| CliError::Usage("--out (or `out_dir` in the config) is required".into()))?;
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    cfg.model.pooled |= a.pooled;
    cfg.model.epochs = a.epochs.unwrap_or(cfg.model.epochs);
    if a.input.input.is_some() {
        cfg.input = a.input.input;
    }

    let raw = match &cfg.input {
        Some(path) => {
            let grids = load_grids(path, &cfg.features)?;
            match &a.input.grid {
                Some(id) => grids.into_iter().filter(|t| t.grid_id() == Some(id.as_str())).collect(),
                None => grids,
            }
        }
        None => {
            cfg.synth.seed = cfg.seed;
            let (table, truth) = generate(&cfg.synth)?;
            table.save(&out_dir.join("data.csv"))?;
            truth.save(&out_dir.join("data.truth.json"))?;
            vec![table]
        }
    };
    if raw.is_empty() {
        return Err(CliError::Usage("no grid matches the selection".into()));
    }
    let (tables, norms) = steps::preprocess_all(&raw, &cfg.preprocess)?;
    steps::save_tables(&tables, &out_dir.join("preprocessed.csv"))?;
    steps::write_json(&norms, &out_dir.join("norm.json"))?;

    let mut results = Vec::with_capacity(tables.len());
    if cfg.model.pooled {
        let assignment = steps::cluster(&tables, &cfg.cluster, cfg.seed)?;
        steps::write_json(&assignment, &out_dir.join("clusters.json"))?;
        let (model, history) = steps::train_model(
            &tables,
            &assignment,
            cfg.preprocess.window,
            cfg.preprocess.stride,
            &cfg.model,
            cfg.seed,
        )?;
        model.save(&out_dir.join("model.json"))?;
        steps::write_history(&history, &out_dir.join("history.csv"))?;
        for table in &tables {
            let key = steps::grid_key(table);
            results.push((key.clone(), detect_grid(&cfg, &model, table, &grid_dir(&out_dir, &key)?)?));
        }
    } else {
        for table in &tables {
            let key = steps::grid_key(table);
            let dir = grid_dir(&out_dir, &key)?;
            let one = std::slice::from_ref(table);
            let assignment = steps::cluster(one, &cfg.cluster, cfg.seed)?;
            steps::write_json(&assignment, &dir.join("clusters.json"))?;
            let (model, history) = steps::train_model(
                one,
                &assignment,
                cfg.preprocess.window,
                cfg.preprocess.stride,
                &cfg.model,
                cfg.seed,
            )?;
            let model = model.with_norm(norms[&key].clone());
            model.save(&dir.join("model.json"))?;
            steps::write_history(&history, &dir.join("history.csv"))?;
            results.push((key, detect_grid(&cfg, &model, table, &dir)?));
        }
    }

    let series: Vec<AttributionSeries> = results.iter().map(|(_, (s, _))| s.clone()).collect();
    steps::write_json(&rank_features(&series, series.len())?, &out_dir.join("ranking.json"))?;
    let flags: Vec<(String, ThresholdSeries)> = results.into_iter().map(|(k, (_, f))| (k, f)).collect();
    let rows = decadal_counts(&flags, &season_months(&cfg, None))?;
    steps::write_bytes(&out_dir.join("decadal.csv"), |buf| DecadalRow::write_csv(&rows, buf))
}
