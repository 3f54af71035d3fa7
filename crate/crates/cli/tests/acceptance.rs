//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use anomattr::attribution::{
    attribute, rank_counts, rank_features, AttributionConfig, Direction, Reference, WindowScorer,
};
use anomattr::clustering::{correlation_matrix, select_k};
use anomattr::clv::{build_model, score_series, train, BatchObjective, ClvNet, ModelCheckpoint, ScoreSeries, TrainConfig};
use anomattr::eval::{classify, classify_topk, metrics, ranking_from_names, roc_auc, welch_ttest, ClassifierConfig};
use anomattr::nn::{grad_check, grad_check_with_floor};
use anomattr::nn::vae::{gaussian_nll, kl_divergence};
use anomattr::nn::LatentDist;
use anomattr::preprocess::{window, zscore, WindowSet};
use anomattr::special::student_t_two_sided;
use anomattr::synth::{generate, GroundTruth, SynthConfig};
use anomattr::threshold::{dynamic_threshold, fit_gpd_moments, segment_plan, ThresholdConfig};
use anomattr::TimeTable;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Check {
    Check { pass, detail }
}

/// Window length used for the detection runs; see the README for T = 14.
const DETECT_T: usize = 5;

fn train_config() -> TrainConfig {
    TrainConfig {
        epochs: 10,
        patience: 5,
        batch: 64,
        lr: 0.005,
        val_fraction: 0.1,
        seed: 42,
    }
}

struct Detection {
    table: TimeTable,
    truth: GroundTruth,
    windows: WindowSet,
    model: ModelCheckpoint,
    scores: ScoreSeries,
}

/// cluster → train → score on normalised synthetic data.
fn detect(synth: &SynthConfig, t: usize) -> Detection {
    let (raw, truth) = generate(synth).unwrap();
    let (table, _) = zscore(&raw, None).unwrap();
    let assignment = select_k(&correlation_matrix(&table).unwrap(), 1, 5, 42).unwrap();
    let windows = window(&table, t, 1).unwrap();
    let init = build_model(&assignment, table.feature_names(), t, 16, 4, 42).unwrap();
    let (model, _) = train(&init, &windows, &train_config()).unwrap();
    let scores = score_series(&model, &windows).unwrap();
    Detection {
        table,
        truth,
        windows,
        model,
        scores,
    }
}

fn labels_at_origins(d: &Detection) -> Vec<bool> {
    d.windows.origin_index().iter().map(|&r| d.truth.labels[r]).collect()
}

fn main_run() -> &'static Detection {
    static RUN: OnceLock<Detection> = OnceLock::new();
    RUN.get_or_init(|| detect(&SynthConfig::default(), DETECT_T))
}

fn gradient_integrity() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_fixed: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = rng.random_range(2..=5);
        let k = rng.random_range(1..=f.min(3));
        let mut labels: Vec<usize> = (0..f).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        labels.shuffle(&mut rng);
        let clusters: Vec<Vec<usize>> = (0..k).map(|c| (0..f).filter(|&i| labels[i] == c).collect()).collect();
        let t = rng.random_range(2..=4);
        let width = rng.random_range(2..=4);
        let latents: Vec<usize> = (0..k).map(|_| rng.random_range(1..=3)).collect();
        let net = ClvNet::new(clusters, f, t, width, latents.clone()).unwrap();
        let params = net.init(&mut rng);
        let windows: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..t * f).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let noise = (0..2)
            .map(|_| (0..latents.iter().sum::<usize>()).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let obj = BatchObjective {
            net: &net,
            windows: windows.iter().map(Vec::as_slice).collect(),
            noise: Some(noise),
        };
        worst = worst.max(grad_check(&obj, &params, 1e-5).unwrap());
        worst_fixed = worst_fixed.max(grad_check_with_floor(&obj, &params, 1e-5, Some(1e-6)).unwrap());
    }
    let elapsed = start.elapsed();
    check(
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "max relative error {worst:.2e} over 100 networks in {:.1} s (fixed 1e-6 floor: {worst_fixed:.2e}, f64 round-off of the central difference)",
            elapsed.as_secs_f64()
        ),
    )
}

fn elbo_analytics() -> Check {
    let kl0 = kl_divergence(&LatentDist::new(vec![0.0], vec![0.0]).unwrap());
    let kl1 = kl_divergence(&LatentDist::new(vec![1.0], vec![0.0]).unwrap());
    let mut nll_err: f64 = 0.0;
    for d in [1usize, 3, 14, 112] {
        let x: Vec<f64> = (0..d).map(|i| (i as f64).sin()).collect();
        nll_err = nll_err.max((gaussian_nll(&x, &x) - d as f64 * 0.5 * (2.0 * PI).ln()).abs());
    }
    check(
        kl0 == 0.0 && (kl1 - 0.5).abs() <= 1e-12 && nll_err <= 1e-12,
        format!("kl(0,0) = {kl0}, kl(1,0) = {kl1}, nll error {nll_err:.1e}"),
    )
}

fn detection_power() -> Check {
    let start = Instant::now();
    let run = main_run();
    let auc = roc_auc(&run.scores.scores, &labels_at_origins(run)).unwrap();
    let elapsed = start.elapsed();
    let long = detect(&SynthConfig::default(), 14);
    let long_auc = roc_auc(&long.scores.scores, &labels_at_origins(&long)).unwrap();
    check(
        auc >= 0.90 && elapsed < Duration::from_secs(300),
        format!(
            "ROC-AUC {auc:.4} at T = {DETECT_T}, k = {} ({:.1} s); T = 14 gives {long_auc:.4} for reference",
            run.model.n_clusters(),
            elapsed.as_secs_f64()
        ),
    )
}

/// Delegates to a checkpoint and counts scoring calls.
struct Counting<'a> {
    inner: &'a ModelCheckpoint,
    calls: AtomicUsize,
}

impl WindowScorer for Counting<'_> {
    fn window_length(&self) -> usize {
        self.inner.window_length
    }

    fn feature_names(&self) -> &[String] {
        &self.inner.feature_names
    }

    fn score_windows(&self, windows: &WindowSet) -> anomattr::Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.score_windows(windows)
    }
}

fn attribution_recovery() -> Check {
    let run = main_run();
    let flags = dynamic_threshold(&run.scores, &ThresholdConfig::default()).unwrap();
    let counting = Counting {
        inner: &run.model,
        calls: AtomicUsize::new(0),
    };
    let cfg = AttributionConfig {
        direction: Direction::NegativeDelta,
        ..Default::default()
    };
    let series = attribute(&counting, &run.table, &run.scores, &flags, &cfg).unwrap();
    let calls = counting.calls.load(Ordering::SeqCst);

    let (mut hits, mut total) = (0, 0);
    for (w, &row) in run.windows.origin_index().iter().enumerate() {
        if flags.flag[w] && run.truth.labels[row] {
            total += 1;
            if series.winner_name(w).is_some_and(|n| run.truth.culprits[&row].iter().any(|c| c == n)) {
                hits += 1;
            }
        }
    }
    let rate = if total > 0 { hits as f64 / total as f64 } else { 0.0 };

    let identity = AttributionConfig {
        reference: Reference::Identity,
        all_timestamps: true,
        ..cfg
    };
    let zero = attribute(&run.model, &run.table, &run.scores, &flags, &identity).unwrap();
    let max_identity = zero.delta.iter().flatten().fold(0.0f64, |m, d| m.max(d.abs()));
    let f = run.table.n_features();
    check(
        total > 0 && rate >= 0.8 && max_identity <= 1e-9 && calls == f && series.passes == f,
        format!(
            "culprit recovered on {hits}/{total} flagged true positives ({:.0}%), identity |delta| <= {max_identity:.1e}, {calls} scoring passes for {f} features",
            100.0 * rate
        ),
    )
}

fn pot_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (xi, sigma) = (0.1, 1.0);
    let samples: Vec<f64> = (0..10_000)
        .map(|_| {
            let u: f64 = rng.random();
            sigma / xi * ((1.0 - u).powf(-xi) - 1.0)
        })
        .collect();
    let (shape, scale) = fit_gpd_moments(&samples).unwrap();
    let fit_ok = (shape - xi).abs() <= 0.15 && (scale - sigma).abs() <= 0.15 * sigma;

    let noise: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
    let start = chrono::NaiveDate::from_ymd_opt(2000, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let ts = (0..noise.len()).map(|i| start + chrono::Duration::days(i as i64)).collect();
    let scores = ScoreSeries::new(ts, noise).unwrap();
    let cfg = ThresholdConfig {
        window: 1000,
        ..Default::default()
    };
    let flags = dynamic_threshold(&scores, &cfg).unwrap();
    let rate = flags.n_flagged() as f64 / flags.len() as f64;
    let rate_ok = (cfg.risk_q / 3.0..=3.0 * cfg.risk_q).contains(&rate);

    let mut coverage_ok = true;
    for len in (60..3000).step_by(37) {
        for w in (60..=len).step_by(53) {
            let mut hits = vec![0u8; len];
            for s in segment_plan(len, w).unwrap() {
                assert!(s.governs.start >= s.fit.start && s.governs.end <= s.fit.end);
                s.governs.for_each(|i| hits[i] += 1);
            }
            coverage_ok &= hits.iter().all(|&h| h == 1);
        }
    }
    check(
        fit_ok && rate_ok && coverage_ok,
        format!(
            "xi {shape:.4} (true 0.1), sigma {scale:.4} (true 1), flag rate {rate:.4} at window {}, coverage exact: {coverage_ok}",
            cfg.window
        ),
    )
}

const T_TABLE: [(f64, f64, f64); 20] = [
    (0.0, 5.0, 1.0),
    (0.5, 1.0, 0.704_832_764_699_133_451_65),
    (1.0, 1.0, 0.5),
    (1.549_193_338, 2.941_176_471, 0.220_880_840_590_808_099_39),
    (2.0, 3.0, 0.139_325_968_558_843_176_85),
    (-2.0, 3.0, 0.139_325_968_558_843_176_85),
    (3.3539, 120.0, 0.001_066_820_621_642_267_722_9),
    (1.3839, 60.0, 0.171_515_714_054_431_226_01),
    (0.1, 10.0, 0.922_320_718_564_408_315_18),
    (4.5, 7.5, 0.002_354_323_279_302_136_971_8),
    (10.0, 2.0, 0.009_852_457_023_325_690_846_7),
    (2.5, 30.0, 0.018_115_649_068_066_694_102),
    (6.0, 50.0, 2.188_939_485_079_992_715_3e-7),
    (0.75, 1.5, 0.553_031_479_089_063_569_87),
    (1.96, 1000.0, 0.050_273_184_955_748_718_435),
    (3.0, 4.2, 0.037_532_460_396_866_293_845),
    (-1.2, 17.3, 0.246_315_203_670_160_219_11),
    (0.01, 0.5, 0.994_606_743_636_104_496_46),
    (8.0, 12.0, 3.759_898_224_750_257_283_1e-6),
    (2.2, 250.0, 0.028_722_281_890_453_053_157),
];

fn statistics_oracles() -> Check {
    let r = welch_ttest(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
    // Means 4 and 2, sample variances 4 and 1, three observations each.
    let (va, vb) = (4.0 / 3.0, 1.0 / 3.0);
    let t_hand = 2.0 / f64::sqrt(va + vb);
    let dof_hand = (va + vb) * (va + vb) / (va * va / 2.0 + vb * vb / 2.0);
    let welch_ok = (r.t_stat - t_hand).abs() <= 1e-3 && (r.dof - dof_hand).abs() <= 1e-3;

    let same = welch_ttest(&[1.0, 2.0, 3.5], &[1.0, 2.0, 3.5]).unwrap();
    let same_ok = same.t_stat == 0.0 && same.p_value == 1.0;

    let worst = T_TABLE
        .iter()
        .map(|&(t, dof, p)| (student_t_two_sided(t, dof) - p).abs())
        .fold(0.0f64, f64::max);
    check(
        welch_ok && same_ok && worst <= 1e-8,
        format!(
            "t = {:.6} (hand {t_hand:.6}), dof = {:.6} (hand {dof_hand:.6}), identical samples t = {} p = {}, max p error {worst:.1e} over {} cases",
            r.t_stat,
            r.dof,
            same.t_stat,
            same.p_value,
            T_TABLE.len()
        ),
    )
}

fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &pi) in labels.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, &pj) in labels.iter().enumerate() {
            if pj {
                continue;
            }
            pairs += 1;
            twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn metrics_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cases = 0;
    let mut mismatches = 0;
    for _ in 0..500 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..=50);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        cases += 1;
        if roc_auc(&scores, &labels).unwrap() != brute_force_auc(&scores, &labels) {
            mismatches += 1;
        }
    }
    let labels = [true, false, true, true, false, false, true];
    let perfect: Vec<f64> = labels.iter().map(|&l| if l { 0.9 } else { 0.1 }).collect();
    let m = metrics(&perfect, &labels, 0.5).unwrap();
    let perfect_ok = [m.precision, m.recall, m.f1, m.pr_auc, m.roc_auc].iter().all(|&v| v == 1.0);
    check(
        mismatches == 0 && perfect_ok,
        format!("{mismatches} of {cases} seeded inputs differ from brute force; perfect classifier {m:?}"),
    )
}

fn evaluation_protocol() -> Check {
    let start = Instant::now();
    let synth = SynthConfig {
        length: 3000,
        anomaly_rate: 0.05,
        culprit_pool: vec![2, 6],
        ..Default::default()
    };
    let run = detect(&synth, DETECT_T);
    let flags = dynamic_threshold(&run.scores, &ThresholdConfig::default()).unwrap();
    let cfg = AttributionConfig {
        direction: Direction::NegativeDelta,
        ..Default::default()
    };
    let series = attribute(&run.model, &run.table, &run.scores, &flags, &cfg).unwrap();
    let ranked = rank_features(&[series], 1).unwrap();
    let k = 2;
    let classifier = ClassifierConfig::default();
    let labels = &run.truth.labels;
    let all = classify(&run.table, labels, &classifier, 42).unwrap().f1;
    let top = classify_topk(&run.table, labels, &ranked, k, &classifier, 42).unwrap().f1;
    let mut wins = 0;
    let mut random_f1 = Vec::new();
    for rep in 0..5u64 {
        let mut names = run.table.feature_names().to_vec();
        names.shuffle(&mut ChaCha8Rng::seed_from_u64(rep));
        let random = ranking_from_names(&names).unwrap();
        let f1 = classify_topk(&run.table, labels, &random, k, &classifier, 42).unwrap().f1;
        wins += usize::from(top > f1);
        random_f1.push(format!("{f1:.3}"));
    }
    let elapsed = start.elapsed();
    check(
        (top - all).abs() <= 0.05 && wins >= 3 && elapsed < Duration::from_secs(300),
        format!(
            "top-{k} {:?} F1 {top:.3}, all features F1 {all:.3}, random F1 [{}] beaten {wins}/5 ({:.0} s)",
            ranked.names()[..k].to_vec(),
            random_f1.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn frequency_normalisation() -> Check {
    let counts = BTreeMap::from([("ssrd".to_string(), 6676), ("t2m".to_string(), 1000)]);
    let ranked = rank_counts(&counts, 924).unwrap();
    let top = &ranked.entries[0];
    check(
        top.feature == "ssrd" && (top.frequency - 7.2251).abs() <= 1e-4,
        format!("ssrd: 6676 / 924 = {:.6}", top.frequency),
    )
}

const BIN: &str = env!("CARGO_BIN_EXE_anomattr");

fn cli(dir: &Path, args: &[&str]) {
    let out = Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("ANOMATTR_LOG", "error")
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn tree_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("c.json"),
        r#"{"seed": 11,
            "model": {"epochs": 3, "encoder_width": 8, "latent_dim": 2},
            "preprocess": {"window": 5},
            "attribution": {"direction": "negative-delta"},
            "classifier": {"hidden": [8, 4], "epochs": 3, "batch": 32},
            "synth": {"length": 900, "anomaly_rate": 0.04}}"#,
    )
    .unwrap();
    let base = ["--config", "c.json", "--seed", "11"];
    let mut same = Vec::new();
    let mut differ = Vec::new();
    for run in ["1", "2"] {
        // The second run also changes the worker count.
        let jobs = if run == "1" { "1" } else { "2" };
        let o = |name: &str| {
            let (stem, ext) = name.split_once('.').unwrap_or((name, ""));
            if ext.is_empty() { format!("{stem}{run}") } else { format!("{stem}{run}.{ext}") }
        };
        let steps: Vec<Vec<String>> = vec![
            vec!["synth".into(), "--out".into(), o("d.csv")],
            vec!["preprocess".into(), "--input".into(), "d1.csv".into(), "--norm-out".into(), o("n.json"), "--out".into(), o("p.csv")],
            vec!["cluster".into(), "--input".into(), "p1.csv".into(), "--out".into(), o("k.json")],
            vec!["train".into(), "--input".into(), "p1.csv".into(), "--clusters".into(), "k1.json".into(), "--history".into(), o("h.csv"), "--out".into(), o("m.json")],
            vec!["score".into(), "--input".into(), "p1.csv".into(), "--model".into(), "m1.json".into(), "--out".into(), o("s.csv")],
            vec!["threshold".into(), "--scores".into(), "s1.csv".into(), "--out".into(), o("f.csv")],
            vec!["attribute".into(), "--input".into(), "p1.csv".into(), "--model".into(), "m1.json".into(), "--scores".into(), "s1.csv".into(), "--flags".into(), "f1.csv".into(), "--out".into(), o("a.csv")],
            vec!["rank".into(), "--attributions".into(), "a1.csv".into(), "--out".into(), o("r.json")],
            vec!["evaluate".into(), "--input".into(), "p1.csv".into(), "--labels".into(), "d1.truth.json".into(), "--ranking".into(), "mine=r1.json".into(), "--random".into(), "2".into(), "--k".into(), "2".into(), "--out".into(), o("e.csv")],
            vec!["ttest".into(), "--flags".into(), "f1.csv".into(), "--period-a".into(), "2000-2000".into(), "--period-b".into(), "2001-2002".into(), "--out".into(), o("t.json")],
            vec!["decadal".into(), "--flags".into(), "f1.csv".into(), "--out".into(), o("y.csv")],
            vec!["pipeline".into(), "--out".into(), o("run")],
        ];
        for step in steps {
            let mut args: Vec<&str> = base.to_vec();
            args.extend(["--jobs", jobs]);
            args.extend(step.iter().map(String::as_str));
            cli(d, &args);
        }
    }
    for name in [
        "d.csv", "d.truth.json", "n.json", "p.csv", "k.json", "h.csv", "m.json", "s.csv", "f.csv", "a.csv", "r.json",
        "e.csv", "t.json", "y.csv",
    ] {
        let (stem, ext) = name.split_once('.').unwrap();
        let a = fs::read(d.join(format!("{stem}1.{ext}"))).unwrap();
        let b = fs::read(d.join(format!("{stem}2.{ext}"))).unwrap();
        if a == b { same.push(name) } else { differ.push(name) }
    }
    let pipeline_same = tree_bytes(&d.join("run1")) == tree_bytes(&d.join("run2"));
    check(
        differ.is_empty() && pipeline_same,
        format!(
            "12 subcommands rerun: {} outputs identical, differing {:?}, pipeline tree identical: {pipeline_same}",
            same.len() + usize::from(pipeline_same),
            differ
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("gradient integrity", gradient_integrity),
        ("ELBO analytics", elbo_analytics),
        ("detection power", detection_power),
        ("attribution recovery", attribution_recovery),
        ("POT correctness", pot_correctness),
        ("statistics oracles", statistics_oracles),
        ("metrics oracles", metrics_oracles),
        ("evaluation protocol", evaluation_protocol),
        ("frequency normalisation", frequency_normalisation),
        ("determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            check(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "{} {:>2} {name}: {}",
            if result.pass { "PASS" } else { "FAIL" },
            i + 1,
            result.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
