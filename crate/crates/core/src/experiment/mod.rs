//! Config-driven experiment runner behind the command-line subcommands.

mod verify;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::federation::CommLedger;
use crate::metrics::{config_hash, emit_report, export_embeddings, read_report, RunRecord};
use crate::nn::{CutSpec, LayerSpec, LayerStack, Task};
use crate::partition::{
    calibrate_skew, load_csv, make_iid_partition, make_label_group_partition,
    make_label_skew_partition, make_quantity_skew_partition, mean_pairwise_ks, pairwise_ks,
    synth_regression, BlobParams, CsvSchema, Dataset, Partition, SkewSpec,
};
use crate::rng::SeedStreams;
use crate::strategies::{CompositeModel, Simulation, StrategyConfig};

pub use verify::{cmd_verify, CheckResult, VerifyOptions, VerifyReport};

pub const DEFAULT_EPOCHS: usize = 30;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;
/// Share of the training split held out for early stopping.
pub const VALIDATION_FRACTION: f64 = 0.1;

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}

fn default_test_fraction() -> f64 {
    DEFAULT_TEST_FRACTION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Layer tag whose activations are exported after training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<String>,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub strategy: StrategyConfig,
    pub partition: PartitionSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        #[serde(default = "blob_n")]
        n: usize,
        #[serde(default = "two")]
        classes: usize,
        #[serde(default = "blob_dims")]
        dims: usize,
        #[serde(default = "blob_separation")]
        separation: f64,
        #[serde(default = "one")]
        modes: usize,
    },
    Regression {
        #[serde(default = "blob_n")]
        n: usize,
        #[serde(default = "blob_dims")]
        dims: usize,
        #[serde(default = "regression_noise")]
        noise: f64,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        task: CsvTask,
        /// Required for classification.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<usize>,
        #[serde(default = "label_column")]
        label_column: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        feature_dims: Option<Vec<usize>>,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsvTask {
    #[default]
    Classification,
    Regression,
}

fn blob_n() -> usize {
    2000
}

fn two() -> usize {
    2
}

fn one() -> usize {
    1
}

fn blob_dims() -> usize {
    8
}

fn blob_separation() -> f64 {
    3.0
}

fn regression_noise() -> f64 {
    0.1
}

fn label_column() -> String {
    "label".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
}

/// How the training split is divided. At most one of the optional keys may
/// be set; none gives an IID split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub institutions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_ks: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skew_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<usize>>,
    /// Explicit training-split indices per institution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignments: Option<Vec<Vec<usize>>>,
    /// Label bins owned by each institution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_groups: Option<Vec<Vec<usize>>>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| FedError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative dataset paths resolve
    /// against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            FedError::Config(m) => FedError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let DatasetSpec::Csv { path: csv, .. } = &mut cfg.dataset {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(FedError::Config(format!("{key}: {msg}")));
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(
                "test_fraction",
                format!("must be in (0, 1), got {}", self.test_fraction),
            );
        }
        if self.model.layers.is_empty() {
            return bad("model.layers", "at least one layer is required".into());
        }
        match &self.dataset {
            DatasetSpec::Blobs {
                n,
                classes,
                dims,
                separation,
                modes,
            } => {
                if *classes < 2 {
                    return bad("dataset.classes", format!("need at least 2, got {classes}"));
                }
                if *dims == 0 {
                    return bad("dataset.dims", "must be positive".into());
                }
                if *modes == 0 {
                    return bad("dataset.modes", "must be positive".into());
                }
                if !(separation.is_finite() && *separation >= 0.0) {
                    return bad(
                        "dataset.separation",
                        format!("must be finite and non-negative, got {separation}"),
                    );
                }
                if *n < 10 * classes {
                    return bad(
                        "dataset.n",
                        format!("need at least {} samples, got {n}", 10 * classes),
                    );
                }
            }
            DatasetSpec::Regression { n, dims, noise } => {
                if *dims == 0 {
                    return bad("dataset.dims", "must be positive".into());
                }
                if *n < 10 {
                    return bad("dataset.n", format!("need at least 10 samples, got {n}"));
                }
                if !(noise.is_finite() && *noise >= 0.0) {
                    return bad(
                        "dataset.noise",
                        format!("must be finite and non-negative, got {noise}"),
                    );
                }
            }
            DatasetSpec::Csv { task, classes, .. } => match (task, classes) {
                (CsvTask::Classification, None) => {
                    return bad(
                        "dataset.classes",
                        "required for classification csv data".into(),
                    )
                }
                (CsvTask::Classification, Some(c)) if *c < 2 => {
                    return bad("dataset.classes", format!("need at least 2, got {c}"))
                }
                (CsvTask::Regression, Some(_)) => {
                    return bad("dataset.classes", "not used for regression".into())
                }
                _ => {}
            },
        }
        let p = &self.partition;
        if p.institutions == 0 {
            return bad("partition.institutions", "must be at least 1".into());
        }
        let set = [
            p.target_ks.is_some(),
            p.skew_fraction.is_some(),
            p.sizes.is_some(),
            p.assignments.is_some(),
            p.label_groups.is_some(),
        ];
        if set.iter().filter(|&&b| b).count() > 1 {
            return bad(
                "partition",
                "set at most one of target_ks, skew_fraction, sizes, assignments, label_groups"
                    .into(),
            );
        }
        if let Some(t) = p.target_ks {
            if !(0.0..=1.0).contains(&t) {
                return bad("partition.target_ks", format!("must be in [0, 1], got {t}"));
            }
        }
        if let Some(s) = p.skew_fraction {
            if !(0.0..=1.0).contains(&s) {
                return bad(
                    "partition.skew_fraction",
                    format!("must be in [0, 1], got {s}"),
                );
            }
        }
        if let Some(sizes) = &p.sizes {
            if sizes.len() != p.institutions {
                return bad(
                    "partition.sizes",
                    format!(
                        "{} entries for {} institutions",
                        sizes.len(),
                        p.institutions
                    ),
                );
            }
        }
        for (key, lists) in [
            ("partition.assignments", &p.assignments),
            ("partition.label_groups", &p.label_groups),
        ] {
            if let Some(a) = lists {
                if a.len() != p.institutions {
                    return bad(
                        key,
                        format!("{} lists for {} institutions", a.len(), p.institutions),
                    );
                }
            }
        }
        if let Some(st) = self.strategy.institutions_per_round {
            if st > p.institutions {
                return bad(
                    "strategy.institutions_per_round",
                    format!("{st} exceeds partition.institutions = {}", p.institutions),
                );
            }
        }
        if let Some(tag) = &self.embeddings {
            if tag.is_empty() {
                return bad("embeddings", "layer tag is empty".into());
            }
        }
        self.strategy.validate()
    }

    /// Stable hash of everything that affects a run except the seed list
    /// and output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        c.seeds.clear();
        config_hash(&toml::to_string(&c).expect("config serializes"))
    }

    pub fn task(&self) -> Task {
        match &self.dataset {
            DatasetSpec::Blobs { classes, .. } => Task::Classification { classes: *classes },
            DatasetSpec::Regression { .. } => Task::Regression,
            DatasetSpec::Csv { task, classes, .. } => match task {
                CsvTask::Classification => Task::Classification {
                    classes: classes.unwrap_or(2),
                },
                CsvTask::Regression => Task::Regression,
            },
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Worker threads for independent seeds (or cuts); 0 or 1 runs serially.
    pub parallel_seeds: usize,
}

impl RunOptions {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
    }
}

/// Data, split and model for one seed, before any training.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub validation: Option<Dataset>,
    pub partition: Partition,
    pub partition_ks: f64,
    pub skew_fraction: Option<f64>,
    pub model: LayerStack,
    pub streams: SeedStreams,
}

pub fn load_dataset(spec: &DatasetSpec, streams: &SeedStreams) -> Result<Dataset> {
    match spec {
        DatasetSpec::Blobs {
            n,
            classes,
            dims,
            separation,
            modes,
        } => BlobParams {
            n: *n,
            classes: *classes,
            dims: *dims,
            separation: *separation,
            modes: *modes,
            seed: streams.derive("data", 0),
        }
        .generate(),
        DatasetSpec::Regression { n, dims, noise } => {
            synth_regression(*n, *dims, *noise, streams.derive("data", 0))
        }
        DatasetSpec::Csv {
            path,
            task,
            classes,
            label_column,
            feature_dims,
        } => {
            let task = match task {
                CsvTask::Classification => Task::Classification {
                    classes: classes.unwrap_or(2),
                },
                CsvTask::Regression => Task::Regression,
            };
            let schema = CsvSchema {
                label_column: label_column.clone(),
                task,
                feature_dims: feature_dims.clone(),
            };
            load_csv(path, &schema)
        }
    }
}

pub fn build_partition(
    train: &Dataset,
    spec: &PartitionSpec,
    streams: &SeedStreams,
) -> Result<(Partition, Option<f64>)> {
    let seed = streams.derive("partition", 0);
    let k = spec.institutions;
    if let Some(t) = spec.target_ks {
        let cal = calibrate_skew(train, k, t, seed)?;
        if !cal.within_tolerance {
            log::warn!(
                "partition.target_ks {t}: closest achievable mean KS is {:.3}",
                cal.achieved_ks
            );
        }
        let p = make_label_skew_partition(train, &cal.spec)?;
        return Ok((p, Some(cal.spec.skew_fraction)));
    }
    if let Some(s) = spec.skew_fraction {
        let p = make_label_skew_partition(train, &SkewSpec::balanced(train, k, s, seed))?;
        return Ok((p, Some(s)));
    }
    if let Some(sizes) = &spec.sizes {
        return Ok((make_quantity_skew_partition(train, sizes, seed)?, None));
    }
    if let Some(a) = &spec.assignments {
        return Ok((Partition::new(a.clone(), train.len())?, None));
    }
    if let Some(g) = &spec.label_groups {
        return Ok((make_label_group_partition(train, g)?, None));
    }
    Ok((make_iid_partition(train, k, seed)?, None))
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let streams = SeedStreams::new(seed);
    let data = load_dataset(&cfg.dataset, &streams)?;
    if data.task() != cfg.task() {
        return Err(FedError::Config(format!(
            "dataset: loaded task {:?} differs from configured {:?}",
            data.task(),
            cfg.task()
        )));
    }
    let (mut train, test) =
        data.train_test_split(cfg.test_fraction, &mut streams.stream("split"))?;
    let mut validation = None;
    if cfg.strategy.patience.is_some() {
        let (t, v) =
            train.train_test_split(VALIDATION_FRACTION, &mut streams.stream("validation"))?;
        train = t;
        validation = Some(v);
    }
    let (partition, skew_fraction) = build_partition(&train, &cfg.partition, &streams)?;
    let partition_ks = if partition.institutions() > 1 {
        mean_pairwise_ks(&train, &partition)?
    } else {
        0.0
    };
    let model = LayerStack::build(
        train.feature_dims(),
        &cfg.model.layers,
        Some(cfg.task()),
        &mut streams.stream("init"),
    )
    .map_err(|e| match e {
        FedError::Config(m) => FedError::Config(format!("model.layers: {m}")),
        other => other,
    })?;
    Ok(Prepared {
        train,
        test,
        validation,
        partition,
        partition_ks,
        skew_fraction,
        model,
        streams,
    })
}

/// Everything one seed's run produced.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub record: RunRecord,
    pub ledger: CommLedger,
    pub model: CompositeModel,
    pub test: Dataset,
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let start = Instant::now();
    let prep = prepare(cfg, seed)?;
    let mut sim = Simulation::new(
        cfg.strategy.clone(),
        prep.model,
        prep.train,
        &prep.partition,
        &prep.streams,
    )?;
    let epochs_run = sim.train(cfg.epochs, prep.validation.as_ref())?;
    let model = sim.finish()?;
    let metrics = sim.evaluate(&prep.test)?;
    if !metrics.primary().is_finite() || metrics.loss_curve.iter().any(|l| !l.is_finite()) {
        return Err(FedError::Numeric {
            layer: "output".into(),
        });
    }
    log::info!(
        "seed {seed}: {} {} = {:.4} after {epochs_run} epochs",
        cfg.strategy.kind,
        metrics.metric_name(),
        metrics.primary()
    );
    Ok(SeedRun {
        record: RunRecord {
            config_hash: cfg.hash(),
            seed,
            strategy: cfg.strategy.kind.to_string(),
            partition_ks: prep.partition_ks,
            metrics,
            epochs_run,
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
        ledger: sim.ledger().clone(),
        model,
        test: prep.test,
    })
}

/// Maps `f` over `items` on up to `threads` scoped threads, keeping order.
pub fn par_map<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("slot lock")
                .expect("every slot filled")
        })
        .collect()
}

pub fn run_experiment(cfg: &ExperimentConfig, parallel: usize) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    par_map(&cfg.seeds, parallel, |&s| run_seed(cfg, s))
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub records: Vec<RunRecord>,
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

impl fmt::Display for RunOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>6} {:>8} {:>10} {:>7} {:>14}",
            "strategy", "seed", "ks", "metric", "epochs", "uplink"
        )?;
        for r in &self.records {
            writeln!(
                f,
                "{:<12} {:>6} {:>8.4} {:>10.4} {:>7} {:>14}",
                r.strategy,
                r.seed,
                r.partition_ks,
                r.metrics.primary(),
                r.epochs_run,
                r.metrics.comm_totals.uplink
            )?;
        }
        write!(f, "wrote {}", self.out_dir.display())
    }
}

pub fn default_out_dir() -> PathBuf {
    PathBuf::from("fedsplit-out")
}

/// Trains every configured seed and writes `results.json`, `results.csv`,
/// `ledger.csv` (plus `ledger.json`) and, when requested, `embeddings.csv`.
/// With several seeds, per-seed ledgers and embeddings carry a `_seed<N>`
/// suffix and the unsuffixed files belong to the first seed.
pub fn cmd_run(config_path: impl AsRef<Path>, opts: &RunOptions) -> Result<RunOutcome> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    opts.apply(&mut cfg);
    cfg.validate()?;
    let runs = run_experiment(&cfg, opts.parallel_seeds)?;
    let out_dir = cfg.out.clone().unwrap_or_else(default_out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| FedError::io(&out_dir, e))?;

    let records: Vec<RunRecord> = runs.iter().map(|r| r.record.clone()).collect();
    let (json, csv) = emit_report(&records, &out_dir)?;
    let mut files = vec![json, csv];
    for (i, run) in runs.iter().enumerate() {
        let mut suffixes = Vec::new();
        if i == 0 {
            suffixes.push(String::new());
        }
        if runs.len() > 1 {
            suffixes.push(format!("_seed{}", run.record.seed));
        }
        for sfx in suffixes {
            let p = out_dir.join(format!("ledger{sfx}.csv"));
            run.ledger.write_csv(&p)?;
            files.push(p);
            let p = out_dir.join(format!("ledger{sfx}.json"));
            run.ledger.write_summary_json(&p)?;
            files.push(p);
            if let Some(tag) = &cfg.embeddings {
                let p = out_dir.join(format!("embeddings{sfx}.csv"));
                let models = run.model.models()?;
                export_embeddings(&models[0], &run.test, tag, &p)?;
                files.push(p);
            }
        }
    }
    Ok(RunOutcome {
        records,
        out_dir,
        files,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionReport {
    pub institutions: usize,
    pub sizes: Vec<usize>,
    pub mean_ks: f64,
    pub matrix: Vec<Vec<f64>>,
    pub skew_fraction: Option<f64>,
}

impl fmt::Display for PartitionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "institutions: {}", self.institutions)?;
        let sizes: Vec<String> = self.sizes.iter().map(|s| s.to_string()).collect();
        writeln!(f, "sizes: {}", sizes.join(" "))?;
        if let Some(s) = self.skew_fraction {
            writeln!(f, "skew fraction: {s:.4}")?;
        }
        writeln!(f, "mean KS: {:.4}", self.mean_ks)?;
        write!(f, "{:>6}", "")?;
        for j in 0..self.institutions {
            write!(f, " {:>6}", j)?;
        }
        for (i, row) in self.matrix.iter().enumerate() {
            write!(f, "\n{:>6}", i)?;
            for v in row {
                write!(f, " {:>6.3}", v)?;
            }
        }
        Ok(())
    }
}

pub fn partition_report(cfg: &ExperimentConfig, seed: u64) -> Result<PartitionReport> {
    let prep = prepare(cfg, seed)?;
    let matrix = if prep.partition.institutions() > 1 {
        pairwise_ks(&prep.train, &prep.partition)?
    } else {
        vec![vec![0.0]]
    };
    Ok(PartitionReport {
        institutions: prep.partition.institutions(),
        sizes: prep.partition.sizes(),
        mean_ks: prep.partition_ks,
        matrix,
        skew_fraction: prep.skew_fraction,
    })
}

pub fn cmd_partition(config_path: impl AsRef<Path>, opts: &RunOptions) -> Result<PartitionReport> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    opts.apply(&mut cfg);
    cfg.validate()?;
    partition_report(&cfg, cfg.seeds[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepFlag {
    Ok,
    Degraded,
    Failed,
}

impl fmt::Display for SweepFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepFlag::Ok => "ok",
            SweepFlag::Degraded => "DEGRADED",
            SweepFlag::Failed => "FAILED",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cut: usize,
    pub layer: String,
    pub metric: f64,
    pub institution_params: usize,
    pub server_params: usize,
    pub flag: SweepFlag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub metric_name: &'static str,
    /// Metric of a label-agnostic predictor on the test split.
    pub chance: f64,
    pub rows: Vec<SweepRow>,
}

/// A row is degraded when more than this fraction worse than the best row.
pub const SWEEP_DEGRADED_GAP: f64 = 0.02;
/// A row is failed when its metric is within this fraction of chance.
pub const SWEEP_CHANCE_MARGIN: f64 = 0.05;

impl SweepReport {
    fn higher_is_better(&self) -> bool {
        self.metric_name == "accuracy"
    }

    pub fn best(&self) -> Option<&SweepRow> {
        let ok = self.rows.iter().filter(|r| r.flag != SweepFlag::Failed);
        if self.higher_is_better() {
            ok.max_by(|a, b| a.metric.total_cmp(&b.metric))
        } else {
            ok.min_by(|a, b| a.metric.total_cmp(&b.metric))
        }
    }

    /// Smallest cut whose institution half holds learnable weights.
    pub fn earliest_parameterized(&self) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.institution_params > 0)
    }

    /// Relative shortfall of `row` against the best row.
    pub fn gap_to_best(&self, row: &SweepRow) -> f64 {
        let Some(best) = self.best() else {
            return f64::NAN;
        };
        if self.higher_is_better() {
            (best.metric - row.metric) / best.metric.abs().max(f64::MIN_POSITIVE)
        } else {
            (row.metric - best.metric) / best.metric.abs().max(f64::MIN_POSITIVE)
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!(
            "cut,layer,{},institution_params,server_params,flag\n",
            self.metric_name
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.cut, r.layer, r.metric, r.institution_params, r.server_params, r.flag
            ));
        }
        std::fs::write(path, out).map_err(|e| FedError::io(path, e))
    }
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>4} {:<10} {:>10} {:>10} {:>10}  flag",
            "cut", "layer", self.metric_name, "fi_params", "fs_params"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>4} {:<10} {:>10.4} {:>10} {:>10}  {}",
                r.cut, r.layer, r.metric, r.institution_params, r.server_params, r.flag
            )?;
        }
        write!(f, "chance {}: {:.4}", self.metric_name, self.chance)
    }
}

fn chance_level(train: &Dataset, test: &Dataset) -> f64 {
    match test.task() {
        Task::Classification { classes } => {
            let mut counts = vec![0usize; classes];
            for &y in train.label_values() {
                counts[y as usize] += 1;
            }
            let majority = (0..classes)
                .max_by_key(|&c| (counts[c], std::cmp::Reverse(c)))
                .unwrap_or(0);
            let hits = test
                .label_values()
                .iter()
                .filter(|&&y| y as usize == majority)
                .count();
            hits as f64 / test.len() as f64
        }
        Task::Regression => {
            let mut ys = train.label_values().to_vec();
            ys.sort_by(f64::total_cmp);
            let median = ys[ys.len() / 2];
            test.label_values()
                .iter()
                .map(|y| (y - median).abs())
                .sum::<f64>()
                / test.len() as f64
        }
    }
}

/// Trains the configured split strategy once per cut index `0..=N` with the
/// first seed.
pub fn sweep_cut(cfg: &ExperimentConfig, parallel: usize) -> Result<SweepReport> {
    if !cfg.strategy.kind.is_split() {
        return Err(FedError::Config(format!(
            "strategy.kind: sweep-cut needs a split strategy, got {}",
            cfg.strategy.kind
        )));
    }
    let seed = cfg.seeds[0];
    let prep = prepare(cfg, seed)?;
    let chance = chance_level(&prep.train, &prep.test);
    let n = prep.model.len();
    let cuts: Vec<usize> = (0..=n).collect();
    let results = par_map(&cuts, parallel, |&c| {
        let mut c_cfg = cfg.clone();
        c_cfg.strategy.cut = Some(c);
        let subs = prep.model.split(CutSpec(c))?;
        let run = run_seed(&c_cfg, seed)?;
        let layer = if c == 0 {
            "input".to_string()
        } else {
            prep.model.layers()[c - 1].name().to_string()
        };
        Ok((
            SweepRow {
                cut: c,
                layer,
                metric: run.record.metrics.primary(),
                institution_params: subs.institution.param_count(),
                server_params: subs.server.param_count(),
                flag: SweepFlag::Ok,
            },
            subs.server_is_parameterless(),
            run.record.metrics.metric_name(),
        ))
    })?;
    let metric_name = results.first().map_or("accuracy", |r| r.2);
    let mut report = SweepReport {
        metric_name,
        chance,
        rows: Vec::with_capacity(results.len()),
    };
    let higher = metric_name == "accuracy";
    for (mut row, parameterless, _) in results {
        let near_chance = if higher {
            row.metric <= chance + SWEEP_CHANCE_MARGIN
        } else {
            row.metric >= chance * (1.0 - SWEEP_CHANCE_MARGIN)
        };
        if parameterless || near_chance {
            row.flag = SweepFlag::Failed;
        }
        report.rows.push(row);
    }
    let gaps: Vec<f64> = report.rows.iter().map(|r| report.gap_to_best(r)).collect();
    for (row, gap) in report.rows.iter_mut().zip(gaps) {
        if row.flag == SweepFlag::Ok && gap > SWEEP_DEGRADED_GAP {
            row.flag = SweepFlag::Degraded;
        }
    }
    Ok(report)
}

/// Runs [`sweep_cut`] and writes `sweep.csv` to the output directory.
pub fn cmd_sweep_cut(
    config_path: impl AsRef<Path>,
    opts: &RunOptions,
) -> Result<(SweepReport, PathBuf)> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    opts.apply(&mut cfg);
    cfg.validate()?;
    let report = sweep_cut(&cfg, opts.parallel_seeds)?;
    let out_dir = cfg.out.clone().unwrap_or_else(default_out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| FedError::io(&out_dir, e))?;
    let path = out_dir.join("sweep.csv");
    report.write_csv(&path)?;
    Ok((report, path))
}

/// Mean and sample standard deviation of one strategy's runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportGroup {
    pub config_hash: String,
    pub strategy: String,
    pub metric: String,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
    pub partition_ks: f64,
    pub uplink: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportSummary {
    pub records: Vec<RunRecord>,
    pub groups: Vec<ReportGroup>,
}

impl fmt::Display for ReportSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:<8} {:>4} {:>10} {:>8} {:>8} {:>14}  config",
            "strategy", "metric", "runs", "mean", "std", "ks", "uplink"
        )?;
        for g in &self.groups {
            writeln!(
                f,
                "{:<12} {:<8} {:>4} {:>10.4} {:>8.4} {:>8.4} {:>14.0}  {}",
                g.strategy,
                g.metric,
                g.runs,
                g.mean,
                g.std,
                g.partition_ks,
                g.uplink,
                &g.config_hash[..g.config_hash.len().min(12)]
            )?;
        }
        write!(f, "{} records", self.records.len())
    }
}

pub fn summarize(records: Vec<RunRecord>) -> ReportSummary {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in &records {
        let k = (r.config_hash.clone(), r.strategy.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let groups = keys
        .into_iter()
        .map(|(hash, strategy)| {
            let rs: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.config_hash == hash && r.strategy == strategy)
                .collect();
            let n = rs.len() as f64;
            let vals: Vec<f64> = rs.iter().map(|r| r.metrics.primary()).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let std = if rs.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            ReportGroup {
                metric: rs[0].metrics.metric_name().to_string(),
                partition_ks: rs.iter().map(|r| r.partition_ks).sum::<f64>() / n,
                uplink: rs
                    .iter()
                    .map(|r| r.metrics.comm_totals.uplink as f64)
                    .sum::<f64>()
                    / n,
                config_hash: hash,
                strategy,
                runs: rs.len(),
                mean,
                std,
            }
        })
        .collect();
    ReportSummary { records, groups }
}

/// Merges one or more `results.json` files (or directories holding one)
/// and, with `out`, writes the combined report there.
pub fn cmd_report(inputs: &[PathBuf], out: Option<&Path>) -> Result<ReportSummary> {
    if inputs.is_empty() {
        return Err(FedError::Config("report: no input files given".into()));
    }
    let mut records = Vec::new();
    for p in inputs {
        let file = if p.is_dir() {
            p.join("results.json")
        } else {
            p.clone()
        };
        records.extend(read_report(&file)?);
    }
    let summary = summarize(records);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| FedError::io(dir, e))?;
        emit_report(&summary.records, dir)?;
    }
    Ok(summary)
}
