use std::fmt;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::federation::{analytic_epoch_uplink, Direction, MessageKind};
use crate::nn::{grad_check_with, loss, loss_chunked, LayerSpec, LayerStack, LossKind, Task};
use crate::partition::{
    make_label_skew_partition, make_quantity_skew_partition, synth_classification, Dataset,
    Partition, SkewSpec,
};
use crate::rng::{Rng, SeedStreams};
use crate::strategies::{Simulation, StrategyConfig, StrategyKind};
use crate::tensor::{bitwise_eq_all, max_rel_diff_all, Tensor};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const LINEAR_GRAD_TOLERANCE: f64 = 1e-6;
pub const CHUNK_TOLERANCE: f64 = 1e-12;
pub const COLLAPSE_TOLERANCE: f64 = 1e-10;
const GRAD_EPS: f64 = 1e-5;
const PIECEWISE_LINEAR_EPS: f64 = 1e-3;
/// Relative-difference floor for weights near zero.
const WEIGHT_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    /// Flips the sign of one analytic gradient before every grad check.
    pub inject_sign_flip: bool,
    pub grad_seeds: u64,
    pub chunk_trials: u64,
    pub collapse_steps: usize,
    pub ledger_epochs: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            inject_sign_flip: false,
            grad_seeds: 20,
            chunk_trials: 100,
            collapse_steps: 100,
            ledger_epochs: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed value (error, difference or mismatch count).
    pub value: f64,
    pub tolerance: f64,
    pub secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    fn push(&mut self, name: impl Into<String>, value: f64, tolerance: f64, start: Instant) {
        let name = name.into();
        let passed = value <= tolerance;
        log::info!(
            "{name}: {value:.3e} (tol {tolerance:.0e}) {}",
            if passed { "pass" } else { "FAIL" }
        );
        self.checks.push(CheckResult {
            name,
            passed,
            value,
            tolerance,
            secs: start.elapsed().as_secs_f64(),
        });
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<40} {:>11} {:>9} {:>8}  result",
            "check", "value", "tol", "secs"
        )?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<40} {:>11.3e} {:>9.0e} {:>8.2}  {}",
                c.name,
                c.value,
                c.tolerance,
                c.secs,
                if c.passed { "pass" } else { "FAIL" }
            )?;
        }
        let failed = self.failures().len();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .expect("shape matches data")
}

fn class_labels(n: usize, classes: usize, rng: &mut Rng) -> Tensor {
    Tensor::new(
        vec![n, 1],
        (0..n)
            .map(|_| rng.random_range(0..classes) as f64)
            .collect(),
    )
    .expect("shape matches data")
}

struct GradCase {
    name: &'static str,
    input: Vec<usize>,
    layers: Vec<LayerSpec>,
    task: Task,
    batch: usize,
    tolerance: f64,
    eps: f64,
}

fn grad_cases() -> Vec<GradCase> {
    use LayerSpec::*;
    let cls = Task::Classification { classes: 3 };
    vec![
        GradCase {
            name: "linear",
            input: vec![5],
            layers: vec![Dense { units: 4 }, Dense { units: 3 }],
            task: cls,
            batch: 6,
            tolerance: LINEAR_GRAD_TOLERANCE,
            eps: GRAD_EPS,
        },
        GradCase {
            name: "linear-l1",
            input: vec![4],
            layers: vec![Dense { units: 1 }],
            task: Task::Regression,
            batch: 6,
            tolerance: LINEAR_GRAD_TOLERANCE,
            // piecewise linear: central differences are exact short of a kink
            eps: PIECEWISE_LINEAR_EPS,
        },
        GradCase {
            name: "dense-relu",
            input: vec![6],
            layers: vec![
                Dense { units: 8 },
                Relu,
                Dense { units: 8 },
                Relu,
                Dense { units: 3 },
            ],
            task: cls,
            batch: 8,
            tolerance: GRAD_TOLERANCE,
            eps: GRAD_EPS,
        },
        GradCase {
            name: "dense-bn",
            input: vec![6],
            layers: vec![
                Dense { units: 8 },
                BatchNorm,
                Relu,
                Identity,
                Dense { units: 3 },
            ],
            task: cls,
            batch: 8,
            tolerance: GRAD_TOLERANCE,
            eps: GRAD_EPS,
        },
        GradCase {
            name: "conv-bn-gn",
            input: vec![2, 6, 6],
            layers: vec![
                Conv {
                    channels: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                BatchNorm,
                Relu,
                Conv {
                    channels: 4,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                GroupNorm { groups: 2 },
                Relu,
                GlobalAvgPool,
                Dense { units: 3 },
            ],
            task: cls,
            batch: 4,
            tolerance: GRAD_TOLERANCE,
            eps: GRAD_EPS,
        },
        GradCase {
            name: "conv-flatten-l1",
            input: vec![1, 5, 5],
            layers: vec![
                Conv {
                    channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 0,
                },
                Relu,
                Flatten,
                Dense { units: 1 },
            ],
            task: Task::Regression,
            batch: 5,
            tolerance: GRAD_TOLERANCE,
            eps: GRAD_EPS,
        },
    ]
}

fn grad_checks(opts: &VerifyOptions, report: &mut VerifyReport) -> Result<()> {
    for case in grad_cases() {
        let start = Instant::now();
        let mut worst = 0.0_f64;
        for seed in 0..opts.grad_seeds {
            let streams = SeedStreams::new(seed);
            let stack = LayerStack::build(
                &case.input,
                &case.layers,
                Some(case.task),
                &mut streams.stream("init"),
            )?;
            let mut rng = streams.stream("data");
            let mut shape = vec![case.batch];
            shape.extend_from_slice(&case.input);
            let x = randn(&shape, &mut rng);
            let (kind, y) = match case.task {
                Task::Classification { classes } => (
                    LossKind::CrossEntropy,
                    class_labels(case.batch, classes, &mut rng),
                ),
                // labels well away from the predictions keep L1 off its kink
                Task::Regression => {
                    let mut y = randn(&[case.batch, 1], &mut rng);
                    for v in y.data_mut() {
                        *v += if *v >= 0.0 { 10.0 } else { -10.0 };
                    }
                    (LossKind::L1, y)
                }
            };
            let r = grad_check_with(&stack, &x, &y, kind, case.eps, |g| {
                if opts.inject_sign_flip {
                    g[0].scale(-1.0);
                }
            })?;
            worst = worst.max(r.max_rel_error);
        }
        report.push(
            format!("grad/{} x{}", case.name, opts.grad_seeds),
            worst,
            case.tolerance,
            start,
        );
    }
    Ok(())
}

/// Summed per-chunk losses against the loss of the concatenated batch,
/// and chunk gradients against the matching rows of the full gradient.
fn chunk_identity(opts: &VerifyOptions, report: &mut VerifyReport) -> Result<()> {
    let start = Instant::now();
    let mut rng = SeedStreams::new(0).stream("chunks");
    let mut worst = 0.0_f64;
    let mut grad_mismatch = 0usize;
    for _ in 0..opts.chunk_trials {
        let n = rng.random_range(2..48usize);
        let classes = rng.random_range(2..6usize);
        let k = rng.random_range(1..=n.min(6));
        let mut cuts: Vec<usize> = (1..n).collect();
        for i in (1..cuts.len()).rev() {
            cuts.swap(i, rng.random_range(0..=i));
        }
        let mut cuts: Vec<usize> = cuts.into_iter().take(k - 1).collect();
        cuts.sort_unstable();
        let mut sizes = Vec::with_capacity(k);
        let mut prev = 0;
        for c in cuts.into_iter().chain(std::iter::once(n)) {
            sizes.push(c - prev);
            prev = c;
        }
        let mut z = randn(&[n, classes], &mut rng);
        z.scale(3.0);
        let y = class_labels(n, classes, &mut rng);
        let (full, g) = loss(LossKind::CrossEntropy, &z, &y)?;
        let chunks: Vec<(Tensor, Tensor)> = z
            .split_batch(&sizes)?
            .into_iter()
            .zip(y.split_batch(&sizes)?)
            .collect();
        let c = loss_chunked(LossKind::CrossEntropy, &chunks)?;
        worst = worst.max((c.value - full).abs());
        if !bitwise_eq_all(&c.chunk_grads, &g.split_batch(&sizes)?) {
            grad_mismatch += 1;
        }
    }
    report.push(
        format!("chunked-loss identity x{}", opts.chunk_trials),
        worst,
        CHUNK_TOLERANCE,
        start,
    );
    report.push(
        "chunked-loss gradients (mismatches)",
        grad_mismatch as f64,
        0.0,
        start,
    );
    Ok(())
}

fn small_model(seed: u64, dims: usize) -> Result<LayerStack> {
    use LayerSpec::*;
    LayerStack::build(
        &[dims],
        &[Dense { units: 8 }, BatchNorm, Relu, Dense { units: 2 }],
        Some(Task::Classification { classes: 2 }),
        &mut SeedStreams::new(seed).stream("init"),
    )
}

fn config(kind: StrategyKind, cut: Option<usize>) -> StrategyConfig {
    let mut c = StrategyConfig::new(kind);
    c.cut = cut;
    c.lr = 0.05;
    c.batch_size = 16;
    c
}

/// Trains `epochs` epochs and returns every complete network's weights.
fn train_weights(sim: &mut Simulation, epochs: usize) -> Result<Vec<Vec<Tensor>>> {
    for _ in 0..epochs {
        sim.run_epoch()?;
    }
    Ok(sim
        .finish()?
        .models()?
        .iter()
        .map(|m| m.state_tensors())
        .collect())
}

/// One institution holding everything: every federated strategy must
/// reproduce the centralized trainer.
fn collapse(opts: &VerifyOptions, report: &mut VerifyReport) -> Result<()> {
    let batch = 16;
    let q = 160;
    let epochs = opts.collapse_steps.div_ceil(q / batch);
    let data = synth_classification(q, 2, 4, 2.0, 11)?;
    let part = Partition::new(vec![(0..q).collect()], q)?;
    let streams = SeedStreams::new(21);
    let model = small_model(21, 4)?;
    let mut central = Simulation::new(
        config(StrategyKind::Centralized, None),
        model.clone(),
        data.clone(),
        &part,
        &streams,
    )?;
    let reference = train_weights(&mut central, epochs)?.remove(0);

    let mut cases: Vec<(String, StrategyConfig)> = vec![
        ("fedavg".into(), config(StrategyKind::FedAvg, None)),
        ("fedsgd".into(), config(StrategyKind::FedSgd, None)),
        ("cwt".into(), config(StrategyKind::Cwt, None)),
        (
            "splitnn cut 2".into(),
            config(StrategyKind::SplitNn, Some(2)),
        ),
        (
            "splitavg_v2 cut 1".into(),
            config(StrategyKind::SplitAvgV2, Some(1)),
        ),
    ];
    for c in 0..=model.len() {
        cases.push((
            format!("splitavg cut {c}"),
            config(StrategyKind::SplitAvg, Some(c)),
        ));
    }
    for (name, cfg) in cases {
        let start = Instant::now();
        let mut sim = Simulation::new(cfg, model.clone(), data.clone(), &part, &streams)?;
        let w = train_weights(&mut sim, epochs)?;
        let diff = w
            .iter()
            .map(|w| max_rel_diff_all(w, &reference, WEIGHT_FLOOR))
            .fold(0.0, f64::max);
        report.push(format!("collapse/{name}"), diff, COLLAPSE_TOLERANCE, start);
    }
    Ok(())
}

fn skewed_setup(k: usize, skew: f64, seed: u64) -> Result<(Dataset, Partition)> {
    let data = synth_classification(480, 2, 4, 2.0, seed)?;
    let part = make_label_skew_partition(&data, &SkewSpec::balanced(&data, k, skew, seed))?;
    Ok((data, part))
}

/// SplitAVG against its label-private variant: bitwise weights, and no
/// label scalars in the uplinked feature maps.
fn v1_v2(report: &mut VerifyReport) -> Result<()> {
    for (k, cut, skew) in [(2, 1, 0.0), (4, 2, 0.8), (3, 3, 0.5)] {
        let start = Instant::now();
        let (data, part) = skewed_setup(k, skew, 5)?;
        let streams = SeedStreams::new(8);
        let model = small_model(8, 4)?;
        let mut a = Simulation::new(
            config(StrategyKind::SplitAvg, Some(cut)),
            model.clone(),
            data.clone(),
            &part,
            &streams,
        )?;
        let mut b = Simulation::new(
            config(StrategyKind::SplitAvgV2, Some(cut)),
            model,
            data,
            &part,
            &streams,
        )?;
        let wa = train_weights(&mut a, 3)?;
        let wb = train_weights(&mut b, 3)?;
        let mismatched = wa
            .iter()
            .zip(&wb)
            .filter(|(x, y)| !bitwise_eq_all(x, y))
            .count();
        let name = format!("v1==v2 K={k} cut={cut} s={skew}");
        report.push(
            format!("{name} (mismatches)"),
            mismatched as f64,
            0.0,
            start,
        );

        let features = b
            .ledger()
            .total_by_kind(Direction::Uplink, MessageKind::FeatureMaps);
        let samples: u64 = b
            .history()
            .iter()
            .flat_map(|h| h.plans.iter())
            .flat_map(|p| p.ids.iter())
            .map(|&i| 16.min(b.local_sizes()[i]) as u64)
            .sum();
        let label_scalars = features.abs_diff(samples * b.shape().cutmap);
        report.push(
            format!("{name} uplinked labels"),
            label_scalars as f64,
            0.0,
            start,
        );
    }
    Ok(())
}

/// Per-epoch uplink totals of every strategy against the closed form.
fn ledger_vs_analytic(opts: &VerifyOptions, report: &mut VerifyReport) -> Result<()> {
    let data = synth_classification(480, 2, 4, 2.0, 3)?;
    let part = make_quantity_skew_partition(&data, &[12, 60, 100, 140], 3)?;
    let streams = SeedStreams::new(4);
    let model = small_model(4, 4)?;
    for kind in StrategyKind::ALL {
        let start = Instant::now();
        let mut cfg = config(kind, kind.is_split().then_some(2));
        if kind.uses_sampling() {
            cfg.institutions_per_round = Some(2);
        }
        let mut sim = Simulation::new(cfg, model.clone(), data.clone(), &part, &streams)?;
        let mut mismatch = sim.ledger().round_total(0, Direction::Uplink);
        for _ in 0..opts.ledger_epochs {
            let s = sim.run_epoch()?;
            let expect = analytic_epoch_uplink(kind, sim.shape(), 16, &sim.local_sizes(), &s.plans);
            mismatch += sim
                .ledger()
                .round_total(s.epoch, Direction::Uplink)
                .abs_diff(expect);
        }
        sim.finish()?;
        mismatch += sim
            .ledger()
            .round_total(opts.ledger_epochs + 1, Direction::Uplink);
        if !sim.ledger().is_conserved() {
            mismatch += 1;
        }
        report.push(
            format!("ledger/{kind} x{} epochs", opts.ledger_epochs),
            mismatch as f64,
            0.0,
            start,
        );
    }
    Ok(())
}

/// Zero server momentum and an empty shared pool both reduce to FedAvg.
fn degenerate_variants(report: &mut VerifyReport) -> Result<()> {
    let (data, part) = skewed_setup(4, 0.6, 9)?;
    let streams = SeedStreams::new(10);
    let model = small_model(10, 4)?;
    let mut base = Simulation::new(
        config(StrategyKind::FedAvg, None),
        model.clone(),
        data.clone(),
        &part,
        &streams,
    )?;
    let reference = train_weights(&mut base, 3)?;
    let mut m = config(StrategyKind::FedAvgM, None);
    m.server_momentum = Some(0.0);
    let mut sd = config(StrategyKind::FedAvgSd, None);
    sd.shared_fraction = Some(0.0);
    for (name, cfg) in [("fedavgm(beta=0)==fedavg", m), ("fedavg_sd(0)==fedavg", sd)] {
        let start = Instant::now();
        let mut sim = Simulation::new(cfg, model.clone(), data.clone(), &part, &streams)?;
        let w = train_weights(&mut sim, 3)?;
        let mismatched = w
            .iter()
            .zip(&reference)
            .filter(|(x, y)| !bitwise_eq_all(x, y))
            .count();
        report.push(
            format!("{name} (mismatches)"),
            mismatched as f64,
            0.0,
            start,
        );
    }
    Ok(())
}

/// Runs the full verification suite and returns the pass/fail matrix.
pub fn cmd_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    grad_checks(opts, &mut report)?;
    chunk_identity(opts, &mut report)?;
    collapse(opts, &mut report)?;
    v1_v2(&mut report)?;
    ledger_vs_analytic(opts, &mut report)?;
    degenerate_variants(&mut report)?;
    Ok(report)
}
