use fedsplit::metrics::{
    emit_report, export_embeddings, feature_divergence, read_report, CommTotals, Metrics,
    RunRecord, CSV_HEADER,
};
use fedsplit::nn::{LayerSpec, LayerStack, Task};
use fedsplit::partition::{
    make_label_skew_partition, mean_pairwise_ks, synth_classification, synth_regression, SkewSpec,
};
use fedsplit::rng::SeedStreams;
use fedsplit::strategies::{Simulation, StrategyConfig, StrategyKind};
use fedsplit::tensor::Tensor;

fn mlp(seed: u64) -> LayerStack {
    use LayerSpec::*;
    LayerStack::build(
        &[4],
        &[Dense { units: 8 }, BatchNorm, Relu, Dense { units: 2 }],
        Some(Task::Classification { classes: 2 }),
        &mut SeedStreams::new(seed).stream("init"),
    )
    .unwrap()
}

fn splitavg(lr: f64) -> StrategyConfig {
    let mut c = StrategyConfig::new(StrategyKind::SplitAvg).with_cut(1);
    c.lr = lr;
    c.batch_size = 16;
    c
}

#[test]
fn metrics_equal_brute_force_recomputation() {
    let data = synth_classification(600, 2, 4, 1.5, 1).unwrap();
    let (train, test) = data
        .train_test_split(0.25, &mut SeedStreams::new(1).stream("split"))
        .unwrap();
    let part = make_label_skew_partition(&train, &SkewSpec::balanced(&train, 3, 0.6, 1)).unwrap();
    let mut sim =
        Simulation::new(splitavg(0.05), mlp(1), train, &part, &SeedStreams::new(1)).unwrap();
    sim.train(3, None).unwrap();
    let composite = sim.finish().unwrap();
    let m = sim.evaluate(&test).unwrap();
    let mut per = Vec::new();
    for model in composite.models().unwrap() {
        let p = model.predict(test.features()).unwrap();
        let hits = (0..test.len())
            .filter(|&i| {
                let r = p.row(i);
                let arg = if r[1] > r[0] { 1.0 } else { 0.0 };
                arg == test.label_values()[i]
            })
            .count();
        per.push(hits as f64 / test.len() as f64);
    }
    assert_eq!(m.per_institution.len(), 3);
    for (a, b) in m.per_institution.iter().zip(&per) {
        assert!((a - b).abs() <= 1e-12);
    }
    let mean = per.iter().sum::<f64>() / 3.0;
    assert!((m.accuracy.unwrap() - mean).abs() <= 1e-12);
    assert_eq!(m.loss_curve.len(), 3);
    assert_eq!(m.comm_totals, CommTotals::from_ledger(sim.ledger()));
}

#[test]
fn trivial_predictors() {
    let labels = Tensor::new(vec![4, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let perfect = Tensor::from_rows(&[
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![0.0, 1.0],
        vec![1.0, 0.0],
    ])
    .unwrap();
    assert_eq!(fedsplit::metrics::accuracy(&perfect, &labels).unwrap(), 1.0);
    let constant = Tensor::from_rows(&vec![vec![1.0, 0.0]; 4]).unwrap();
    assert_eq!(
        fedsplit::metrics::accuracy(&constant, &labels).unwrap(),
        0.5
    );
    let y = Tensor::new(vec![3, 1], vec![1.5, -2.0, 0.25]).unwrap();
    assert_eq!(fedsplit::metrics::mae(&y, &y).unwrap(), 0.0);
    let m = Metrics::from_per_institution(Task::Regression, vec![0.5, 1.5]).unwrap();
    assert_eq!((m.mae, m.accuracy), (Some(1.0), None));
}

#[test]
fn divergence_hand_examples() {
    let same = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
    assert_eq!(
        feature_divergence(&[same.clone(), same]).unwrap(),
        vec![0.0, 0.0]
    );

    let mu = 1.0;
    let a = Tensor::from_rows(&[vec![mu], vec![mu]]).unwrap();
    let b = Tensor::from_rows(&[vec![-mu], vec![-mu]]).unwrap();
    let d = feature_divergence(&[a.clone(), b]).unwrap();
    assert!(d.iter().all(|v| (v - mu).abs() < 1e-15), "{d:?}");
    assert!(feature_divergence(&[a]).is_err());
}

#[test]
fn divergence_grows_with_skew_after_training() {
    let data = synth_classification(800, 2, 4, 3.0, 5).unwrap();
    let mut means = Vec::new();
    for s in [0.0, 0.5, 1.0] {
        let mut total = 0.0;
        for seed in 0..3 {
            let part =
                make_label_skew_partition(&data, &SkewSpec::balanced(&data, 2, s, seed)).unwrap();
            let mut sim = Simulation::new(
                splitavg(0.01),
                mlp(seed),
                data.clone(),
                &part,
                &SeedStreams::new(seed),
            )
            .unwrap();
            sim.train(3, None).unwrap();
            sim.finish().unwrap();
            let d = feature_divergence(&sim.local_features(1).unwrap()).unwrap();
            total += d.iter().sum::<f64>() / d.len() as f64;
        }
        means.push(total / 3.0);
    }
    assert!(means.windows(2).all(|w| w[0] <= w[1]), "{means:?}");
}

#[test]
fn embedding_export_shape_and_replay() {
    let data = synth_regression(50, 3, 0.1, 2).unwrap();
    let model = LayerStack::build(
        &[3],
        &[
            LayerSpec::Dense { units: 5 },
            LayerSpec::Relu,
            LayerSpec::Dense { units: 1 },
        ],
        Some(Task::Regression),
        &mut SeedStreams::new(2).stream("init"),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    export_embeddings(&model, &data, "fc1", &p1).unwrap();
    export_embeddings(&model, &data, "fc1", &p2).unwrap();
    let text = std::fs::read_to_string(&p1).unwrap();
    assert_eq!(text, std::fs::read_to_string(&p2).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 51);
    assert_eq!(lines[1].split(',').count(), 2 + 5);
    assert!(export_embeddings(&model, &data, "fc9", dir.path().join("c.csv")).is_err());
}

#[test]
fn report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (_, csv) = emit_report(&[], dir.path()).unwrap();
    assert_eq!(std::fs::read_to_string(csv).unwrap().trim_end(), CSV_HEADER);

    let data = synth_classification(400, 2, 3, 3.0, 3).unwrap();
    let part = make_label_skew_partition(&data, &SkewSpec::balanced(&data, 4, 0.7, 3)).unwrap();
    let ks = mean_pairwise_ks(&data, &part).unwrap();
    let record = RunRecord {
        config_hash: "abc".into(),
        seed: 3,
        strategy: "fedavg".into(),
        partition_ks: ks,
        metrics: Metrics::from_per_institution(
            Task::Classification { classes: 2 },
            vec![0.75, 0.5],
        )
        .unwrap(),
        epochs_run: 2,
        wall_time_secs: 0.1,
    };
    let (json, csv) = emit_report(std::slice::from_ref(&record), dir.path()).unwrap();
    assert_eq!(read_report(json).unwrap(), vec![record]);
    let row = std::fs::read_to_string(csv)
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .to_string();
    assert_eq!(row.split(',').nth(3).unwrap().parse::<f64>().unwrap(), ks);
}
