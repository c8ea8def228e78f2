//! Datasets, heterogeneous partitioning across institutions, and
//! Kolmogorov-Smirnov quantification of label skew.

mod csv_io;
mod ks;
mod synth;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use csv_io::{load_csv, write_csv, CsvSchema};
pub use ks::ks_two_sample;
pub use synth::{synth_classification, synth_regression, BlobParams};

use crate::error::{FedError, Result};
use crate::nn::Task;
use crate::rng::Rng;
use crate::tensor::Tensor;
use rand::SeedableRng;

/// Mean-KS tolerance used when calibrating the skew fraction.
pub const CALIBRATION_TOLERANCE: f64 = 0.05;
pub const CALIBRATION_MAX_ITERS: usize = 30;
/// Regression labels are binned into this many quantiles for dominance.
pub const REGRESSION_BINS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Tensor,
    task: Task,
}

impl Dataset {
    /// `labels` holds one value per sample: a class index or a real target.
    pub fn new(features: Tensor, labels: Tensor, task: Task) -> Result<Self> {
        let m = features.batch();
        if features.rank() < 2 {
            return Err(FedError::Config(
                "features need a batch axis plus at least one feature axis".into(),
            ));
        }
        if labels.len() != m {
            return Err(FedError::shape("dataset labels", &[m, 1], labels.shape()));
        }
        if !features.all_finite() || !labels.all_finite() {
            return Err(FedError::Config(
                "dataset contains non-finite values".into(),
            ));
        }
        if let Task::Classification { classes } = task {
            if let Some(&bad) = labels
                .data()
                .iter()
                .find(|&&y| y < 0.0 || y.fract() != 0.0 || y as usize >= classes)
            {
                return Err(FedError::LabelOutOfRange {
                    label: bad,
                    classes,
                });
            }
        }
        let labels = labels.reshape(vec![m, 1])?;
        Ok(Self {
            features,
            labels,
            task,
        })
    }

    pub fn len(&self) -> usize {
        self.features.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &Tensor {
        &self.labels
    }

    pub fn feature_dims(&self) -> &[usize] {
        self.features.sample_dims()
    }

    pub fn label_values(&self) -> &[f64] {
        self.labels.data()
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().map(|&i| self.labels.data()[i]).collect()
    }

    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        Ok((
            self.features.gather_rows(indices)?,
            self.labels.gather_rows(indices)?,
        ))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (features, labels) = self.gather(indices)?;
        Ok(Self {
            features,
            labels,
            task: self.task,
        })
    }

    /// Random split into `(train, test)`; `test_fraction` of the rows go to test.
    pub fn train_test_split(
        &self,
        test_fraction: f64,
        rng: &mut Rng,
    ) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(FedError::Config(format!(
                "test_fraction must be in [0, 1), got {test_fraction}"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let n_test = ((self.len() as f64) * test_fraction).round() as usize;
        if n_test == 0 || n_test == self.len() {
            return Err(FedError::Config(format!(
                "test_fraction {test_fraction} leaves an empty split for {} samples",
                self.len()
            )));
        }
        let (test, train) = idx.split_at(n_test);
        let (mut train, mut test) = (train.to_vec(), test.to_vec());
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }

    /// Label bin per sample: the class index, or the quartile for regression.
    pub fn label_bins(&self) -> (Vec<usize>, usize) {
        match self.task {
            Task::Classification { classes } => (
                self.label_values().iter().map(|&y| y as usize).collect(),
                classes,
            ),
            Task::Regression => {
                let mut order: Vec<usize> = (0..self.len()).collect();
                order.sort_by(|&a, &b| {
                    self.label_values()[a]
                        .total_cmp(&self.label_values()[b])
                        .then(a.cmp(&b))
                });
                let mut bins = vec![0; self.len()];
                for (rank, &i) in order.iter().enumerate() {
                    bins[i] = rank * REGRESSION_BINS / self.len();
                }
                (bins, REGRESSION_BINS.min(self.len()))
            }
        }
    }
}

/// Disjoint, non-empty index lists, one per institution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Partition {
    assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(assignments: Vec<Vec<usize>>, dataset_len: usize) -> Result<Self> {
        if assignments.is_empty() {
            return Err(FedError::Infeasible("partition has no institutions".into()));
        }
        let mut seen = vec![false; dataset_len];
        for (k, list) in assignments.iter().enumerate() {
            if list.is_empty() {
                return Err(FedError::Infeasible(format!(
                    "institution {k} has no samples"
                )));
            }
            for &i in list {
                if i >= dataset_len {
                    return Err(FedError::Infeasible(format!(
                        "institution {k}: index {i} outside dataset of {dataset_len}"
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(FedError::Infeasible(format!(
                        "index {i} assigned more than once"
                    )));
                }
            }
        }
        Ok(Self { assignments })
    }

    pub fn institutions(&self) -> usize {
        self.assignments.len()
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.assignments).expect("index lists serialize")
    }

    pub fn from_json(text: &str, dataset_len: usize) -> Result<Self> {
        let lists: Vec<Vec<usize>> = serde_json::from_str(text)
            .map_err(|e| FedError::Config(format!("partition json: {e}")))?;
        Self::new(lists, dataset_len)
    }
}

/// Fraction-based label skew: each institution draws `skew_fraction` of its
/// quota from its dominant label bin and the rest uniformly from what is left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewSpec {
    pub institutions: usize,
    pub skew_fraction: f64,
    pub dominant_labels: Vec<usize>,
    pub quotas: Vec<usize>,
    pub seed: u64,
}

impl SkewSpec {
    /// Equal quotas covering the dataset; dominant bins assigned round-robin.
    pub fn balanced(dataset: &Dataset, institutions: usize, skew_fraction: f64, seed: u64) -> Self {
        let (_, bins) = dataset.label_bins();
        let quota = dataset.len() / institutions.max(1);
        Self {
            institutions,
            skew_fraction,
            dominant_labels: (0..institutions).map(|k| k % bins.max(1)).collect(),
            quotas: vec![quota; institutions],
            seed,
        }
    }
}

pub fn make_label_skew_partition(dataset: &Dataset, spec: &SkewSpec) -> Result<Partition> {
    let k = spec.institutions;
    if k == 0 || spec.quotas.len() != k || spec.dominant_labels.len() != k {
        return Err(FedError::Config(format!(
            "skew spec for {k} institutions needs {k} quotas and {k} dominant labels"
        )));
    }
    if !(0.0..=1.0).contains(&spec.skew_fraction) {
        return Err(FedError::Config(format!(
            "skew_fraction must be in [0, 1], got {}",
            spec.skew_fraction
        )));
    }
    if spec.quotas.iter().sum::<usize>() > dataset.len() {
        return Err(FedError::Infeasible(format!(
            "quotas sum to {} but dataset has {} samples",
            spec.quotas.iter().sum::<usize>(),
            dataset.len()
        )));
    }
    let (bins, n_bins) = dataset.label_bins();
    if let Some(&bad) = spec.dominant_labels.iter().find(|&&d| d >= n_bins) {
        return Err(FedError::Config(format!(
            "dominant label {bad} out of range for {n_bins} label bins"
        )));
    }
    let mut rng = Rng::seed_from_u64(spec.seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    for (i, &b) in bins.iter().enumerate() {
        pools[b].push(i);
    }
    for p in &mut pools {
        p.shuffle(&mut rng);
    }

    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (inst, (&quota, &dom)) in spec.quotas.iter().zip(&spec.dominant_labels).enumerate() {
        let n_dom = (spec.skew_fraction * quota as f64).round() as usize;
        let pool = &mut pools[dom];
        if pool.len() < n_dom {
            return Err(FedError::Infeasible(format!(
                "label pool {dom} exhausted: institution {inst} needs {n_dom}, {} left",
                pool.len()
            )));
        }
        assignments[inst] = pool.split_off(pool.len() - n_dom);
    }
    let mut rest: Vec<usize> = pools.into_iter().flatten().collect();
    rest.sort_unstable();
    rest.shuffle(&mut rng);
    for (inst, &quota) in spec.quotas.iter().enumerate() {
        let need = quota - assignments[inst].len();
        if rest.len() < need {
            return Err(FedError::Infeasible(format!(
                "remainder pool exhausted at institution {inst}"
            )));
        }
        let tail = rest.split_off(rest.len() - need);
        assignments[inst].extend(tail);
        assignments[inst].sort_unstable();
    }
    Partition::new(assignments, dataset.len())
}

/// IID label draw with the given (possibly unequal) institution sizes.
pub fn make_quantity_skew_partition(
    dataset: &Dataset,
    sizes: &[usize],
    seed: u64,
) -> Result<Partition> {
    let total: usize = sizes.iter().sum();
    if total > dataset.len() {
        return Err(FedError::Infeasible(format!(
            "sizes sum to {total} but dataset has {} samples",
            dataset.len()
        )));
    }
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(FedError::Infeasible(
            "every institution needs at least one sample".into(),
        ));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut rng);
    let mut assignments = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &n in sizes {
        let mut part = idx[start..start + n].to_vec();
        part.sort_unstable();
        assignments.push(part);
        start += n;
    }
    Partition::new(assignments, dataset.len())
}

/// Explicit label ownership: institution `k` receives every sample whose
/// label bin is in `groups[k]`. Samples of a bin listed by several
/// institutions are dealt round-robin among them in index order.
pub fn make_label_group_partition(dataset: &Dataset, groups: &[Vec<usize>]) -> Result<Partition> {
    let (bins, n_bins) = dataset.label_bins();
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    for (k, g) in groups.iter().enumerate() {
        for &b in g {
            if b >= n_bins {
                return Err(FedError::Config(format!(
                    "partition.label_groups: bin {b} out of range for {n_bins} label bins"
                )));
            }
            if !owners[b].contains(&k) {
                owners[b].push(k);
            }
        }
    }
    if let Some(b) = owners.iter().position(Vec::is_empty) {
        log::warn!("label bin {b} is assigned to no institution; its samples are unused");
    }
    let mut dealt = vec![0usize; n_bins];
    let mut assignments = vec![Vec::new(); groups.len()];
    for (i, &b) in bins.iter().enumerate() {
        if owners[b].is_empty() {
            continue;
        }
        let k = owners[b][dealt[b] % owners[b].len()];
        dealt[b] += 1;
        assignments[k].push(i);
    }
    if let Some(k) = assignments.iter().position(Vec::is_empty) {
        return Err(FedError::Infeasible(format!(
            "institution {k} received no samples"
        )));
    }
    Partition::new(assignments, dataset.len())
}

/// Equal-size IID partition over the whole dataset.
pub fn make_iid_partition(dataset: &Dataset, institutions: usize, seed: u64) -> Result<Partition> {
    if institutions == 0 {
        return Err(FedError::Config("need at least one institution".into()));
    }
    let quota = dataset.len() / institutions;
    make_quantity_skew_partition(dataset, &vec![quota; institutions], seed)
}

pub fn pairwise_ks(dataset: &Dataset, partition: &Partition) -> Result<Vec<Vec<f64>>> {
    let labels: Vec<Vec<f64>> = partition
        .assignments()
        .iter()
        .map(|a| dataset.labels_of(a))
        .collect();
    let k = labels.len();
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let d = ks_two_sample(&labels[i], &labels[j])?;
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    Ok(m)
}

/// Mean KS statistic over all unordered institution pairs.
pub fn mean_pairwise_ks(dataset: &Dataset, partition: &Partition) -> Result<f64> {
    let k = partition.institutions();
    if k < 2 {
        return Err(FedError::Config(format!(
            "mean pairwise KS needs at least 2 institutions, got {k}"
        )));
    }
    let m = pairwise_ks(dataset, partition)?;
    let mut sum = 0.0;
    for (i, row) in m.iter().enumerate() {
        sum += row[i + 1..].iter().sum::<f64>();
    }
    Ok(sum / (k * (k - 1) / 2) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub spec: SkewSpec,
    pub achieved_ks: f64,
    pub within_tolerance: bool,
}

/// Searches the skew fraction whose partition reaches `target_ks` mean KS.
/// When the target is out of reach the closest spec found is returned with
/// `within_tolerance == false`.
pub fn calibrate_skew(
    dataset: &Dataset,
    institutions: usize,
    target_ks: f64,
    seed: u64,
) -> Result<Calibration> {
    if !(0.0..=1.0).contains(&target_ks) {
        return Err(FedError::Config(format!(
            "target KS must be in [0, 1], got {target_ks}"
        )));
    }
    let measure = |s: f64| -> Result<(SkewSpec, f64)> {
        let spec = SkewSpec::balanced(dataset, institutions, s, seed);
        let p = make_label_skew_partition(dataset, &spec)?;
        Ok((spec, mean_pairwise_ks(dataset, &p)?))
    };
    let finish = |spec: SkewSpec, ks: f64| Calibration {
        within_tolerance: (ks - target_ks).abs() <= CALIBRATION_TOLERANCE,
        spec,
        achieved_ks: ks,
    };

    if target_ks == 0.0 {
        let (spec, ks) = measure(0.0)?;
        return Ok(finish(spec, ks));
    }
    let s_max = max_feasible_skew(
        dataset,
        &SkewSpec::balanced(dataset, institutions, 1.0, seed),
    );
    let (mut best_spec, mut best_ks) = measure(s_max)?;
    if target_ks >= best_ks {
        if best_ks + CALIBRATION_TOLERANCE < target_ks {
            log::warn!("target KS {target_ks} unreachable; best achievable is {best_ks:.3}");
        }
        return Ok(finish(best_spec, best_ks));
    }
    let (mut lo, mut hi) = (0.0, s_max);
    for _ in 0..CALIBRATION_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        let (spec, ks) = measure(mid)?;
        if (ks - target_ks).abs() < (best_ks - target_ks).abs() {
            best_spec = spec;
            best_ks = ks;
        }
        if (ks - target_ks).abs() <= CALIBRATION_TOLERANCE {
            break;
        }
        if ks < target_ks {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(finish(best_spec, best_ks))
}

/// Largest skew fraction whose dominant draws fit in every label pool.
pub fn max_feasible_skew(dataset: &Dataset, spec: &SkewSpec) -> f64 {
    let (bins, n_bins) = dataset.label_bins();
    let mut pool = vec![0usize; n_bins];
    for &b in &bins {
        pool[b] += 1;
    }
    let fits = |s: f64| {
        let mut demand = vec![0usize; n_bins];
        for (&q, &d) in spec.quotas.iter().zip(&spec.dominant_labels) {
            if d < n_bins {
                demand[d] += (s * q as f64).round() as usize;
            }
        }
        demand.iter().zip(&pool).all(|(d, p)| d <= p)
    };
    if fits(1.0) {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Label-stratified sample of `count` indices drawn from `from`.
pub fn stratified_sample(
    dataset: &Dataset,
    from: &[usize],
    count: usize,
    rng: &mut Rng,
) -> Vec<usize> {
    if count == 0 || from.is_empty() {
        return Vec::new();
    }
    let (bins, n_bins) = dataset.label_bins();
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    for &i in from {
        strata[bins[i]].push(i);
    }
    let count = count.min(from.len());
    // largest-remainder allocation proportional to stratum size
    let mut alloc: Vec<(usize, f64)> = strata
        .iter()
        .map(|s| {
            let exact = count as f64 * s.len() as f64 / from.len() as f64;
            (exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut short = count - alloc.iter().map(|a| a.0).sum::<usize>();
    let mut order: Vec<usize> = (0..n_bins).collect();
    order.sort_by(|&a, &b| alloc[b].1.total_cmp(&alloc[a].1).then(a.cmp(&b)));
    for b in order {
        if short == 0 {
            break;
        }
        if alloc[b].0 < strata[b].len() {
            alloc[b].0 += 1;
            short -= 1;
        }
    }
    let mut out = Vec::with_capacity(count);
    for (s, (n, _)) in strata.iter_mut().zip(alloc) {
        s.shuffle(rng);
        out.extend_from_slice(&s[..n]);
    }
    out.sort_unstable();
    out
}
