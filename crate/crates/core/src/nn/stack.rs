use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::nn::layer::{Cache, Layer, LayerKind, Mode, NormMode, RunningStats};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification { classes: usize },
    Regression,
}

impl Task {
    pub fn output_dims(&self) -> Vec<usize> {
        match self {
            Task::Classification { classes } => vec![*classes],
            Task::Regression => vec![1],
        }
    }
}

/// Layer description without input sizes; sizes are inferred while building.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv {
        channels: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "one")]
        padding: usize,
    },
    Relu,
    Flatten,
    GlobalAvgPool,
    BatchNorm,
    GroupNorm {
        groups: usize,
    },
    Identity,
}

fn default_kernel() -> usize {
    3
}

fn one() -> usize {
    1
}

/// Index of the cut layer: the institution sub-network holds layers `1..=c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutSpec(pub usize);

/// Single-use record of one forward pass.
#[derive(Debug)]
pub struct Tape {
    caches: Vec<Cache>,
    version: u64,
    output_shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    input_dims: Vec<usize>,
    layers: Vec<Layer>,
    /// Per-sample dims at every boundary; `dims[i]` is the input of layer `i`.
    dims: Vec<Vec<usize>>,
    task: Option<Task>,
    version: u64,
}

impl LayerStack {
    /// Wires already-built layers together, checking every boundary.
    pub fn new(input_dims: Vec<usize>, layers: Vec<Layer>, task: Option<Task>) -> Result<Self> {
        if input_dims.is_empty() || input_dims.contains(&0) {
            return Err(FedError::Config(format!(
                "stack input dims must be positive, got {input_dims:?}"
            )));
        }
        let mut dims = vec![input_dims.clone()];
        for l in &layers {
            let next = l.output_dims(dims.last().unwrap())?;
            dims.push(next);
        }
        if let Some(t) = task {
            let out = dims.last().unwrap();
            if *out != t.output_dims() {
                return Err(FedError::shape(
                    "stack output vs task",
                    &t.output_dims(),
                    out,
                ));
            }
        }
        Ok(Self {
            input_dims,
            layers,
            dims,
            task,
            version: 0,
        })
    }

    /// Builds and initializes a stack from layer specs. Layers are tagged
    /// `fc1`, `conv1`, `relu2`, ... in order of appearance.
    pub fn build(
        input_dims: &[usize],
        specs: &[LayerSpec],
        task: Option<Task>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut cur = input_dims.to_vec();
        let mut counters = std::collections::HashMap::<&'static str, usize>::new();
        for spec in specs {
            let kind = match *spec {
                LayerSpec::Dense { units } => LayerKind::Dense {
                    inputs: match cur.as_slice() {
                        [n] => *n,
                        other => {
                            return Err(FedError::Config(format!(
                                "dense layer needs flat input, got dims {other:?} (add a flatten layer)"
                            )))
                        }
                    },
                    outputs: units,
                },
                LayerSpec::Conv {
                    channels,
                    kernel,
                    stride,
                    padding,
                } => LayerKind::Conv2d {
                    in_channels: cur[0],
                    out_channels: channels,
                    kernel,
                    stride,
                    padding,
                },
                LayerSpec::Relu => LayerKind::Relu,
                LayerSpec::Flatten => LayerKind::Flatten,
                LayerSpec::GlobalAvgPool => LayerKind::GlobalAvgPool,
                LayerSpec::BatchNorm => LayerKind::Norm {
                    mode: NormMode::Batch,
                    channels: cur[0],
                },
                LayerSpec::GroupNorm { groups } => LayerKind::Norm {
                    mode: NormMode::Group(groups),
                    channels: cur[0],
                },
                LayerSpec::Identity => LayerKind::Identity,
            };
            let prefix = kind.tag_prefix();
            let n = counters.entry(prefix).or_insert(0);
            *n += 1;
            let layer = Layer::new(kind, format!("{prefix}{n}"), rng)?;
            cur = layer.output_dims(&cur)?;
            layers.push(layer);
        }
        Self::new(input_dims.to_vec(), layers, task)
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn output_dims(&self) -> &[usize] {
        self.dims.last().unwrap()
    }

    /// Per-sample dims after the first `i` layers.
    pub fn dims_at(&self, i: usize) -> &[usize] {
        &self.dims[i]
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn task(&self) -> Option<Task> {
        self.task
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Resolves a boundary tag: `input`, a layer name (its output), or `@i`.
    pub fn boundary_index(&self, tag: &str) -> Option<usize> {
        if tag == "input" {
            return Some(0);
        }
        if let Some(i) = tag.strip_prefix('@') {
            return i.parse().ok().filter(|&i| i <= self.layers.len());
        }
        self.layers
            .iter()
            .position(|l| l.name == tag)
            .map(|i| i + 1)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn buffer_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.running.as_ref())
            .map(|r| r.mean.len() + r.var.len())
            .sum()
    }

    /// Scalars in one full-model synchronization: learnable weights plus
    /// batch-norm running buffers.
    pub fn sync_scalar_count(&self) -> usize {
        self.param_count() + self.buffer_count()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| l.running.is_some())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.weights.iter()).collect()
    }

    pub fn params_cloned(&self) -> Vec<Tensor> {
        self.params().into_iter().cloned().collect()
    }

    /// Mutable weight access. Invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.version += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut())
            .collect()
    }

    pub fn set_params(&mut self, values: &[Tensor]) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(FedError::shape(
                "weight count",
                &[slots.len()],
                &[values.len()],
            ));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            slot.check_same_shape(v, "set_params")?;
        }
        for (slot, v) in slots.into_iter().zip(values) {
            *slot = v.clone();
        }
        Ok(())
    }

    /// Weights followed by batch-norm running mean/var, one tensor each.
    pub fn state_tensors(&self) -> Vec<Tensor> {
        let mut out = self.params_cloned();
        for r in self.layers.iter().filter_map(|l| l.running.as_ref()) {
            out.push(Tensor::new(vec![r.mean.len()], r.mean.clone()).unwrap());
            out.push(Tensor::new(vec![r.var.len()], r.var.clone()).unwrap());
        }
        out
    }

    pub fn load_state(&mut self, state: &[Tensor]) -> Result<()> {
        let n = self.params().len();
        let buffers = self.layers.iter().filter(|l| l.running.is_some()).count() * 2;
        if state.len() != n + buffers {
            return Err(FedError::shape(
                "state tensor count",
                &[n + buffers],
                &[state.len()],
            ));
        }
        let mut rest = state[n..].chunks_exact(2);
        for l in self.layers.iter().filter(|l| l.running.is_some()) {
            let pair = rest.next().unwrap();
            let r = l.running.as_ref().unwrap();
            if pair[0].shape() != [r.mean.len()] || pair[1].shape() != [r.var.len()] {
                return Err(FedError::shape(
                    "running stats",
                    &[r.mean.len()],
                    pair[0].shape(),
                ));
            }
        }
        self.set_params(&state[..n])?;
        let mut rest = state[n..].chunks_exact(2);
        for l in self.layers.iter_mut().filter(|l| l.running.is_some()) {
            let pair = rest.next().unwrap();
            let r = l.running.as_mut().unwrap();
            r.mean.copy_from_slice(pair[0].data());
            r.var.copy_from_slice(pair[1].data());
        }
        Ok(())
    }

    pub fn running_stats(&self) -> Vec<&RunningStats> {
        self.layers
            .iter()
            .filter_map(|l| l.running.as_ref())
            .collect()
    }

    /// Forward pass. Train mode folds batch-norm statistics into running stats.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<(Tensor, Tape)> {
        let (out, tape, stats) = self.run_forward(batch, mode)?;
        for (layer, s) in self.layers.iter_mut().zip(stats) {
            if let Some(s) = s {
                layer.apply_batch_stats(s);
            }
        }
        Ok((out, tape))
    }

    /// Forward pass that leaves running statistics untouched.
    pub fn forward_frozen(&self, batch: &Tensor, mode: Mode) -> Result<(Tensor, Tape)> {
        let (out, tape, _) = self.run_forward(batch, mode)?;
        Ok((out, tape))
    }

    /// Eval-mode output only.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_frozen(batch, Mode::Eval)?.0)
    }

    /// Eval-mode activations at a boundary (`0` = input, `len()` = output).
    pub fn activations_at(&self, batch: &Tensor, boundary: usize) -> Result<Tensor> {
        let mut x = batch.clone();
        for layer in &self.layers[..boundary] {
            x = layer.forward(&x, Mode::Eval)?.0;
        }
        Ok(x)
    }

    #[allow(clippy::type_complexity)]
    fn run_forward(
        &self,
        batch: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, Tape, Vec<Option<crate::nn::layer::BatchStats>>)> {
        if batch.rank() < 2 || batch.sample_dims() != self.input_dims.as_slice() {
            let mut expected = vec![batch.shape().first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.input_dims);
            return Err(FedError::shape("stack input", &expected, batch.shape()));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &self.layers {
            let (y, cache, s) = layer.forward(&x, mode)?;
            if !y.all_finite() {
                return Err(FedError::Numeric {
                    layer: layer.name.clone(),
                });
            }
            caches.push(cache);
            stats.push(s);
            x = y;
        }
        let tape = Tape {
            caches,
            version: self.version,
            output_shape: x.shape().to_vec(),
        };
        Ok((x, tape, stats))
    }

    /// Backpropagates `upstream` (dLoss/dOutput) through the recorded pass.
    /// Returns the input gradient and one gradient per weight tensor, in
    /// [`LayerStack::params`] order.
    pub fn backward(&self, tape: Tape, upstream: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        if tape.version != self.version || tape.caches.len() != self.layers.len() {
            return Err(FedError::StaleTape {
                recorded: tape.version,
                current: self.version,
            });
        }
        if upstream.shape() != tape.output_shape.as_slice() {
            return Err(FedError::shape(
                "upstream gradient",
                &tape.output_shape,
                upstream.shape(),
            ));
        }
        let mut g = upstream.clone();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (layer, cache) in self.layers.iter().zip(tape.caches).rev() {
            let (dx, dw) = layer.backward(cache, &g)?;
            per_layer.push(dw);
            g = dx;
        }
        let grads = per_layer.into_iter().rev().flatten().collect();
        Ok((g, grads))
    }

    /// Splits at the cut layer: the institution side gets layers `1..=c`,
    /// the server side gets `c+1..=N`.
    pub fn split(&self, cut: CutSpec) -> Result<SubNetworks> {
        let c = cut.0;
        let n = self.layers.len();
        if c > n {
            return Err(FedError::Config(format!(
                "cut {c} out of range for a {n}-layer stack"
            )));
        }
        if c == n {
            log::warn!(
                "cut at the last layer ({c}): the server sub-network has no layers and cannot learn"
            );
        }
        let institution =
            LayerStack::new(self.input_dims.clone(), self.layers[..c].to_vec(), None)?;
        let server = LayerStack::new(self.dims[c].clone(), self.layers[c..].to_vec(), self.task)?;
        Ok(SubNetworks {
            institution,
            server,
            cut,
        })
    }

    /// Re-assembles `institution ++ server` into one stack.
    pub fn join(institution: &LayerStack, server: &LayerStack) -> Result<LayerStack> {
        if institution.output_dims() != server.input_dims() {
            return Err(FedError::shape(
                "join boundary",
                server.input_dims(),
                institution.output_dims(),
            ));
        }
        let mut layers = institution.layers.clone();
        layers.extend(server.layers.iter().cloned());
        LayerStack::new(institution.input_dims.clone(), layers, server.task)
    }

    /// Replaces every batch-norm layer with a group-norm layer using
    /// `min(max_groups, channels)` groups. Fails when that count does not
    /// divide the channel count.
    pub fn with_group_norm(&self, max_groups: usize) -> Result<LayerStack> {
        let mut layers = self.layers.clone();
        for l in &mut layers {
            if let LayerKind::Norm {
                mode: NormMode::Batch,
                channels,
            } = l.kind
            {
                let groups = max_groups.min(channels);
                if groups == 0 || channels % groups != 0 {
                    return Err(FedError::Config(format!(
                        "gn_groups: {groups} groups do not divide {channels} channels in `{}` (try {})",
                        l.name,
                        crate::nn::layer::largest_divisor_at_most(channels, groups.max(1))
                    )));
                }
                l.kind = LayerKind::Norm {
                    mode: NormMode::Group(groups),
                    channels,
                };
                l.running = None;
                l.name = l.name.replacen("bn", "gn", 1);
            }
        }
        LayerStack::new(self.input_dims.clone(), layers, self.task)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubNetworks {
    pub institution: LayerStack,
    pub server: LayerStack,
    pub cut: CutSpec,
}

impl SubNetworks {
    /// True when the server side has nothing to learn (a last-layer cut).
    pub fn server_is_parameterless(&self) -> bool {
        self.server.param_count() == 0
    }

    pub fn rejoin(&self) -> Result<LayerStack> {
        LayerStack::join(&self.institution, &self.server)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;

    fn mlp(seed: u64) -> LayerStack {
        LayerStack::build(
            &[3],
            &[
                LayerSpec::Dense { units: 5 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 4 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 2 },
            ],
            Some(Task::Classification { classes: 2 }),
            &mut SeedStreams::new(seed).stream("init"),
        )
        .unwrap()
    }

    #[test]
    fn identity_stack_passes_through() {
        let mut s = LayerStack::new(vec![2], vec![], None).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0]]).unwrap();
        let (y, tape) = s.forward(&x, Mode::Train).unwrap();
        assert_eq!(y, x);
        let (dx, dw) = s.backward(tape, &x).unwrap();
        assert_eq!(dx, x);
        assert!(dw.is_empty());
    }

    #[test]
    fn dense_forward_sums_inputs() {
        let mut rng = SeedStreams::new(0).stream("t");
        let mut layer = Layer::new(
            LayerKind::Dense {
                inputs: 2,
                outputs: 1,
            },
            "fc1",
            &mut rng,
        )
        .unwrap();
        layer.weights = vec![
            Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap(),
            Tensor::zeros(&[1]),
        ];
        let mut s = LayerStack::new(vec![2], vec![layer], Some(Task::Regression)).unwrap();
        let (y, _) = s
            .forward(&Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap(), Mode::Train)
            .unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn scalar_chain_rule() {
        let mut rng = SeedStreams::new(0).stream("t");
        let mut layer = Layer::new(
            LayerKind::Dense {
                inputs: 1,
                outputs: 1,
            },
            "fc1",
            &mut rng,
        )
        .unwrap();
        let (w, x, g) = (1.5, -2.0, 0.25);
        layer.weights = vec![Tensor::full(&[1, 1], w), Tensor::zeros(&[1])];
        let mut s = LayerStack::new(vec![1], vec![layer], Some(Task::Regression)).unwrap();
        let (_, tape) = s.forward(&Tensor::full(&[1, 1], x), Mode::Train).unwrap();
        let (dx, dw) = s.backward(tape, &Tensor::full(&[1, 1], g)).unwrap();
        assert_eq!(dw[0].data(), &[g * x]);
        assert_eq!(dw[1].data(), &[g]);
        assert_eq!(dx.data(), &[g * w]);
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut s = mlp(1);
        let x = Tensor::full(&[2, 3], 0.5);
        let (y, tape) = s.forward(&x, Mode::Train).unwrap();
        let _ = s.params_mut();
        assert!(matches!(
            s.backward(tape, &y),
            Err(FedError::StaleTape { .. })
        ));
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut s = mlp(1);
        assert!(matches!(
            s.forward(&Tensor::zeros(&[2, 4]), Mode::Train),
            Err(FedError::Shape { .. })
        ));
        let (_, tape) = s.forward(&Tensor::zeros(&[2, 3]), Mode::Train).unwrap();
        assert!(s.backward(tape, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let mut s = mlp(1);
        let x = Tensor::new(vec![1, 3], vec![f64::INFINITY, 0.0, 0.0]).unwrap();
        match s.forward(&x, Mode::Train) {
            Err(FedError::Numeric { layer }) => assert_eq!(layer, "fc1"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn split_bounds_and_shapes() {
        let s = mlp(2);
        let whole = s.split(CutSpec(0)).unwrap();
        assert!(whole.institution.is_empty());
        assert_eq!(whole.server.len(), 5);
        let first = s.split(CutSpec(1)).unwrap();
        assert_eq!(first.institution.layers()[0].name(), "fc1");
        assert_eq!(first.server.input_dims(), &[5]);
        let last = s.split(CutSpec(5)).unwrap();
        assert!(last.server_is_parameterless());
        assert_eq!(last.server.output_dims(), &[2]);
        assert!(s.split(CutSpec(6)).is_err());
    }

    #[test]
    fn split_rejoin_is_lossless() {
        let mut s = mlp(4);
        let x = Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let (y, _) = s.forward(&x, Mode::Train).unwrap();
        for c in 0..=s.len() {
            let mut joined = s.split(CutSpec(c)).unwrap().rejoin().unwrap();
            assert_eq!(joined.layers(), s.layers());
            let (yj, _) = joined.forward(&x, Mode::Train).unwrap();
            assert!(yj.bitwise_eq(&y), "cut {c}");
        }
    }

    #[test]
    fn boundary_tags() {
        let s = mlp(1);
        assert_eq!(s.boundary_index("input"), Some(0));
        assert_eq!(s.boundary_index("fc1"), Some(1));
        assert_eq!(s.boundary_index("relu2"), Some(4));
        assert_eq!(s.boundary_index("@5"), Some(5));
        assert_eq!(s.boundary_index("@6"), None);
        assert_eq!(s.boundary_index("conv1"), None);
    }

    #[test]
    fn group_norm_conversion() {
        let mut rng = SeedStreams::new(0).stream("t");
        let s = LayerStack::build(
            &[1, 4, 4],
            &[
                LayerSpec::Conv {
                    channels: 6,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { units: 2 },
            ],
            Some(Task::Classification { classes: 2 }),
            &mut rng,
        )
        .unwrap();
        assert!(s.has_batch_norm());
        let gn = s.with_group_norm(32).unwrap();
        assert!(!gn.has_batch_norm());
        assert!(matches!(
            gn.layers()[1].kind(),
            LayerKind::Norm {
                mode: NormMode::Group(6),
                ..
            }
        ));
        let err = s.with_group_norm(4).unwrap_err();
        assert!(err.to_string().contains("try 3"), "{err}");
    }
}
