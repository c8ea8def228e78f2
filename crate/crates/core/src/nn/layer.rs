//! Layer kinds with exact forward and backward passes.
//!
//! Per-sample dims exclude the batch axis: a dense layer sees `[features]`,
//! conv and norm layers see `[channels, height, width]` (norm layers also
//! accept `[channels]`).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const RUNNING_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    Batch,
    Group(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Flatten,
    GlobalAvgPool,
    Norm {
        mode: NormMode,
        channels: usize,
    },
    Identity,
}

impl LayerKind {
    /// Short name prefix used for layer tags ("fc1", "conv2", ...).
    pub fn tag_prefix(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "fc",
            LayerKind::Conv2d { .. } => "conv",
            LayerKind::Relu => "relu",
            LayerKind::Flatten => "flatten",
            LayerKind::GlobalAvgPool => "avgpool",
            LayerKind::Norm {
                mode: NormMode::Batch,
                ..
            } => "bn",
            LayerKind::Norm {
                mode: NormMode::Group(_),
                ..
            } => "gn",
            LayerKind::Identity => "identity",
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LayerKind::Dense { inputs, outputs } if inputs == 0 || outputs == 0 => Err(
                FedError::Config("dense layer needs positive in/out sizes".into()),
            ),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 => Err(
                FedError::Config("conv layer needs positive channels, kernel and stride".into()),
            ),
            LayerKind::Norm { channels: 0, .. } => Err(FedError::Config(
                "norm layer needs positive channels".into(),
            )),
            LayerKind::Norm {
                mode: NormMode::Group(g),
                channels,
            } if g == 0 || channels % g != 0 => Err(FedError::Config(format!(
                "group norm: {g} groups do not divide {channels} channels (try {})",
                largest_divisor_at_most(channels, g.max(1))
            ))),
            _ => Ok(()),
        }
    }
}

/// Largest divisor of `n` that is `<= cap`.
pub fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n).max(1))
        .rev()
        .find(|&d| n.is_multiple_of(d))
        .unwrap_or(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

/// Batch statistics produced by a Train-mode batch-norm forward.
#[derive(Clone, Debug)]
pub(crate) struct BatchStats {
    mean: Vec<f64>,
    unbiased_var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) enum Cache {
    Nothing,
    Input(Tensor),
    InputShape(Vec<usize>),
    Norm {
        xhat: Tensor,
        inv_std: Vec<f64>,
        /// True when normalization used running stats (no batch coupling).
        frozen: bool,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub(crate) kind: LayerKind,
    pub(crate) name: String,
    pub(crate) weights: Vec<Tensor>,
    pub(crate) running: Option<RunningStats>,
}

impl Layer {
    /// Creates a layer with freshly initialized weights.
    ///
    /// Dense and conv weights and biases are drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`;
    /// norm layers start at gamma = 1, beta = 0.
    pub fn new(kind: LayerKind, name: impl Into<String>, rng: &mut Rng) -> Result<Self> {
        kind.validate()?;
        let uniform = |shape: &[usize], fan_in: usize, rng: &mut Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut t = Tensor::zeros(shape);
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-bound..bound));
            t
        };
        let (weights, running) = match kind {
            LayerKind::Dense { inputs, outputs } => {
                let w = uniform(&[inputs, outputs], inputs, rng);
                let b = uniform(&[outputs], inputs, rng);
                (vec![w, b], None)
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                let w = uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng);
                let b = uniform(&[out_channels], fan_in, rng);
                (vec![w, b], None)
            }
            LayerKind::Norm { mode, channels } => {
                let running = (mode == NormMode::Batch).then(|| RunningStats {
                    mean: vec![0.0; channels],
                    var: vec![1.0; channels],
                    momentum: RUNNING_MOMENTUM,
                });
                (
                    vec![Tensor::full(&[channels], 1.0), Tensor::zeros(&[channels])],
                    running,
                )
            }
            _ => (Vec::new(), None),
        };
        Ok(Self {
            kind,
            name: name.into(),
            weights,
            running,
        })
    }

    pub fn kind(&self) -> &LayerKind {
        &self.kind
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn running_stats(&self) -> Option<&RunningStats> {
        self.running.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    /// Per-sample output dims for the given per-sample input dims.
    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |expected: Vec<usize>| {
            Err(FedError::shape(
                format!("input of layer `{}`", self.name),
                &expected,
                input,
            ))
        };
        match self.kind {
            LayerKind::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return bad(vec![inputs]);
                }
                Ok(vec![outputs])
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return bad(vec![in_channels, 0, 0]);
                }
                let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if h < kernel || w < kernel {
                    return bad(vec![in_channels, kernel, kernel]);
                }
                Ok(vec![
                    out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            LayerKind::Relu | LayerKind::Identity => Ok(input.to_vec()),
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::GlobalAvgPool => {
                if input.len() != 3 {
                    return bad(vec![0, 0, 0]);
                }
                Ok(vec![input[0]])
            }
            LayerKind::Norm { channels, .. } => {
                if input.is_empty() || input[0] != channels {
                    return bad(vec![channels]);
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Forward pass without side effects. Batch statistics are returned for
    /// the caller to fold into running stats.
    pub(crate) fn forward(
        &self,
        x: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, Cache, Option<BatchStats>)> {
        let out_dims = self.output_dims(x.sample_dims())?;
        let mut out_shape = vec![x.batch()];
        out_shape.extend_from_slice(&out_dims);
        match self.kind {
            LayerKind::Dense { inputs, outputs } => {
                let (w, b) = (self.weights[0].data(), self.weights[1].data());
                let mut y = Tensor::zeros(&out_shape);
                for (xr, yr) in x
                    .data()
                    .chunks_exact(inputs)
                    .zip(y.data_mut().chunks_exact_mut(outputs))
                {
                    yr.copy_from_slice(b);
                    for (i, &xi) in xr.iter().enumerate() {
                        let wr = &w[i * outputs..(i + 1) * outputs];
                        for (yo, &wo) in yr.iter_mut().zip(wr) {
                            *yo += xi * wo;
                        }
                    }
                }
                Ok((y, Cache::Input(x.clone()), None))
            }
            LayerKind::Conv2d { .. } => {
                let y = self.conv_forward(x, &out_shape);
                Ok((y, Cache::Input(x.clone()), None))
            }
            LayerKind::Relu => {
                let mut y = x.clone();
                y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                Ok((y, Cache::Input(x.clone()), None))
            }
            LayerKind::Flatten => {
                let y = x.clone().reshape(out_shape)?;
                Ok((y, Cache::InputShape(x.shape().to_vec()), None))
            }
            LayerKind::GlobalAvgPool => {
                let spatial = x.shape()[2] * x.shape()[3];
                let mut y = Tensor::zeros(&out_shape);
                for (plane, yv) in x.data().chunks_exact(spatial).zip(y.data_mut()) {
                    *yv = plane.iter().sum::<f64>() / spatial as f64;
                }
                Ok((y, Cache::InputShape(x.shape().to_vec()), None))
            }
            LayerKind::Norm { mode: nm, channels } => self.norm_forward(x, nm, channels, mode),
            LayerKind::Identity => Ok((x.clone(), Cache::Nothing, None)),
        }
    }

    /// Returns `(input_grad, weight_grads)`.
    pub(crate) fn backward(&self, cache: Cache, g: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        match (&self.kind, cache) {
            (&LayerKind::Dense { inputs, outputs }, Cache::Input(x)) => {
                let w = self.weights[0].data();
                let mut dw = Tensor::zeros(&[inputs, outputs]);
                let mut db = Tensor::zeros(&[outputs]);
                let mut dx = Tensor::zeros(x.shape());
                for ((xr, gr), dxr) in x
                    .data()
                    .chunks_exact(inputs)
                    .zip(g.data().chunks_exact(outputs))
                    .zip(dx.data_mut().chunks_exact_mut(inputs))
                {
                    for (dbo, &go) in db.data_mut().iter_mut().zip(gr) {
                        *dbo += go;
                    }
                    for (i, (&xi, dxi)) in xr.iter().zip(dxr.iter_mut()).enumerate() {
                        let wr = &w[i * outputs..(i + 1) * outputs];
                        let dwr = &mut dw.data_mut()[i * outputs..(i + 1) * outputs];
                        let mut acc = 0.0;
                        for ((dwo, &wo), &go) in dwr.iter_mut().zip(wr).zip(gr) {
                            *dwo += xi * go;
                            acc += go * wo;
                        }
                        *dxi = acc;
                    }
                }
                Ok((dx, vec![dw, db]))
            }
            (LayerKind::Conv2d { .. }, Cache::Input(x)) => Ok(self.conv_backward(&x, g)),
            (LayerKind::Relu, Cache::Input(x)) => {
                let mut dx = g.clone();
                dx.data_mut().iter_mut().zip(x.data()).for_each(|(d, &xv)| {
                    if xv <= 0.0 {
                        *d = 0.0;
                    }
                });
                Ok((dx, Vec::new()))
            }
            (LayerKind::Flatten, Cache::InputShape(shape)) => {
                Ok((g.clone().reshape(shape)?, Vec::new()))
            }
            (LayerKind::GlobalAvgPool, Cache::InputShape(shape)) => {
                let spatial = shape[2] * shape[3];
                let mut dx = Tensor::zeros(&shape);
                for (plane, &gv) in dx.data_mut().chunks_exact_mut(spatial).zip(g.data()) {
                    plane.fill(gv / spatial as f64);
                }
                Ok((dx, Vec::new()))
            }
            (
                &LayerKind::Norm { mode, channels },
                Cache::Norm {
                    xhat,
                    inv_std,
                    frozen,
                },
            ) => Ok(self.norm_backward(mode, channels, &xhat, &inv_std, frozen, g)),
            (LayerKind::Identity, Cache::Nothing) => Ok((g.clone(), Vec::new())),
            _ => Err(FedError::Protocol(format!(
                "cache does not belong to layer `{}`",
                self.name
            ))),
        }
    }

    pub(crate) fn apply_batch_stats(&mut self, stats: BatchStats) {
        if let Some(r) = self.running.as_mut() {
            let m = r.momentum;
            for (rm, bm) in r.mean.iter_mut().zip(&stats.mean) {
                *rm = (1.0 - m) * *rm + m * bm;
            }
            for (rv, bv) in r.var.iter_mut().zip(&stats.unbiased_var) {
                *rv = (1.0 - m) * *rv + m * bv;
            }
        }
    }

    fn conv_forward(&self, x: &Tensor, out_shape: &[usize]) -> Tensor {
        let LayerKind::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride,
            padding: pad,
        } = self.kind
        else {
            unreachable!()
        };
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let (oh, ow) = (out_shape[2], out_shape[3]);
        let (wt, bias) = (self.weights[0].data(), self.weights[1].data());
        let mut y = Tensor::zeros(out_shape);
        let xd = x.data();
        let yd = y.data_mut();
        for b in 0..x.batch() {
            for co in 0..cout {
                let ybase = (b * cout + co) * oh * ow;
                yd[ybase..ybase + oh * ow].fill(bias[co]);
                for ci in 0..cin {
                    let xbase = (b * cin + ci) * h * w;
                    let wbase = (co * cin + ci) * k * k;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wt[wbase + ky * k + kx]
                                        * xd[xbase + iy as usize * w + ix as usize];
                                }
                            }
                            yd[ybase + oy * ow + ox] += acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn conv_backward(&self, x: &Tensor, g: &Tensor) -> (Tensor, Vec<Tensor>) {
        let LayerKind::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride,
            padding: pad,
        } = self.kind
        else {
            unreachable!()
        };
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let (oh, ow) = (g.shape()[2], g.shape()[3]);
        let wt = self.weights[0].data();
        let mut dw = Tensor::zeros(self.weights[0].shape());
        let mut db = Tensor::zeros(&[cout]);
        let mut dx = Tensor::zeros(x.shape());
        let (xd, gd) = (x.data(), g.data());
        for b in 0..x.batch() {
            for co in 0..cout {
                let gbase = (b * cout + co) * oh * ow;
                db.data_mut()[co] += gd[gbase..gbase + oh * ow].iter().sum::<f64>();
                for ci in 0..cin {
                    let xbase = (b * cin + ci) * h * w;
                    let wbase = (co * cin + ci) * k * k;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gd[gbase + oy * ow + ox];
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = xbase + iy as usize * w + ix as usize;
                                    dw.data_mut()[wbase + ky * k + kx] += gv * xd[xi];
                                    dx.data_mut()[xi] += gv * wt[wbase + ky * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        (dx, vec![dw, db])
    }

    fn norm_forward(
        &self,
        x: &Tensor,
        nm: NormMode,
        channels: usize,
        mode: Mode,
    ) -> Result<(Tensor, Cache, Option<BatchStats>)> {
        let layout = NormLayout::new(x.shape(), nm, channels);
        let (gamma, beta) = (self.weights[0].data(), self.weights[1].data());
        let xd = x.data();
        let frozen = nm == NormMode::Batch && mode == Mode::Eval;

        let (mean, inv_std, stats) = if frozen {
            let r = self
                .running
                .as_ref()
                .expect("batch norm carries running stats");
            let inv: Vec<f64> = r.var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            (r.mean.clone(), inv, None)
        } else {
            let mut sum = vec![0.0; layout.sets];
            layout.for_each(|i, s| sum[s] += xd[i]);
            let mean: Vec<f64> = sum.iter().map(|v| v / layout.set_size as f64).collect();
            let mut sq = vec![0.0; layout.sets];
            layout.for_each(|i, s| {
                let d = xd[i] - mean[s];
                sq[s] += d * d;
            });
            let n = layout.set_size as f64;
            let inv: Vec<f64> = sq.iter().map(|v| 1.0 / (v / n + NORM_EPS).sqrt()).collect();
            let stats = (nm == NormMode::Batch && mode == Mode::Train).then(|| BatchStats {
                mean: mean.clone(),
                unbiased_var: sq
                    .iter()
                    .map(|v| if n > 1.0 { v / (n - 1.0) } else { *v / n })
                    .collect(),
            });
            (mean, inv, stats)
        };

        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        {
            let (xh, yd) = (xhat.data_mut(), y.data_mut());
            layout.for_each_channel(|i, s, c| {
                let v = (xd[i] - mean[s]) * inv_std[s];
                xh[i] = v;
                yd[i] = gamma[c] * v + beta[c];
            });
        }
        Ok((
            y,
            Cache::Norm {
                xhat,
                inv_std,
                frozen,
            },
            stats,
        ))
    }

    fn norm_backward(
        &self,
        nm: NormMode,
        channels: usize,
        xhat: &Tensor,
        inv_std: &[f64],
        frozen: bool,
        g: &Tensor,
    ) -> (Tensor, Vec<Tensor>) {
        let layout = NormLayout::new(xhat.shape(), nm, channels);
        let gamma = self.weights[0].data();
        let (xh, gd) = (xhat.data(), g.data());
        let mut dgamma = Tensor::zeros(&[channels]);
        let mut dbeta = Tensor::zeros(&[channels]);
        let mut dxhat = vec![0.0; xh.len()];
        {
            let (dg, dbt) = (dgamma.data_mut(), dbeta.data_mut());
            layout.for_each_channel(|i, _, c| {
                dg[c] += gd[i] * xh[i];
                dbt[c] += gd[i];
                dxhat[i] = gd[i] * gamma[c];
            });
        }
        let mut dx = Tensor::zeros(xhat.shape());
        let dxd = dx.data_mut();
        if frozen {
            layout.for_each(|i, s| dxd[i] = dxhat[i] * inv_std[s]);
        } else {
            let mut sum_d = vec![0.0; layout.sets];
            let mut sum_dx = vec![0.0; layout.sets];
            layout.for_each(|i, s| {
                sum_d[s] += dxhat[i];
                sum_dx[s] += dxhat[i] * xh[i];
            });
            let n = layout.set_size as f64;
            layout.for_each(|i, s| {
                dxd[i] = inv_std[s] / n * (n * dxhat[i] - sum_d[s] - xh[i] * sum_dx[s]);
            });
        }
        (dx, vec![dgamma, dbeta])
    }
}

/// Index bookkeeping for normalization sets. Batch mode has one set per
/// channel; group mode has one set per (sample, group).
struct NormLayout {
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: Option<usize>,
    sets: usize,
    set_size: usize,
}

impl NormLayout {
    fn new(shape: &[usize], mode: NormMode, channels: usize) -> Self {
        let batch = shape[0];
        let spatial: usize = shape[2..].iter().product();
        match mode {
            NormMode::Batch => Self {
                batch,
                channels,
                spatial,
                groups: None,
                sets: channels,
                set_size: batch * spatial,
            },
            NormMode::Group(g) => Self {
                batch,
                channels,
                spatial,
                groups: Some(g),
                sets: batch * g,
                set_size: channels / g * spatial,
            },
        }
    }

    fn set_of(&self, b: usize, c: usize) -> usize {
        match self.groups {
            None => c,
            Some(g) => b * g + c / (self.channels / g),
        }
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        self.for_each_channel(|i, s, _| f(i, s));
    }

    fn for_each_channel(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.batch {
            for c in 0..self.channels {
                let s = self.set_of(b, c);
                let base = (b * self.channels + c) * self.spatial;
                for i in base..base + self.spatial {
                    f(i, s, c);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;

    fn rng() -> Rng {
        SeedStreams::new(3).stream("test")
    }

    #[test]
    fn group_count_must_divide_channels() {
        let err = Layer::new(
            LayerKind::Norm {
                mode: NormMode::Group(3),
                channels: 8,
            },
            "gn1",
            &mut rng(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("try 2"), "{err}");
        assert_eq!(largest_divisor_at_most(24, 32), 24);
        assert_eq!(largest_divisor_at_most(48, 32), 24);
    }

    #[test]
    fn conv_output_dims() {
        let l = Layer::new(
            LayerKind::Conv2d {
                in_channels: 1,
                out_channels: 4,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            "conv1",
            &mut rng(),
        )
        .unwrap();
        assert_eq!(l.output_dims(&[1, 8, 8]).unwrap(), vec![4, 4, 4]);
        assert!(l.output_dims(&[2, 8, 8]).is_err());
    }

    #[test]
    fn group_norm_sets_are_standardized() {
        let l = Layer::new(
            LayerKind::Norm {
                mode: NormMode::Group(2),
                channels: 4,
            },
            "gn1",
            &mut rng(),
        )
        .unwrap();
        let mut r = rng();
        let mut x = Tensor::zeros(&[3, 4, 2, 2]);
        x.data_mut()
            .iter_mut()
            .for_each(|v| *v = r.random_range(-3.0..5.0));
        let (y, _, stats) = l.forward(&x, Mode::Train).unwrap();
        assert!(stats.is_none());
        // each (sample, group) block is 2 channels * 4 pixels = 8 contiguous values
        for block in y.data().chunks_exact(8) {
            let mean = block.iter().sum::<f64>() / 8.0;
            let var = block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6);
            // eps shrinks the variance slightly below one
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn group_norm_is_batch_independent() {
        let l = Layer::new(
            LayerKind::Norm {
                mode: NormMode::Group(2),
                channels: 4,
            },
            "gn1",
            &mut rng(),
        )
        .unwrap();
        let mut r = rng();
        let mut x = Tensor::zeros(&[2, 4, 3, 3]);
        x.data_mut().iter_mut().for_each(|v| *v = r.random());
        let (full, _, _) = l.forward(&x, Mode::Train).unwrap();
        let (single, _, _) = l.forward(&x.rows(1, 2).unwrap(), Mode::Train).unwrap();
        assert!(single.bitwise_eq(&full.rows(1, 2).unwrap()));
    }

    #[test]
    fn batch_norm_running_stats_update() {
        let mut l = Layer::new(
            LayerKind::Norm {
                mode: NormMode::Batch,
                channels: 1,
            },
            "bn1",
            &mut rng(),
        )
        .unwrap();
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, _, stats) = l.forward(&x, Mode::Train).unwrap();
        l.apply_batch_stats(stats.unwrap());
        let r = l.running_stats().unwrap();
        assert!((r.mean[0] - 0.25).abs() < 1e-12);
        // unbiased var of 1..4 is 5/3
        assert!((r.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        let (_, _, eval_stats) = l.forward(&x, Mode::Eval).unwrap();
        assert!(eval_stats.is_none());
    }
}
