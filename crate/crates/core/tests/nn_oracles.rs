use fedsplit::nn::{
    deserialize_weights, grad_check, loss, loss_chunked, serialize_weights, sgd_step, CutSpec,
    Layer, LayerKind, LayerSpec, LayerStack, LossKind, Mode, NormMode, OptimState, Task,
};
use fedsplit::rng::{Rng, SeedStreams};
use fedsplit::tensor::{bitwise_eq_all, Tensor};
use rand::Rng as _;
use rand_distr::StandardNormal;

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(
            (x - y).abs() <= tol * (1.0 + y.abs()),
            "index {i}: {x} vs {y}"
        );
    }
}

fn single(kind: LayerKind, input: Vec<usize>, seed: u64) -> LayerStack {
    let layer = Layer::new(kind, "l", &mut SeedStreams::new(seed).stream("init")).unwrap();
    LayerStack::new(input, vec![layer], None).unwrap()
}

/// `x @ w + b` with `w` stored `[inputs, outputs]` row-major.
fn matmul_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, i_dim) = (x.batch(), x.row_len());
    let o_dim = b.len();
    let mut out = vec![0.0; n * o_dim];
    for r in 0..n {
        for o in 0..o_dim {
            let mut acc = b.data()[o];
            for i in 0..i_dim {
                acc += x.data()[r * i_dim + i] * w.data()[i * o_dim + o];
            }
            out[r * o_dim + o] = acc;
        }
    }
    out
}

#[test]
fn dense_hand_example() {
    let mut s = single(
        LayerKind::Dense {
            inputs: 2,
            outputs: 1,
        },
        vec![2],
        0,
    );
    s.set_params(&[
        Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap(),
        Tensor::zeros(&[1]),
    ])
    .unwrap();
    let y = s
        .predict(&Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap())
        .unwrap();
    assert_eq!(y.data(), &[7.0]);
}

#[test]
fn mlp_forward_matches_matmul_oracle() {
    let streams = SeedStreams::new(3);
    let stack = LayerStack::build(
        &[5],
        &[
            LayerSpec::Dense { units: 7 },
            LayerSpec::Relu,
            LayerSpec::Dense { units: 3 },
        ],
        None,
        &mut streams.stream("init"),
    )
    .unwrap();
    let x = randn(&[9, 5], &mut streams.stream("data"));
    let p = stack.params();
    let mut h = matmul_oracle(&x, p[0], p[1]);
    h.iter_mut().for_each(|v| *v = v.max(0.0));
    let h = Tensor::new(vec![9, 7], h).unwrap();
    let expect = matmul_oracle(&h, p[2], p[3]);
    close(stack.predict(&x).unwrap().data(), &expect, 1e-12);
}

#[test]
fn identity_stack_passes_through() {
    let s = single(LayerKind::Identity, vec![3], 0);
    let x = randn(&[4, 3], &mut SeedStreams::new(1).stream("data"));
    let (y, tape) = s.forward_frozen(&x, Mode::Train).unwrap();
    assert_eq!(y, x);
    let (gx, grads) = s.backward(tape, &x).unwrap();
    assert_eq!(gx, x);
    assert!(grads.is_empty());
}

#[test]
fn scalar_dense_chain_rule() {
    let mut s = single(
        LayerKind::Dense {
            inputs: 1,
            outputs: 1,
        },
        vec![1],
        0,
    );
    s.set_params(&[
        Tensor::new(vec![1, 1], vec![1.5]).unwrap(),
        Tensor::zeros(&[1]),
    ])
    .unwrap();
    let (_, tape) = s
        .forward(&Tensor::new(vec![1, 1], vec![2.0]).unwrap(), Mode::Train)
        .unwrap();
    let (gx, grads) = s
        .backward(tape, &Tensor::new(vec![1, 1], vec![0.5]).unwrap())
        .unwrap();
    assert_eq!(grads[0].data(), &[1.0]);
    assert_eq!(grads[1].data(), &[0.5]);
    assert_eq!(gx.data(), &[0.75]);
}

fn conv_oracle(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> (Vec<usize>, Vec<f64>) {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let xv = |b: usize, c: usize, i: isize, j: isize| {
        if i < 0 || j < 0 || i >= h as isize || j >= wd as isize {
            0.0
        } else {
            x.data()[((b * cin + c) * h + i as usize) * wd + j as usize]
        }
    };
    let mut out = Vec::with_capacity(n * cout * oh * ow);
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let i = (oy * stride + ky) as isize - pad as isize;
                                let j = (ox * stride + kx) as isize - pad as isize;
                                acc += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                    * xv(bi, ci, i, j);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (vec![n, cout, oh, ow], out)
}

#[test]
fn conv_matches_direct_oracle() {
    for (seed, stride, pad) in [(0, 1, 1), (1, 2, 1), (2, 1, 0), (3, 2, 3)] {
        let kernel = if pad == 3 { 7 } else { 3 };
        let kind = LayerKind::Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel,
            stride,
            padding: pad,
        };
        let s = single(kind, vec![2, 9, 8], seed);
        let x = randn(&[3, 2, 9, 8], &mut SeedStreams::new(seed).stream("data"));
        let p = s.params();
        let (shape, expect) = conv_oracle(&x, p[0], p[1], stride, pad);
        let y = s.predict(&x).unwrap();
        assert_eq!(y.shape(), shape.as_slice());
        close(y.data(), &expect, 1e-12);
    }
}

/// Normalizes every (sample-set) group of `[n, c, hw]` values with biased variance.
fn norm_oracle(x: &Tensor, groups: Option<usize>) -> Vec<f64> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let hw: usize = x.shape()[2..].iter().product();
    let at = |b: usize, ch: usize, i: usize| (b * c + ch) * hw + i;
    let mut out = vec![0.0; x.len()];
    let mut normalize = |members: Vec<usize>| {
        let m = members.iter().map(|&i| x.data()[i]).sum::<f64>() / members.len() as f64;
        let v = members
            .iter()
            .map(|&i| (x.data()[i] - m).powi(2))
            .sum::<f64>()
            / members.len() as f64;
        for i in members {
            out[i] = (x.data()[i] - m) / (v + 1e-5).sqrt();
        }
    };
    match groups {
        None => {
            for ch in 0..c {
                normalize(
                    (0..n)
                        .flat_map(|b| (0..hw).map(move |i| at(b, ch, i)))
                        .collect(),
                );
            }
        }
        Some(g) => {
            let per = c / g;
            for b in 0..n {
                for gi in 0..g {
                    normalize(
                        (gi * per..(gi + 1) * per)
                            .flat_map(|ch| (0..hw).map(move |i| at(b, ch, i)))
                            .collect(),
                    );
                }
            }
        }
    }
    out
}

#[test]
fn batch_norm_matches_per_channel_oracle() {
    let s = single(
        LayerKind::Norm {
            mode: NormMode::Batch,
            channels: 3,
        },
        vec![3, 4, 4],
        0,
    );
    let x = randn(&[5, 3, 4, 4], &mut SeedStreams::new(1).stream("data"));
    let (y, _) = s.forward_frozen(&x, Mode::Train).unwrap();
    close(y.data(), &norm_oracle(&x, None), 1e-12);

    let flat = single(
        LayerKind::Norm {
            mode: NormMode::Batch,
            channels: 3,
        },
        vec![3],
        0,
    );
    let x = randn(&[6, 3], &mut SeedStreams::new(2).stream("data"));
    let (y, _) = flat.forward_frozen(&x, Mode::Train).unwrap();
    close(
        y.data(),
        &norm_oracle(&x.clone().reshape(vec![6, 3, 1]).unwrap(), None),
        1e-12,
    );
}

#[test]
fn group_norm_matches_group_oracle() {
    for groups in [1, 2, 4] {
        let s = single(
            LayerKind::Norm {
                mode: NormMode::Group(groups),
                channels: 4,
            },
            vec![4, 3, 3],
            0,
        );
        let x = randn(
            &[3, 4, 3, 3],
            &mut SeedStreams::new(groups as u64).stream("data"),
        );
        let (y, _) = s.forward_frozen(&x, Mode::Train).unwrap();
        close(y.data(), &norm_oracle(&x, Some(groups)), 1e-12);
    }
}

#[test]
fn group_norm_is_batch_independent_and_standardized() {
    let s = single(
        LayerKind::Norm {
            mode: NormMode::Group(2),
            channels: 4,
        },
        vec![4, 5, 5],
        0,
    );
    let x = randn(&[3, 4, 5, 5], &mut SeedStreams::new(9).stream("data"));
    let (full, _) = s.forward_frozen(&x, Mode::Train).unwrap();
    for b in 0..3 {
        let (one, _) = s
            .forward_frozen(&x.rows(b, b + 1).unwrap(), Mode::Train)
            .unwrap();
        assert_eq!(one.data(), full.row(b));
        for g in one.data().chunks(50) {
            let m = g.iter().sum::<f64>() / 50.0;
            let v = g.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-3, "mean {m} var {v}");
        }
    }
}

#[test]
fn cross_entropy_examples() {
    let z = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
    let (v, g) = loss(
        LossKind::CrossEntropy,
        &z,
        &Tensor::from_rows(&[vec![0.0]]).unwrap(),
    )
    .unwrap();
    assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    close(g.data(), &[-0.5, 0.5], 1e-15);

    let z = Tensor::from_rows(&[vec![-0.5, 0.5]]).unwrap();
    let (v, _) = loss(
        LossKind::CrossEntropy,
        &z,
        &Tensor::from_rows(&[vec![1.0]]).unwrap(),
    )
    .unwrap();
    assert!((v - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);

    let z = Tensor::from_rows(&[vec![60.0, -60.0]]).unwrap();
    let (v, _) = loss(
        LossKind::CrossEntropy,
        &z,
        &Tensor::from_rows(&[vec![0.0]]).unwrap(),
    )
    .unwrap();
    assert!(v < 1e-12);
}

#[test]
fn l1_example() {
    let (v, g) = loss(
        LossKind::L1,
        &Tensor::from_rows(&[vec![3.0]]).unwrap(),
        &Tensor::from_rows(&[vec![5.0]]).unwrap(),
    )
    .unwrap();
    assert_eq!(v, 2.0);
    assert_eq!(g.data(), &[-1.0]);
}

fn log_sum_exp_ce(z: &Tensor, y: &Tensor) -> f64 {
    (0..z.batch())
        .map(|i| {
            let row = z.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y.data()[i] as usize]
        })
        .sum()
}

#[test]
fn chunked_loss_matches_hand_oracle() {
    let mut rng = SeedStreams::new(5).stream("chunks");
    for _ in 0..100 {
        let n = rng.random_range(3..40usize);
        let classes = rng.random_range(2..5usize);
        let z = randn(&[n, classes], &mut rng);
        let y = Tensor::new(
            vec![n, 1],
            (0..n)
                .map(|_| rng.random_range(0..classes) as f64)
                .collect(),
        )
        .unwrap();
        let a = rng.random_range(1..n - 1);
        let b = rng.random_range(1..n - a);
        let sizes = [a, b, n - a - b];
        let chunks: Vec<_> = z
            .split_batch(&sizes)
            .unwrap()
            .into_iter()
            .zip(y.split_batch(&sizes).unwrap())
            .collect();
        let c = loss_chunked(LossKind::CrossEntropy, &chunks).unwrap();
        let oracle = log_sum_exp_ce(&z, &y);
        assert!((c.value - oracle).abs() <= 1e-12, "{} vs {oracle}", c.value);
        assert!(
            (c.per_chunk_values.iter().sum::<f64>()
                - loss(LossKind::CrossEntropy, &z, &y).unwrap().0)
                .abs()
                <= 1e-12
        );
    }
    let z = Tensor::from_rows(&[vec![0.3, -0.1]]).unwrap();
    let y = Tensor::from_rows(&[vec![1.0]]).unwrap();
    let one = loss_chunked(LossKind::CrossEntropy, &[(z.clone(), y.clone())]).unwrap();
    assert_eq!(one.value, loss(LossKind::CrossEntropy, &z, &y).unwrap().0);
}

#[test]
fn sgd_examples() {
    let mut w = Tensor::scalar(1.0);
    let mut st = OptimState::new(0.1, 0.0, &[&w]).unwrap();
    st.step(vec![&mut w], &[Tensor::scalar(0.5)]).unwrap();
    assert!((w.data()[0] - 0.95).abs() < 1e-15);

    let mut w = Tensor::scalar(0.0);
    let mut st = OptimState::new(1.0, 0.9, &[&w]).unwrap();
    st.step(vec![&mut w], &[Tensor::scalar(1.0)]).unwrap();
    assert_eq!((st.buffers()[0].data()[0], w.data()[0]), (1.0, -1.0));
    st.step(vec![&mut w], &[Tensor::scalar(1.0)]).unwrap();
    assert!((st.buffers()[0].data()[0] - 1.9).abs() < 1e-15);
    assert!((w.data()[0] + 2.9).abs() < 1e-15);
}

#[test]
fn zero_gradient_leaves_weights() {
    let streams = SeedStreams::new(0);
    let mut s = LayerStack::build(
        &[3],
        &[LayerSpec::Dense { units: 2 }],
        None,
        &mut streams.stream("init"),
    )
    .unwrap();
    let before = s.params_cloned();
    let mut st = OptimState::for_stack(0.5, 0.9, &s).unwrap();
    let zeros: Vec<Tensor> = before.iter().map(|t| Tensor::zeros(t.shape())).collect();
    sgd_step(&mut s, &zeros, &mut st).unwrap();
    assert!(bitwise_eq_all(&before, &s.params_cloned()));
}

fn labelled(task: Task, n: usize, rng: &mut Rng) -> (LossKind, Tensor) {
    match task {
        Task::Classification { classes } => (
            LossKind::CrossEntropy,
            Tensor::new(
                vec![n, 1],
                (0..n)
                    .map(|_| rng.random_range(0..classes) as f64)
                    .collect(),
            )
            .unwrap(),
        ),
        Task::Regression => (
            LossKind::L1,
            Tensor::new(
                vec![n, 1],
                (0..n)
                    .map(|i| if i % 2 == 0 { 20.0 } else { -20.0 })
                    .collect(),
            )
            .unwrap(),
        ),
    }
}

fn check_stack(input: &[usize], specs: &[LayerSpec], task: Task, tol: f64) {
    let eps = if matches!(task, Task::Regression) && specs.len() == 1 {
        1e-3
    } else {
        1e-5
    };
    let mut worst = 0.0_f64;
    for seed in 0..20 {
        let streams = SeedStreams::new(seed);
        let stack =
            LayerStack::build(input, specs, Some(task), &mut streams.stream("init")).unwrap();
        let mut rng = streams.stream("data");
        let mut shape = vec![6];
        shape.extend_from_slice(input);
        let x = randn(&shape, &mut rng);
        let (kind, y) = labelled(task, 6, &mut rng);
        worst = worst.max(grad_check(&stack, &x, &y, kind, eps).unwrap().max_rel_error);
    }
    assert!(worst <= tol, "{specs:?}: {worst:e}");
}

#[test]
fn grad_check_per_layer_kind() {
    use LayerSpec::*;
    let cls = Task::Classification { classes: 3 };
    check_stack(&[4], &[Dense { units: 1 }], Task::Regression, 1e-6);
    check_stack(&[5], &[Dense { units: 6 }, Dense { units: 3 }], cls, 1e-6);
    check_stack(
        &[5],
        &[Dense { units: 6 }, Relu, Dense { units: 3 }],
        cls,
        1e-4,
    );
    check_stack(
        &[5],
        &[Dense { units: 6 }, BatchNorm, Relu, Dense { units: 3 }],
        cls,
        1e-4,
    );
    check_stack(
        &[2, 5, 5],
        &[
            Conv {
                channels: 3,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            Flatten,
            Dense { units: 3 },
        ],
        cls,
        1e-4,
    );
    check_stack(
        &[2, 4, 4],
        &[
            Conv {
                channels: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            BatchNorm,
            GlobalAvgPool,
            Dense { units: 3 },
        ],
        cls,
        1e-4,
    );
    check_stack(
        &[2, 4, 4],
        &[
            Conv {
                channels: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            GroupNorm { groups: 2 },
            Flatten,
            Dense { units: 3 },
        ],
        cls,
        1e-4,
    );
    check_stack(&[3], &[Identity, Dense { units: 3 }], cls, 1e-6);
}

#[test]
fn grad_check_of_weightless_stack_is_empty() {
    let s = single(LayerKind::Identity, vec![2], 0);
    let x = Tensor::from_rows(&[vec![0.1, 0.2]]).unwrap();
    let r = grad_check(
        &s,
        &x,
        &Tensor::from_rows(&[vec![1.0]]).unwrap(),
        LossKind::CrossEntropy,
        1e-5,
    )
    .unwrap();
    assert_eq!((r.max_rel_error, r.checked), (0.0, 0));
}

fn bn_mlp(seed: u64) -> LayerStack {
    use LayerSpec::*;
    LayerStack::build(
        &[4],
        &[
            Dense { units: 6 },
            BatchNorm,
            Relu,
            Dense { units: 5 },
            Relu,
            Dense { units: 2 },
        ],
        Some(Task::Classification { classes: 2 }),
        &mut SeedStreams::new(seed).stream("init"),
    )
    .unwrap()
}

#[test]
fn serialize_round_trip_and_truncation() {
    let s = bn_mlp(4);
    let blob = serialize_weights(&s);
    let back = deserialize_weights(&blob).unwrap();
    assert!(bitwise_eq_all(&back, &s.state_tensors()));
    assert!(deserialize_weights(&blob[..blob.len() - 1]).is_err());

    let empty = single(LayerKind::Relu, vec![2], 0);
    let blob = serialize_weights(&empty);
    assert!(deserialize_weights(&blob).unwrap().is_empty());
}

#[test]
fn split_is_lossless_at_every_cut() {
    let s = bn_mlp(2);
    let x = randn(&[7, 4], &mut SeedStreams::new(2).stream("data"));
    let y = Tensor::new(vec![7, 1], (0..7).map(|i| (i % 2) as f64).collect()).unwrap();
    let (out, tape) = s.forward_frozen(&x, Mode::Train).unwrap();
    let (_, g) = loss(LossKind::CrossEntropy, &out, &y).unwrap();
    let (gx, grads) = s.backward(tape, &g).unwrap();
    for c in 0..=s.len() {
        let subs = s.split(CutSpec(c)).unwrap();
        let (h, t1) = subs.institution.forward_frozen(&x, Mode::Train).unwrap();
        let (o, t2) = subs.server.forward_frozen(&h, Mode::Train).unwrap();
        assert_eq!(o, out, "cut {c}");
        let (gh, g2) = subs.server.backward(t2, &g).unwrap();
        let (gx1, g1) = subs.institution.backward(t1, &gh).unwrap();
        assert_eq!(gx1, gx);
        let joined: Vec<Tensor> = g1.into_iter().chain(g2).collect();
        assert!(bitwise_eq_all(&joined, &grads), "cut {c}");
        assert_eq!(subs.rejoin().unwrap().state_tensors(), s.state_tensors());
    }
    assert!(s.split(CutSpec(s.len())).unwrap().server_is_parameterless());
    assert!(s.split(CutSpec(s.len() + 1)).is_err());
}

#[test]
fn forward_is_deterministic() {
    let a = bn_mlp(11);
    let b = bn_mlp(11);
    let x = randn(&[5, 4], &mut SeedStreams::new(1).stream("data"));
    assert_eq!(a, b);
    assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
}
