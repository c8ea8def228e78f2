//! SUM-reduced losses and their gradients with respect to the predictions.
//!
//! Cross-entropy takes raw logits and returns the fused softmax-CE gradient.
//! Because the reduction is a plain sum over rows, the loss of a batch equals
//! the sum of the losses of any partition of its rows, and every row's
//! gradient depends only on that row.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    L1,
}

pub fn loss(kind: LossKind, predictions: &Tensor, labels: &Tensor) -> Result<(f64, Tensor)> {
    if predictions.rank() != 2 {
        return Err(FedError::shape(
            "loss predictions (batch x outputs)",
            &[predictions.batch(), predictions.row_len()],
            predictions.shape(),
        ));
    }
    if labels.batch() != predictions.batch() {
        return Err(FedError::shape(
            "loss labels batch",
            &[predictions.batch()],
            &[labels.batch()],
        ));
    }
    match kind {
        LossKind::CrossEntropy => cross_entropy(predictions, labels),
        LossKind::L1 => l1(predictions, labels),
    }
}

fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<(f64, Tensor)> {
    let classes = logits.row_len();
    let soft_targets = labels.shape() == logits.shape();
    if !soft_targets && labels.row_len() != 1 {
        return Err(FedError::shape(
            "cross-entropy labels (class index or one-hot)",
            logits.shape(),
            labels.shape(),
        ));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for (i, (z, g)) in logits
        .data()
        .chunks_exact(classes)
        .zip(grad.data_mut().chunks_exact_mut(classes))
        .enumerate()
    {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum_exp.ln();
        for (gc, &zc) in g.iter_mut().zip(z) {
            *gc = (zc - m).exp() / sum_exp;
        }
        if soft_targets {
            let t = labels.row(i);
            let mass: f64 = t.iter().sum();
            for ((gc, &tc), &zc) in g.iter_mut().zip(t).zip(z) {
                if tc != 0.0 {
                    total += tc * (lse - zc);
                }
                *gc = *gc * mass - tc;
            }
        } else {
            let y = labels.row(i)[0];
            if y < 0.0 || y.fract() != 0.0 || y as usize >= classes {
                return Err(FedError::LabelOutOfRange { label: y, classes });
            }
            let y = y as usize;
            total += lse - z[y];
            g[y] -= 1.0;
        }
    }
    Ok((total, grad))
}

fn l1(predictions: &Tensor, labels: &Tensor) -> Result<(f64, Tensor)> {
    if labels.len() != predictions.len() {
        return Err(FedError::shape(
            "l1 labels",
            predictions.shape(),
            labels.shape(),
        ));
    }
    let mut grad = Tensor::zeros(predictions.shape());
    let mut total = 0.0;
    for ((g, &p), &y) in grad
        .data_mut()
        .iter_mut()
        .zip(predictions.data())
        .zip(labels.data())
    {
        let r = p - y;
        total += r.abs();
        // subgradient 0 at a zero residual
        *g = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    Ok((total, grad))
}

#[derive(Clone, Debug)]
pub struct ChunkedLoss {
    pub value: f64,
    pub chunk_grads: Vec<Tensor>,
    pub per_chunk_values: Vec<f64>,
}

/// Loss over chunks computed independently and summed; equals [`loss`] on
/// the concatenation of the chunks.
pub fn loss_chunked(kind: LossKind, chunks: &[(Tensor, Tensor)]) -> Result<ChunkedLoss> {
    if chunks.is_empty() {
        return Err(FedError::Empty("loss chunks".into()));
    }
    let mut per_chunk_values = Vec::with_capacity(chunks.len());
    let mut chunk_grads = Vec::with_capacity(chunks.len());
    for (p, y) in chunks {
        let (v, g) = loss(kind, p, y)?;
        per_chunk_values.push(v);
        chunk_grads.push(g);
    }
    Ok(ChunkedLoss {
        value: per_chunk_values.iter().sum(),
        chunk_grads,
        per_chunk_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confident_correct_prediction_has_zero_loss() {
        let z = Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap();
        let (v, _) = loss(LossKind::CrossEntropy, &z, &Tensor::full(&[1, 1], 0.0)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn uniform_logits_two_classes() {
        let z = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let (v, g) = loss(LossKind::CrossEntropy, &z, &Tensor::full(&[1, 1], 0.0)).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn one_hot_and_index_labels_agree() {
        let z = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.0, 0.5, -0.5]]).unwrap();
        let idx = Tensor::new(vec![2, 1], vec![2.0, 0.0]).unwrap();
        let hot = Tensor::from_rows(&[vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let (v1, g1) = loss(LossKind::CrossEntropy, &z, &idx).unwrap();
        let (v2, g2) = loss(LossKind::CrossEntropy, &z, &hot).unwrap();
        assert!((v1 - v2).abs() < 1e-14);
        assert!(g1.max_rel_diff(&g2, 1e-12) < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let z = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            loss(LossKind::CrossEntropy, &z, &Tensor::full(&[1, 1], 2.0)),
            Err(FedError::LabelOutOfRange { .. })
        ));
        assert!(loss(LossKind::CrossEntropy, &z, &Tensor::full(&[1, 1], 0.5)).is_err());
    }

    #[test]
    fn l1_value_and_gradient() {
        let (v, g) = loss(
            LossKind::L1,
            &Tensor::full(&[1, 1], 3.0),
            &Tensor::full(&[1, 1], 5.0),
        )
        .unwrap();
        assert_eq!(v, 2.0);
        assert_eq!(g.data(), &[-1.0]);
        let (_, g0) = loss(
            LossKind::L1,
            &Tensor::full(&[1, 1], 5.0),
            &Tensor::full(&[1, 1], 5.0),
        )
        .unwrap();
        assert_eq!(g0.data(), &[0.0]);
    }

    #[test]
    fn single_chunk_matches_loss() {
        let z = Tensor::from_rows(&[vec![0.3, -1.2], vec![1.0, 0.5]]).unwrap();
        let y = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        let (v, g) = loss(LossKind::CrossEntropy, &z, &y).unwrap();
        let c = loss_chunked(LossKind::CrossEntropy, &[(z, y)]).unwrap();
        assert_eq!(c.value, v);
        assert!(c.chunk_grads[0].bitwise_eq(&g));
        assert!(loss_chunked(LossKind::L1, &[]).is_err());
    }
}
