//! The institution/server boundary: typed messages, round planning,
//! per-party state and the communication ledger.

mod analytic;
mod ledger;

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use analytic::{analytic_epoch_uplink, analytic_floats, AnalyticFloats, ModelShape};
pub use ledger::{CommLedger, LedgerRow, LedgerSummary};

use crate::error::{FedError, Result};
use crate::nn::{LayerStack, OptimState};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Institution to server.
    Uplink,
    /// Server to institution.
    Downlink,
    /// Institution to institution.
    Peer,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Uplink => "uplink",
            Direction::Downlink => "downlink",
            Direction::Peer => "peer",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    /// Cut-layer activations, optionally followed by the batch labels.
    FeatureMaps,
    CutGradients,
    /// Model state: weights followed by normalization running buffers.
    FullWeights,
    /// Weight gradients followed by normalization running buffers.
    FullGradients,
    PredictionChunk,
    ChunkGradients,
    LossScalar,
    /// Samples (features then labels) from a globally shared pool.
    SharedData,
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MessageKind::FeatureMaps => "feature_maps",
            MessageKind::CutGradients => "cut_gradients",
            MessageKind::FullWeights => "full_weights",
            MessageKind::FullGradients => "full_gradients",
            MessageKind::PredictionChunk => "prediction_chunk",
            MessageKind::ChunkGradients => "chunk_gradients",
            MessageKind::LossScalar => "loss_scalar",
            MessageKind::SharedData => "shared_data",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Endpoint {
    Server,
    Institution(usize),
}

/// One payload crossing a boundary. `scalar_count` is declared by the
/// sender and checked against the payload when recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub origin: Endpoint,
    pub destination: Endpoint,
    pub payload: Vec<Tensor>,
    pub scalar_count: u64,
}

impl Message {
    pub fn new(
        kind: MessageKind,
        origin: Endpoint,
        destination: Endpoint,
        payload: Vec<Tensor>,
    ) -> Self {
        let scalar_count = payload.iter().map(|t| t.len() as u64).sum();
        Self {
            kind,
            origin,
            destination,
            payload,
            scalar_count,
        }
    }

    pub fn payload_scalars(&self) -> u64 {
        self.payload.iter().map(|t| t.len() as u64).sum()
    }

    pub fn direction(&self) -> Result<Direction> {
        match (self.origin, self.destination) {
            (Endpoint::Institution(_), Endpoint::Server) => Ok(Direction::Uplink),
            (Endpoint::Server, Endpoint::Institution(_)) => Ok(Direction::Downlink),
            (Endpoint::Institution(_), Endpoint::Institution(_)) => Ok(Direction::Peer),
            (Endpoint::Server, Endpoint::Server) => Err(FedError::Protocol(format!(
                "{} message from the server to itself",
                self.kind
            ))),
        }
    }

    /// Checks the declared count and the payload layout for the kind.
    pub fn validate(&self) -> Result<Direction> {
        let dir = self.direction()?;
        let actual = self.payload_scalars();
        if actual != self.scalar_count {
            return Err(FedError::Protocol(format!(
                "{} declares {} scalars but carries {actual}",
                self.kind, self.scalar_count
            )));
        }
        let p = &self.payload;
        let ok = match self.kind {
            MessageKind::FeatureMaps => {
                (p.len() == 1 || p.len() == 2) && p.iter().all(|t| t.batch() == p[0].batch())
            }
            MessageKind::CutGradients
            | MessageKind::PredictionChunk
            | MessageKind::ChunkGradients => p.len() == 1,
            MessageKind::LossScalar => p.len() == 1 && p[0].len() == 1,
            MessageKind::SharedData => p.len() == 2 && p[0].batch() == p[1].batch(),
            MessageKind::FullWeights | MessageKind::FullGradients => true,
        };
        if !ok {
            return Err(FedError::Protocol(format!(
                "malformed {} payload with {} tensors",
                self.kind,
                p.len()
            )));
        }
        Ok(dir)
    }
}

/// Institutions taking part in one synchronization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round: usize,
    pub ids: Vec<usize>,
}

/// Uniform draw of `st` distinct ids from `0..k`, returned ascending.
pub fn sample_institutions(k: usize, st: usize, round: usize, rng: &mut Rng) -> Result<RoundPlan> {
    if st == 0 || st > k {
        return Err(FedError::Config(format!(
            "institutions_per_round must be in 1..={k}, got {st}"
        )));
    }
    let mut ids: Vec<usize> = if st == k {
        (0..k).collect()
    } else {
        rand::seq::index::sample(rng, k, st).into_vec()
    };
    ids.sort_unstable();
    Ok(RoundPlan { round, ids })
}

/// Endless minibatch stream over a fixed index set. The order is reshuffled
/// whenever fewer than a full batch remain; leftovers are dropped.
#[derive(Clone, Debug)]
pub struct BatchIter {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Rng,
}

impl BatchIter {
    pub fn new(indices: Vec<usize>, batch: usize, rng: Rng) -> Result<Self> {
        if indices.is_empty() || batch == 0 {
            return Err(FedError::Empty(
                "batch iterator needs indices and a positive batch size".into(),
            ));
        }
        let batch = batch.min(indices.len());
        Ok(Self {
            pos: indices.len(),
            order: indices,
            batch,
            rng,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Local steps in one pass over `q` samples with batch size `b`.
pub fn local_steps(q: usize, b: usize) -> usize {
    (q / b.min(q).max(1)).max(1)
}

/// Steps each institution runs per turn in the serial strategies.
pub fn serial_steps(q_total: usize, b: usize, k: usize) -> usize {
    (q_total / (b * k).max(1)).max(1)
}

/// Server steps per epoch for the synchronous per-iteration strategies.
pub fn sync_steps(sizes: &[usize], b: usize) -> usize {
    let max_q = sizes.iter().copied().max().unwrap_or(0);
    max_q.div_ceil(b.max(1)).max(1)
}

#[derive(Clone, Debug)]
pub struct InstitutionState {
    pub id: usize,
    pub indices: Vec<usize>,
    pub batches: BatchIter,
    /// The institution sub-network, or the full model for whole-model strategies.
    pub model: LayerStack,
    pub optim: OptimState,
    /// Server sub-network received at the end of split training.
    pub server_model: Option<LayerStack>,
}

impl InstitutionState {
    pub fn sample_count(&self) -> usize {
        self.indices.len()
    }

    /// The complete network held after the final weight transfer.
    pub fn composite(&self) -> Result<LayerStack> {
        match &self.server_model {
            Some(fs) => LayerStack::join(&self.model, fs),
            None => Ok(self.model.clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ServerState {
    /// The server sub-network, or the global model for whole-model strategies.
    pub model: LayerStack,
    pub optim: OptimState,
    /// Server momentum over the model state tensors.
    pub velocity: Option<Vec<Tensor>>,
    pub shared_pool: Vec<usize>,
    pub sampler: Rng,
}

/// Sends the server sub-network to every listed institution.
pub fn final_weight_transfer(
    server: &ServerState,
    institutions: &mut [InstitutionState],
    recipients: &[usize],
    ledger: &mut CommLedger,
    round: usize,
) -> Result<()> {
    for &k in recipients {
        let msg = Message::new(
            MessageKind::FullWeights,
            Endpoint::Server,
            Endpoint::Institution(k),
            server.model.state_tensors(),
        );
        let state = ledger.transmit(round, msg)?.payload;
        let mut fs = server.model.clone();
        fs.load_state(&state)?;
        institutions
            .get_mut(k)
            .ok_or_else(|| FedError::Protocol(format!("no institution {k}")))?
            .server_model = Some(fs);
    }
    Ok(())
}

/// `sum_k weights[k] * states[k]`, tensor by tensor.
pub fn weighted_average(states: &[Vec<Tensor>], weights: &[f64]) -> Result<Vec<Tensor>> {
    let (first, rest) = states
        .split_first()
        .ok_or_else(|| FedError::Empty("nothing to average".into()))?;
    if weights.len() != states.len() {
        return Err(FedError::shape(
            "average weights",
            &[states.len()],
            &[weights.len()],
        ));
    }
    let mut acc: Vec<Tensor> = first
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.scale(weights[0]);
            t
        })
        .collect();
    for (state, &w) in rest.iter().zip(&weights[1..]) {
        if state.len() != acc.len() {
            return Err(FedError::shape(
                "averaged state",
                &[acc.len()],
                &[state.len()],
            ));
        }
        for (a, t) in acc.iter_mut().zip(state) {
            a.check_same_shape(t, "weighted average")?;
            for (x, &y) in a.data_mut().iter_mut().zip(t.data()) {
                *x += w * y;
            }
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;

    #[test]
    fn sampling_bounds_and_determinism() {
        let s = SeedStreams::new(3);
        let p = sample_institutions(4, 4, 0, &mut s.stream("sampling")).unwrap();
        assert_eq!(p.ids, vec![0, 1, 2, 3]);
        let a = sample_institutions(10, 4, 1, &mut s.stream("sampling")).unwrap();
        let b = sample_institutions(10, 4, 1, &mut s.stream("sampling")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ids.len(), 4);
        assert!(a.ids.windows(2).all(|w| w[0] < w[1]) && a.ids[3] < 10);
        assert_eq!(
            sample_institutions(1, 1, 0, &mut s.stream("x"))
                .unwrap()
                .ids,
            vec![0]
        );
        assert!(sample_institutions(3, 4, 0, &mut s.stream("x")).is_err());
        assert!(sample_institutions(3, 0, 0, &mut s.stream("x")).is_err());
    }

    #[test]
    fn batch_iter_covers_epoch_then_reshuffles() {
        let mut it = BatchIter::new((0..10).collect(), 4, SeedStreams::new(0).stream("b")).unwrap();
        let mut seen: Vec<usize> = it.next_batch();
        seen.extend(it.next_batch());
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 8);
        // only two left: reshuffle
        let third = it.next_batch();
        assert_eq!(third.len(), 4);
        assert_eq!(it.position(), 4);
        let mut small = BatchIter::new(vec![5, 6], 32, SeedStreams::new(0).stream("b")).unwrap();
        assert_eq!(small.batch_size(), 2);
        let mut b = small.next_batch();
        b.sort_unstable();
        assert_eq!(b, vec![5, 6]);
    }

    #[test]
    fn step_counts() {
        assert_eq!(local_steps(100, 32), 3);
        assert_eq!(local_steps(10, 32), 1);
        assert_eq!(serial_steps(400, 32, 4), 3);
        assert_eq!(serial_steps(10, 32, 4), 1);
        assert_eq!(sync_steps(&[100, 40], 32), 4);
        assert_eq!(sync_steps(&[64], 32), 2);
    }

    #[test]
    fn averaging_scalars() {
        let a = vec![Tensor::scalar(0.2)];
        let b = vec![Tensor::scalar(0.4)];
        let avg = weighted_average(&[a.clone(), b], &[0.5, 0.5]).unwrap();
        assert!((avg[0].data()[0] - 0.3).abs() < 1e-15);
        let one = weighted_average(std::slice::from_ref(&a), &[1.0]).unwrap();
        assert!(one[0].bitwise_eq(&a[0]));
    }

    #[test]
    fn message_validation() {
        let x = Tensor::zeros(&[32, 8, 14, 14]);
        let y = Tensor::zeros(&[32, 1]);
        let m = Message::new(
            MessageKind::FeatureMaps,
            Endpoint::Institution(0),
            Endpoint::Server,
            vec![x, y],
        );
        assert_eq!(m.scalar_count, 50_176 + 32);
        assert_eq!(m.validate().unwrap(), Direction::Uplink);
        let mut bad = m.clone();
        bad.scalar_count += 1;
        assert!(matches!(bad.validate(), Err(FedError::Protocol(_))));
        let empty = Message::new(
            MessageKind::FullWeights,
            Endpoint::Server,
            Endpoint::Institution(1),
            vec![],
        );
        assert_eq!(empty.scalar_count, 0);
        assert_eq!(empty.validate().unwrap(), Direction::Downlink);
        let looped = Message::new(
            MessageKind::LossScalar,
            Endpoint::Server,
            Endpoint::Server,
            vec![Tensor::scalar(1.0)],
        );
        assert!(looped.validate().is_err());
    }
}
