use crate::error::{FedError, Result};
use crate::federation::{
    final_weight_transfer, local_steps, sample_institutions, serial_steps, sync_steps,
    weighted_average, BatchIter, CommLedger, Endpoint, InstitutionState, Message, MessageKind,
    ModelShape, RoundPlan, ServerState,
};
use crate::metrics::Metrics;
use crate::nn::{loss, loss_for, sgd_step, CutSpec, LayerStack, LossKind, Mode, OptimState, Task};
use crate::partition::{stratified_sample, Dataset, Partition};
use crate::rng::SeedStreams;
use crate::tensor::Tensor;

use super::{apply_server_momentum, evaluate, CompositeModel, StrategyConfig, StrategyKind};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Training loss per sample seen this epoch.
    pub mean_loss: f64,
    pub plans: Vec<RoundPlan>,
}

/// Full simulation state for one strategy run.
#[derive(Clone, Debug)]
pub struct Simulation {
    config: StrategyConfig,
    task: Task,
    loss_kind: LossKind,
    train: Dataset,
    institutions: Vec<InstitutionState>,
    server: ServerState,
    ledger: CommLedger,
    shape: ModelShape,
    epoch: usize,
    loss_sum: f64,
    loss_count: usize,
    plans: Vec<RoundPlan>,
    history: Vec<EpochSummary>,
    finished: bool,
}

impl Simulation {
    /// Sets up institutions and server from an initialized model. Named
    /// random streams: `batching` (per institution), `sampling`, `shared`.
    pub fn new(
        config: StrategyConfig,
        model: LayerStack,
        train: Dataset,
        partition: &Partition,
        streams: &SeedStreams,
    ) -> Result<Self> {
        config.validate()?;
        let kind = config.kind;
        let task = model
            .task()
            .ok_or_else(|| FedError::Config("model: stack has no task head".into()))?;
        if task != train.task() {
            return Err(FedError::Config(format!(
                "model: task {task:?} does not match dataset task {:?}",
                train.task()
            )));
        }
        if partition
            .assignments()
            .iter()
            .flatten()
            .any(|&i| i >= train.len())
        {
            return Err(FedError::Config(
                "partition: index beyond the training set".into(),
            ));
        }
        let model = if kind == StrategyKind::FedSgdGn {
            if !model.has_batch_norm() {
                log::warn!("fedsgd_gn: model has no batch-norm layers; nothing to convert");
            }
            model.with_group_norm(config.gn_groups())?
        } else {
            model
        };
        let cut = config.cut.map(CutSpec);
        if let Some(c) = cut {
            if c.0 > model.len() {
                return Err(FedError::Config(format!(
                    "strategy.cut: {} out of range for a {}-layer model",
                    c.0,
                    model.len()
                )));
            }
        }
        let shape = ModelShape::of(&model, cut)?;

        let mut union: Vec<usize> = partition.assignments().iter().flatten().copied().collect();
        union.sort_unstable();
        let mut local: Vec<Vec<usize>> = if kind == StrategyKind::Centralized {
            vec![union.clone()]
        } else {
            partition.assignments().to_vec()
        };
        let mut shared_pool = Vec::new();
        if kind == StrategyKind::FedAvgSd {
            let count = (config.shared_fraction() * union.len() as f64).round() as usize;
            shared_pool = stratified_sample(&train, &union, count, &mut streams.stream("shared"));
            shared_pool.sort_unstable();
            if shared_pool.is_empty() {
                log::warn!("fedavg_sd: shared pool is empty; training reduces to fedavg");
            }
            for l in &mut local {
                l.extend_from_slice(&shared_pool);
                l.sort_unstable();
                l.dedup();
            }
        }

        let (inst_model, server_model) = match cut {
            Some(c) => {
                let subs = model.split(c)?;
                (subs.institution, subs.server)
            }
            None => (model.clone(), model),
        };
        let mut institutions = Vec::with_capacity(local.len());
        for (k, indices) in local.into_iter().enumerate() {
            let batches = BatchIter::new(
                indices.clone(),
                config.batch_size,
                streams.indexed("batching", k as u64),
            )?;
            institutions.push(InstitutionState {
                id: k,
                indices,
                batches,
                optim: OptimState::for_stack(config.lr, config.momentum, &inst_model)?,
                model: inst_model.clone(),
                server_model: None,
            });
        }
        let server = ServerState {
            optim: OptimState::for_stack(config.lr, config.momentum, &server_model)?,
            velocity: None,
            model: server_model,
            shared_pool,
            sampler: streams.stream("sampling"),
        };
        let mut sim = Self {
            loss_kind: loss_for(task),
            config,
            task,
            train,
            institutions,
            server,
            ledger: CommLedger::new(),
            shape,
            epoch: 0,
            loss_sum: 0.0,
            loss_count: 0,
            plans: Vec::new(),
            history: Vec::new(),
            finished: false,
        };
        sim.setup_transfers()?;
        Ok(sim)
    }

    /// Round-0 traffic: initial weights and, for the shared-data variant,
    /// the shared pool.
    fn setup_transfers(&mut self) -> Result<()> {
        let recipients: Vec<usize> = match self.config.kind {
            StrategyKind::SplitAvg | StrategyKind::SplitAvgV2 => {
                (0..self.institutions.len()).collect()
            }
            StrategyKind::SplitNn | StrategyKind::Cwt => vec![0],
            _ => Vec::new(),
        };
        for k in recipients {
            let state = self.institutions[k].model.state_tensors();
            let msg = Message::new(
                MessageKind::FullWeights,
                Endpoint::Server,
                Endpoint::Institution(k),
                state,
            );
            let payload = self.ledger.transmit(0, msg)?.payload;
            self.institutions[k].model.load_state(&payload)?;
        }
        if !self.server.shared_pool.is_empty() {
            let (x, y) = self.train.gather(&self.server.shared_pool)?;
            for k in 0..self.institutions.len() {
                let msg = Message::new(
                    MessageKind::SharedData,
                    Endpoint::Server,
                    Endpoint::Institution(k),
                    vec![x.clone(), y.clone()],
                );
                self.ledger.transmit(0, msg)?;
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &StrategyConfig {
        &self.config
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn institutions(&self) -> &[InstitutionState] {
        &self.institutions
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochSummary] {
        &self.history
    }

    pub fn loss_curve(&self) -> Vec<f64> {
        self.history.iter().map(|h| h.mean_loss).collect()
    }

    /// Training samples per institution (including any shared pool).
    pub fn local_sizes(&self) -> Vec<usize> {
        self.institutions.iter().map(|i| i.indices.len()).collect()
    }

    pub fn sample_plan(&mut self) -> Result<RoundPlan> {
        let k = self.institutions.len();
        let st = self.config.institutions_per_round.unwrap_or(k);
        let plan = sample_institutions(k, st, self.epoch, &mut self.server.sampler)?;
        self.plans.push(plan.clone());
        Ok(plan)
    }

    /// Runs one epoch (or communication round) of the configured strategy.
    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        if self.finished {
            return Err(FedError::Protocol("simulation already finished".into()));
        }
        self.epoch += 1;
        self.loss_sum = 0.0;
        self.loss_count = 0;
        self.plans.clear();
        match self.config.kind {
            StrategyKind::Centralized => self.run_centralized_epoch()?,
            StrategyKind::FedAvg => self.run_fedavg_round()?,
            StrategyKind::FedAvgM => self.run_fedavgm_round()?,
            StrategyKind::FedAvgSd => self.run_fedavg_sd_round()?,
            StrategyKind::FedSgd => {
                for _ in 0..sync_steps(&self.local_sizes(), self.config.batch_size) {
                    self.run_fedsgd_iteration()?;
                }
            }
            StrategyKind::FedSgdGn => self.run_fedsgd_gn()?,
            StrategyKind::Cwt => self.run_cwt_epoch()?,
            StrategyKind::SplitNn => self.run_splitnn_epoch()?,
            StrategyKind::SplitAvg | StrategyKind::SplitAvgV2 => {
                for _ in 0..sync_steps(&self.local_sizes(), self.config.batch_size) {
                    let plan = self.sample_plan()?;
                    if self.config.kind == StrategyKind::SplitAvg {
                        self.run_splitavg_round(&plan)?;
                    } else {
                        self.run_splitavg_v2_round(&plan)?;
                    }
                }
            }
        }
        let summary = EpochSummary {
            epoch: self.epoch,
            mean_loss: self.loss_sum / self.loss_count.max(1) as f64,
            plans: std::mem::take(&mut self.plans),
        };
        log::debug!(
            "{} epoch {}: loss {:.6}",
            self.config.kind,
            summary.epoch,
            summary.mean_loss
        );
        self.history.push(summary.clone());
        Ok(summary)
    }

    /// Runs up to `epochs` epochs. With a patience setting and a validation
    /// set, stops once the validation metric has not improved for that many
    /// epochs. Returns the number of epochs run.
    pub fn train(&mut self, epochs: usize, validation: Option<&Dataset>) -> Result<usize> {
        let mut best: Option<f64> = None;
        let mut stale = 0;
        for e in 0..epochs {
            self.run_epoch()?;
            if let (Some(patience), Some(val)) = (self.config.patience, validation) {
                let m = evaluate(&self.snapshot()?, val)?.primary();
                let better = match (best, self.task) {
                    (None, _) => true,
                    (Some(b), Task::Classification { .. }) => m > b,
                    (Some(b), Task::Regression) => m < b,
                };
                if better {
                    best = Some(m);
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= patience {
                        log::info!("early stop after epoch {}", e + 1);
                        return Ok(e + 1);
                    }
                }
            }
        }
        Ok(epochs)
    }

    fn note_loss(&mut self, value: f64, samples: usize) {
        self.loss_sum += value;
        self.loss_count += samples;
    }

    /// One minibatch step of institution `k` on its own model.
    fn local_step(&mut self, k: usize) -> Result<()> {
        let inst = &mut self.institutions[k];
        let idx = inst.batches.next_batch();
        let (x, y) = self.train.gather(&idx)?;
        let (pred, tape) = inst.model.forward(&x, Mode::Train)?;
        let (value, mut g) = loss(self.loss_kind, &pred, &y)?;
        g.div_scalar(idx.len() as f64);
        let (_, grads) = inst.model.backward(tape, &g)?;
        sgd_step(&mut inst.model, &grads, &mut inst.optim)?;
        self.note_loss(value, idx.len());
        Ok(())
    }

    pub fn centralized_step(&mut self) -> Result<()> {
        if self.config.kind != StrategyKind::Centralized {
            return Err(FedError::Protocol(format!(
                "centralized step on a {} simulation",
                self.config.kind
            )));
        }
        self.local_step(0)
    }

    pub fn run_centralized_epoch(&mut self) -> Result<()> {
        let steps = local_steps(self.institutions[0].sample_count(), self.config.batch_size);
        for _ in 0..steps {
            self.centralized_step()?;
        }
        Ok(())
    }

    fn send_state(
        &mut self,
        kind: MessageKind,
        from: Endpoint,
        to: Endpoint,
        state: Vec<Tensor>,
    ) -> Result<Vec<Tensor>> {
        Ok(self
            .ledger
            .transmit(self.epoch, Message::new(kind, from, to, state))?
            .payload)
    }

    /// Local training from the global weights, then sample-weighted averaging
    /// (with server momentum when `beta` is set).
    fn averaging_round(&mut self, beta: Option<f64>) -> Result<()> {
        let plan = self.sample_plan()?;
        let global = self.server.model.state_tensors();
        let mut states = Vec::with_capacity(plan.ids.len());
        let mut counts = Vec::with_capacity(plan.ids.len());
        for &k in &plan.ids {
            let down = self.send_state(
                MessageKind::FullWeights,
                Endpoint::Server,
                Endpoint::Institution(k),
                global.clone(),
            )?;
            self.institutions[k].model.load_state(&down)?;
            let steps = local_steps(self.institutions[k].sample_count(), self.config.batch_size);
            for _ in 0..steps {
                self.local_step(k)?;
            }
            let state = self.institutions[k].model.state_tensors();
            states.push(self.send_state(
                MessageKind::FullWeights,
                Endpoint::Institution(k),
                Endpoint::Server,
                state,
            )?);
            counts.push(self.institutions[k].sample_count() as f64);
        }
        let total: f64 = counts.iter().sum();
        let weights: Vec<f64> = counts.iter().map(|c| c / total).collect();
        let mut avg = weighted_average(&states, &weights)?;
        if let Some(beta) = beta {
            let n = self.server.model.params().len();
            let velocity = self.server.velocity.get_or_insert_with(|| {
                global[..n]
                    .iter()
                    .map(|t| Tensor::zeros(t.shape()))
                    .collect()
            });
            apply_server_momentum(&mut avg[..n], &global[..n], velocity, beta);
        }
        self.server.model.load_state(&avg)
    }

    pub fn run_fedavg_round(&mut self) -> Result<()> {
        self.averaging_round(None)
    }

    /// Server momentum on the averaged weight delta:
    /// `W <- W_avg - beta * v; v <- beta * v + (W_prev - W_avg)`.
    pub fn run_fedavgm_round(&mut self) -> Result<()> {
        let beta = self.config.server_momentum();
        self.averaging_round(Some(beta))
    }

    /// A FedAvg round; the shared pool is already part of every local set.
    pub fn run_fedavg_sd_round(&mut self) -> Result<()> {
        self.averaging_round(None)
    }

    /// One synchronous step on the sample-weighted mean of per-institution
    /// mean gradients, which equals the pooled-batch gradient.
    pub fn run_fedsgd_iteration(&mut self) -> Result<()> {
        let plan = self.sample_plan()?;
        let global = self.server.model.state_tensors();
        let n = self.server.model.params().len();
        let mut uploads = Vec::with_capacity(plan.ids.len());
        let mut counts = Vec::with_capacity(plan.ids.len());
        for &k in &plan.ids {
            let down = self.send_state(
                MessageKind::FullWeights,
                Endpoint::Server,
                Endpoint::Institution(k),
                global.clone(),
            )?;
            let inst = &mut self.institutions[k];
            inst.model.load_state(&down)?;
            let idx = inst.batches.next_batch();
            let (x, y) = self.train.gather(&idx)?;
            let (pred, tape) = inst.model.forward(&x, Mode::Train)?;
            let (value, mut g) = loss(self.loss_kind, &pred, &y)?;
            g.div_scalar(idx.len() as f64);
            let (_, mut grads) = inst.model.backward(tape, &g)?;
            grads.extend(inst.model.state_tensors().drain(n..));
            self.note_loss(value, idx.len());
            counts.push(idx.len() as f64);
            uploads.push(self.send_state(
                MessageKind::FullGradients,
                Endpoint::Institution(k),
                Endpoint::Server,
                grads,
            )?);
        }
        let total: f64 = counts.iter().sum();
        let weights: Vec<f64> = counts.iter().map(|c| c / total).collect();
        let mut avg = weighted_average(&uploads, &weights)?;
        let buffers = avg.split_off(n);
        let mut state = self.server.model.params_cloned();
        state.extend(buffers);
        self.server.model.load_state(&state)?;
        sgd_step(&mut self.server.model, &avg, &mut self.server.optim)
    }

    /// A FedSGD epoch on the group-norm model.
    pub fn run_fedsgd_gn(&mut self) -> Result<()> {
        for _ in 0..sync_steps(&self.local_sizes(), self.config.batch_size) {
            self.run_fedsgd_iteration()?;
        }
        Ok(())
    }

    fn hand_off(&mut self, k: usize) -> Result<()> {
        let next = (k + 1) % self.institutions.len();
        let state = self.institutions[k].model.state_tensors();
        let recv = self.send_state(
            MessageKind::FullWeights,
            Endpoint::Institution(k),
            Endpoint::Institution(next),
            state,
        )?;
        self.institutions[next].model.load_state(&recv)
    }

    /// Each institution in ascending order trains the travelling model,
    /// then hands it to the next; the last hands back to the first.
    pub fn run_cwt_epoch(&mut self) -> Result<()> {
        let total: usize = self.local_sizes().iter().sum();
        let steps = serial_steps(total, self.config.batch_size, self.institutions.len());
        for k in 0..self.institutions.len() {
            for _ in 0..steps {
                self.local_step(k)?;
            }
            self.hand_off(k)?;
        }
        Ok(())
    }

    /// Serial split training; the institution sub-network travels between
    /// institutions while the server half stays put.
    pub fn run_splitnn_epoch(&mut self) -> Result<()> {
        let total: usize = self.local_sizes().iter().sum();
        let steps = serial_steps(total, self.config.batch_size, self.institutions.len());
        for k in 0..self.institutions.len() {
            for _ in 0..steps {
                self.split_iteration(&[k], false)?;
            }
            self.hand_off(k)?;
        }
        Ok(())
    }

    /// One server step on the concatenated cut-layer features of the plan.
    pub fn run_splitavg_round(&mut self, plan: &RoundPlan) -> Result<()> {
        self.split_iteration(&plan.ids, false)
    }

    /// As [`Simulation::run_splitavg_round`], but predictions go back to the
    /// institutions, which compute loss and gradient against their own labels.
    pub fn run_splitavg_v2_round(&mut self, plan: &RoundPlan) -> Result<()> {
        self.split_iteration(&plan.ids, true)
    }

    fn split_iteration(&mut self, ids: &[usize], label_private: bool) -> Result<()> {
        if ids.is_empty() {
            return Err(FedError::Protocol("empty round plan".into()));
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) || ids.iter().any(|&k| k >= self.institutions.len())
        {
            return Err(FedError::Protocol(format!(
                "round plan {ids:?} is not ascending and in range"
            )));
        }
        let mut feats = Vec::with_capacity(ids.len());
        let mut labels = Vec::with_capacity(ids.len());
        let mut tapes = Vec::with_capacity(ids.len());
        let mut sizes = Vec::with_capacity(ids.len());
        for &k in ids {
            let inst = &mut self.institutions[k];
            let idx = inst.batches.next_batch();
            let (x, y) = self.train.gather(&idx)?;
            let (f, tape) = inst.model.forward(&x, Mode::Train)?;
            let payload = if label_private {
                vec![f]
            } else {
                vec![f, y.clone()]
            };
            let mut recv = self.send_state(
                MessageKind::FeatureMaps,
                Endpoint::Institution(k),
                Endpoint::Server,
                payload,
            )?;
            if !label_private {
                labels.push(recv.pop().unwrap());
            } else {
                labels.push(y);
            }
            feats.push(recv.pop().unwrap());
            tapes.push(tape);
            sizes.push(idx.len());
        }
        let expected = self.server.model.input_dims();
        if let Some(bad) = feats.iter().find(|f| f.sample_dims() != expected) {
            return Err(FedError::shape(
                "cut-layer features",
                expected,
                bad.sample_dims(),
            ));
        }
        let xs = Tensor::concat_batch(&feats)?;
        let (pred, server_tape) = self.server.model.forward(&xs, Mode::Train)?;
        let (value, mut g) = if label_private {
            let chunks = pred.split_batch(&sizes)?;
            let mut grads = Vec::with_capacity(ids.len());
            let mut total = 0.0;
            for ((&k, chunk), y) in ids.iter().zip(chunks).zip(&labels) {
                let chunk = self.send_state(
                    MessageKind::PredictionChunk,
                    Endpoint::Server,
                    Endpoint::Institution(k),
                    vec![chunk],
                )?;
                let (v, gk) = loss(self.loss_kind, &chunk[0], y)?;
                let mut back = self.send_state(
                    MessageKind::ChunkGradients,
                    Endpoint::Institution(k),
                    Endpoint::Server,
                    vec![gk],
                )?;
                let v = self.send_state(
                    MessageKind::LossScalar,
                    Endpoint::Institution(k),
                    Endpoint::Server,
                    vec![Tensor::scalar(v)],
                )?;
                total += v[0].data()[0];
                grads.push(back.pop().unwrap());
            }
            (total, Tensor::concat_batch(&grads)?)
        } else {
            let ys = Tensor::concat_batch(&labels)?;
            loss(self.loss_kind, &pred, &ys)?
        };
        let batch: usize = sizes.iter().sum();
        g.div_scalar(batch as f64);
        let (cut_grad, server_grads) = self.server.model.backward(server_tape, &g)?;
        sgd_step(
            &mut self.server.model,
            &server_grads,
            &mut self.server.optim,
        )?;
        let slices = cut_grad.split_batch(&sizes)?;
        for ((&k, slice), tape) in ids.iter().zip(slices).zip(tapes) {
            let slice = self.send_state(
                MessageKind::CutGradients,
                Endpoint::Server,
                Endpoint::Institution(k),
                vec![slice],
            )?;
            let inst = &mut self.institutions[k];
            let (_, grads) = inst.model.backward(tape, &slice[0])?;
            sgd_step(&mut inst.model, &grads, &mut inst.optim)?;
        }
        self.note_loss(value, batch);
        Ok(())
    }

    /// The trained model(s) without any further communication.
    pub fn snapshot(&self) -> Result<CompositeModel> {
        Ok(match self.config.kind {
            StrategyKind::SplitAvg | StrategyKind::SplitAvgV2 => CompositeModel::Split {
                institution: self.institutions.iter().map(|i| i.model.clone()).collect(),
                server: self.server.model.clone(),
            },
            StrategyKind::SplitNn => CompositeModel::Split {
                institution: vec![self.institutions[0].model.clone()],
                server: self.server.model.clone(),
            },
            StrategyKind::Centralized | StrategyKind::Cwt => {
                CompositeModel::Single(self.institutions[0].model.clone())
            }
            _ => CompositeModel::Single(self.server.model.clone()),
        })
    }

    /// Ends training. Split strategies send the server sub-network to the
    /// institutions holding a front half (recorded one round after the last
    /// epoch).
    pub fn finish(&mut self) -> Result<CompositeModel> {
        if !self.finished {
            let recipients: Vec<usize> = match self.config.kind {
                StrategyKind::SplitAvg | StrategyKind::SplitAvgV2 => {
                    (0..self.institutions.len()).collect()
                }
                StrategyKind::SplitNn => vec![0],
                _ => Vec::new(),
            };
            final_weight_transfer(
                &self.server,
                &mut self.institutions,
                &recipients,
                &mut self.ledger,
                self.epoch + 1,
            )?;
            self.finished = true;
        }
        self.snapshot()
    }

    /// Evaluates the current model(s) and attaches loss curve and
    /// communication totals.
    pub fn evaluate(&self, test: &Dataset) -> Result<Metrics> {
        let mut m = evaluate(&self.snapshot()?, test)?;
        m.loss_curve = self.loss_curve();
        m.comm_totals = crate::metrics::CommTotals::from_ledger(&self.ledger);
        Ok(m)
    }

    /// Activations of each institution's own training data at `boundary`
    /// of that institution's complete network.
    pub fn local_features(&self, boundary: usize) -> Result<Vec<Tensor>> {
        let models = self.snapshot()?.models()?;
        self.institutions
            .iter()
            .map(|inst| {
                let m = models.get(inst.id).unwrap_or(&models[0]);
                let (x, _) = self.train.gather(&inst.indices)?;
                m.activations_at(&x, boundary)
            })
            .collect()
    }
}
