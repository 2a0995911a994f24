//! Round orchestration: client selection, local training, aggregation,
//! validation loss, reward and the tuner update.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{partition, Dataset, PartitionMode};
use crate::error::{Error, Result};
use crate::hyper::{
    grid_probs, reinforce_update, reward, sample, score, GridConfig, HyperDist, HyperGrid, RewardWindow, TunerConfig,
    LEARNING_RATE, SGD_ITERATIONS,
};
use crate::losses::{cross_entropy_and_hits, total_loss_and_grads, LossBreakdown, LossConfig};
use crate::model_zoo::{build_matching_decoder, MatchingDecoder, ModelArch};
use crate::nn::{forward, sgd_step_in_place, ParamSet};
use crate::rng;

pub const RECORD_SCHEMA_VERSION: u32 = 1;

/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// `w + Σ_selected (n_k / N)(w_k - w)`; damped when only some clients train.
    #[default]
    Literal,
    /// Weights `n_k / Σ_selected n_i`.
    Renormalized,
}

/// Hand-set schedule used when the tuner is off: the learning rate is
/// multiplied by `decay_factor` at the start of each of `decay_phases`
/// equal stretches of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedSchedule {
    pub lr: f64,
    pub iterations: usize,
    pub decay_factor: f64,
    pub decay_phases: usize,
}

impl Default for FixedSchedule {
    fn default() -> Self {
        Self {
            lr: 0.1,
            iterations: 50,
            decay_factor: 0.5,
            decay_phases: 3,
        }
    }
}

impl FixedSchedule {
    /// `(lr, iterations)` for 1-based `round` of `total_rounds`.
    pub fn at(&self, round: usize, total_rounds: usize) -> (f64, usize) {
        let phase_len = total_rounds.div_ceil(self.decay_phases.max(1)).max(1);
        let phase = (round.max(1) - 1) / phase_len;
        (self.lr * self.decay_factor.powi(phase as i32), self.iterations)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("schedule.lr", "must be finite and >= 0"));
        }
        if self.iterations == 0 {
            return Err(Error::config("schedule.iterations", "must be >= 1"));
        }
        if !(self.decay_factor > 0.0) || !self.decay_factor.is_finite() {
            return Err(Error::config("schedule.decay_factor", "must be > 0"));
        }
        if self.decay_phases == 0 {
            return Err(Error::config("schedule.decay_phases", "must be >= 1"));
        }
        Ok(())
    }
}

/// Everything the round loop needs besides data and model.
#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub clients: usize,
    pub client_fraction: f64,
    pub rounds: usize,
    pub batch_size: usize,
    pub aggregation: AggregationMode,
    pub eval_every: usize,
    pub parallel: bool,
    /// Include the input as the first matching site.
    pub match_input: bool,
    pub tuning: bool,
    pub schedule: FixedSchedule,
    pub grid: GridConfig,
    pub tuner: TunerConfig,
    pub loss: LossConfig,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            client_fraction: 1.0,
            rounds: 200,
            batch_size: 64,
            aggregation: AggregationMode::Literal,
            eval_every: 10,
            parallel: false,
            match_input: true,
            tuning: false,
            schedule: FixedSchedule::default(),
            grid: GridConfig::default(),
            tuner: TunerConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("clients (K)", "must be >= 1"));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(Error::config(
                "client_fraction (C)",
                format!("must lie in (0, 1], got {}", self.client_fraction),
            ));
        }
        selection_size(self.clients, self.client_fraction)?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every (E)", "must be >= 1"));
        }
        self.schedule.validate()?;
        self.tuner.validate()?;
        self.loss.validate()?;
        self.grid.build()?;
        Ok(())
    }
}

fn selection_size(clients: usize, fraction: f64) -> Result<usize> {
    let m = (fraction * clients as f64).round() as usize;
    if m == 0 {
        return Err(Error::config(
            "client_fraction (C)",
            format!("C·K = {} selects no clients", fraction * clients as f64),
        ));
    }
    Ok(m.min(clients))
}

/// Uniform subset of `round(C·K)` client ids without replacement, sorted.
pub fn select_clients<R: Rng + ?Sized>(clients: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(
            "client_fraction (C)",
            format!("must lie in (0, 1], got {fraction}"),
        ));
    }
    let m = selection_size(clients, fraction)?;
    let mut ids = index::sample(rng, clients, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// A client's shard and its persistent matching parameters.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    data: Arc<Dataset>,
    indices: Vec<usize>,
    pub theta: ParamSet,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl ClientState {
    pub fn new(id: usize, data: Arc<Dataset>, indices: Vec<usize>, theta: ParamSet, seed: u64) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid(format!("client {id} has an empty shard")));
        }
        let mut c = Self {
            id,
            data,
            indices,
            theta,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        c.reshuffle();
        Ok(c)
    }

    /// Shard size n_k.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    fn reshuffle(&mut self) {
        let mut r = rng::stream(self.seed, &[rng::SHUFFLE, self.id as u64, self.epoch]);
        self.order = (0..self.indices.len()).collect();
        self.order.shuffle(&mut r);
        self.cursor = 0;
        self.epoch += 1;
    }

    /// Next minibatch of dataset indices. Epochs are shuffled without
    /// replacement and a batch may straddle two epochs. Shards no larger
    /// than `batch` are used whole.
    fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        if self.indices.len() <= batch {
            return self.indices.clone();
        }
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            let take = (batch - out.len()).min(self.order.len() - self.cursor);
            out.extend(
                self.order[self.cursor..self.cursor + take]
                    .iter()
                    .map(|&p| self.indices[p]),
            );
            self.cursor += take;
        }
        out
    }
}

/// Architecture and its matching decoder.
#[derive(Debug, Clone)]
pub struct ModelContext {
    pub arch: ModelArch,
    pub decoder: MatchingDecoder,
}

impl ModelContext {
    pub fn new(arch: ModelArch, match_input: bool) -> Result<Self> {
        let decoder = build_matching_decoder(&arch, match_input)?;
        Ok(Self { arch, decoder })
    }
}

/// Result of one client's local training.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub id: usize,
    pub w_local: ParamSet,
    pub n_k: usize,
    /// Loss terms on the last minibatch, before the last step.
    pub last_loss: LossBreakdown,
    /// The shard was smaller than a batch and was used whole.
    pub whole_shard: bool,
}

/// `iterations` joint SGD steps on `[w_local, θ]` starting from `w_round`.
/// θ persists in the client state.
pub fn train_client(
    client: &mut ClientState,
    model: &ModelContext,
    w_round: &ParamSet,
    lr: f64,
    iterations: usize,
    batch_size: usize,
    loss: &LossConfig,
) -> Result<ClientUpdate> {
    if iterations == 0 {
        return Err(Error::invalid("local training needs at least one iteration"));
    }
    let mut w = w_round.clone();
    let mut last = LossBreakdown::default();
    for _ in 0..iterations {
        let idx = client.next_batch(batch_size);
        let (x, y) = client.data.batch(&idx)?;
        let (parts, grads) =
            total_loss_and_grads(&model.arch, &model.decoder, &x, &y, &w, w_round, &client.theta, loss)?;
        sgd_step_in_place(&mut w, &grads.w, lr)?;
        if loss.use_matching {
            sgd_step_in_place(&mut client.theta, &grads.theta, lr)?;
        }
        last = parts;
    }
    if !w.all_finite() {
        return Err(Error::NonFinite(format!(
            "client {} parameters after local training",
            client.id
        )));
    }
    Ok(ClientUpdate {
        id: client.id,
        w_local: w,
        n_k: client.len(),
        last_loss: last,
        whole_shard: client.len() <= batch_size,
    })
}

/// Server update from `(w_local, n_k)` pairs, reduced in the given order.
pub fn aggregate(
    w_round: &ParamSet,
    updates: &[(&ParamSet, usize)],
    total: usize,
    mode: AggregationMode,
) -> Result<ParamSet> {
    if updates.is_empty() {
        return Err(Error::invalid("aggregation needs at least one client update"));
    }
    let selected: usize = updates.iter().map(|u| u.1).sum();
    if total == 0 || selected > total {
        return Err(Error::invalid(format!(
            "selected clients hold {selected} samples but the federation holds {total}"
        )));
    }
    let denom = match mode {
        AggregationMode::Literal => total,
        AggregationMode::Renormalized => selected,
    } as f64;
    let mut out = w_round.clone();
    for (w_local, n) in updates {
        let mut delta = (*w_local).clone();
        delta.axpy(-1.0, w_round)?;
        out.axpy(*n as f64 / denom, &delta)?;
    }
    Ok(out)
}

/// Mean cross-entropy and accuracy over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn evaluate(arch: &ModelArch, w: &ParamSet, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut loss = 0.0;
    let mut hits = 0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk)?;
        let trace = forward(&arch.graph, w, &x)?;
        let (l, h) = cross_entropy_and_hits(trace.output(), &y)?;
        loss += l * chunk.len() as f64;
        hits += h;
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: hits as f64 / n,
    })
}

/// Mean validation cross-entropy, the loss behind the tuner's reward.
pub fn evaluate_loss(arch: &ModelArch, w: &ParamSet, validation: &Dataset) -> Result<f64> {
    Ok(evaluate(arch, w, validation)?.loss)
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub w: ParamSet,
    pub dist: HyperDist,
    pub window: RewardWindow,
    /// Rounds completed so far.
    pub round: usize,
    /// Samples across all clients.
    pub total_n: usize,
    /// Validation loss of `w`.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub id: usize,
    pub n_k: usize,
    pub whole_shard: bool,
    pub loss: LossBreakdown,
}

/// Observables of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub schema_version: u32,
    pub round: usize,
    pub selected: Vec<usize>,
    pub lr: f64,
    pub iterations: usize,
    /// Normalized grid point, when the tuner chose the hyper-parameters.
    pub h: Option<Vec<f64>>,
    pub loss_before: f64,
    pub loss_after: f64,
    pub reward: f64,
    /// Tuner mean used to sample this round, normalized and in raw units.
    pub mu: Option<Vec<f64>>,
    pub mu_raw: Option<Vec<f64>>,
    pub log_precision: Option<Vec<f64>>,
    pub clients: Vec<ClientRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub schema_version: u32,
    pub round: usize,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub validation_loss: f64,
}

/// Receives records as the run progresses.
pub trait RunSink {
    fn round(&mut self, record: &RoundRecord, elapsed: Duration) -> Result<()>;
    fn eval(&mut self, record: &EvalRecord) -> Result<()>;
}

/// Collects records in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub rounds: Vec<RoundRecord>,
    pub evals: Vec<EvalRecord>,
}

impl RunSink for MemorySink {
    fn round(&mut self, record: &RoundRecord, _: Duration) -> Result<()> {
        self.rounds.push(record.clone());
        Ok(())
    }

    fn eval(&mut self, record: &EvalRecord) -> Result<()> {
        self.evals.push(record.clone());
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub rounds: usize,
    pub final_test: Evaluation,
    pub final_validation_loss: f64,
}

/// A federation with its data, clients and server.
pub struct Simulation {
    pub cfg: FedConfig,
    pub model: ModelContext,
    pub grid: HyperGrid,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    validation: Dataset,
    test: Dataset,
    seed: u64,
}

impl Simulation {
    /// Partitions `train` across clients, initializes the global model and
    /// every client's θ, and evaluates the starting validation loss.
    pub fn new(
        cfg: FedConfig,
        arch: ModelArch,
        train: Dataset,
        mode: PartitionMode,
        validation: Dataset,
        test: Dataset,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let model = ModelContext::new(arch, cfg.match_input)?;
        let grid = cfg.grid.build()?;
        for (name, d) in [("train", &train), ("validation", &validation), ("test", &test)] {
            if d.sample_shape() != model.arch.graph.input_shape() {
                return Err(Error::shape(
                    format!("{name} samples"),
                    model.arch.graph.input_shape(),
                    d.sample_shape(),
                ));
            }
        }
        let part = partition(&train, cfg.clients, mode, &mut rng::stream(seed, &[rng::PARTITION]))?;
        let data = Arc::new(train);
        let clients = part
            .shards
            .into_iter()
            .enumerate()
            .map(|(k, shard)| {
                let theta = model
                    .decoder
                    .init_theta(&mut rng::stream(seed, &[rng::THETA, k as u64]));
                ClientState::new(k, Arc::clone(&data), shard, theta, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        let w = model.arch.graph.init_params(&mut rng::stream(seed, &[rng::INIT_MODEL]));
        let loss = evaluate_loss(&model.arch, &w, &validation)?;
        let dist = HyperDist::initial(grid.dims(), cfg.tuner.init_mu, cfg.tuner.init_std)?;
        let server = ServerState {
            w,
            dist,
            window: RewardWindow::new(cfg.tuner.window),
            round: 0,
            total_n: data.len(),
            loss,
        };
        Ok(Self {
            cfg,
            model,
            grid,
            clients,
            server,
            validation,
            test,
            seed,
        })
    }

    pub fn validation(&self) -> &Dataset {
        &self.validation
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn evaluate_test(&self) -> Result<Evaluation> {
        evaluate(&self.model.arch, &self.server.w, &self.test)
    }

    /// Probabilities of every grid point under the current tuner state.
    pub fn grid_probs(&self) -> Result<Vec<f64>> {
        grid_probs(&self.grid, &self.server.dist)
    }

    /// One round: sample, select, train, aggregate, evaluate, reward, update.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let t = self.server.round + 1;
        let seed = self.seed;
        let dist_t = self.server.dist.clone();

        let (lr, iterations, point) = if self.cfg.tuning {
            let s = sample(&self.grid, &dist_t, &mut rng::stream(seed, &[rng::HYPER, t as u64]))?;
            let lr = s.raw[self.axis(LEARNING_RATE)?];
            let it = s.raw[self.axis(SGD_ITERATIONS)?] as usize;
            (lr, it, Some(s))
        } else {
            let (lr, it) = self.cfg.schedule.at(t, self.cfg.rounds);
            (lr, it, None)
        };

        let selected = select_clients(
            self.cfg.clients,
            self.cfg.client_fraction,
            &mut rng::stream(seed, &[rng::SELECT, t as u64]),
        )?;

        let w_round = &self.server.w;
        let model = &self.model;
        let (batch, loss_cfg) = (self.cfg.batch_size, &self.cfg.loss);
        let mut chosen: Vec<&mut ClientState> = self
            .clients
            .iter_mut()
            .filter(|c| selected.binary_search(&c.id).is_ok())
            .collect();
        let train = |c: &mut &mut ClientState| train_client(c, model, w_round, lr, iterations, batch, loss_cfg);
        let updates: Vec<ClientUpdate> = if self.cfg.parallel {
            chosen.par_iter_mut().map(train).collect::<Result<_>>()?
        } else {
            chosen.iter_mut().map(train).collect::<Result<_>>()?
        };

        let pairs: Vec<(&ParamSet, usize)> = updates.iter().map(|u| (&u.w_local, u.n_k)).collect();
        let w_next = aggregate(&self.server.w, &pairs, self.server.total_n, self.cfg.aggregation)?;
        let loss_after = evaluate_loss(&self.model.arch, &w_next, &self.validation)?;
        let loss_before = self.server.loss;
        let r = reward(loss_before, loss_after)?;

        if let Some(s) = &point {
            let sc = score(&self.grid, &dist_t, &s.indices)?;
            self.server.window.push(r, sc);
            self.server.dist = reinforce_update(&dist_t, &self.server.window, &self.cfg.tuner)?;
        }
        self.server.w = w_next;
        self.server.loss = loss_after;
        self.server.round = t;

        let tuned = self.cfg.tuning;
        Ok(RoundRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            round: t,
            selected,
            lr,
            iterations,
            h: point.map(|s| s.coords),
            loss_before,
            loss_after,
            reward: r,
            mu: tuned.then(|| dist_t.mu.clone()),
            mu_raw: tuned.then(|| self.grid.raw_at(&dist_t.mu)),
            log_precision: tuned.then(|| dist_t.log_precision.clone()),
            clients: updates
                .iter()
                .map(|u| ClientRecord {
                    id: u.id,
                    n_k: u.n_k,
                    whole_shard: u.whole_shard,
                    loss: u.last_loss,
                })
                .collect(),
        })
    }

    fn axis(&self, name: &str) -> Result<usize> {
        self.grid
            .axis_index(name)
            .ok_or_else(|| Error::invalid(format!("grid has no `{name}` axis")))
    }

    fn eval_record(&self) -> Result<(EvalRecord, Evaluation)> {
        let e = self.evaluate_test()?;
        Ok((
            EvalRecord {
                schema_version: RECORD_SCHEMA_VERSION,
                round: self.server.round,
                test_loss: e.loss,
                test_accuracy: e.accuracy,
                validation_loss: self.server.loss,
            },
            e,
        ))
    }

    /// Runs the remaining rounds up to `cfg.rounds`, evaluating on the test
    /// set at round 0 and every `eval_every` rounds.
    pub fn run(&mut self, sink: &mut dyn RunSink) -> Result<RunOutcome> {
        let mut last_eval = None;
        if self.server.round == 0 {
            let (rec, e) = self.eval_record()?;
            sink.eval(&rec)?;
            last_eval = Some((0, e));
        }
        while self.server.round < self.cfg.rounds {
            let start = Instant::now();
            let rec = self.run_round()?;
            sink.round(&rec, start.elapsed())?;
            if rec.round % self.cfg.eval_every == 0 {
                let (erec, e) = self.eval_record()?;
                sink.eval(&erec)?;
                last_eval = Some((rec.round, e));
            }
        }
        let final_test = match last_eval {
            Some((r, e)) if r == self.server.round => e,
            _ => self.evaluate_test()?,
        };
        Ok(RunOutcome {
            rounds: self.server.round,
            final_test,
            final_validation_loss: self.server.loss,
        })
    }
}

#[cfg(test)]
mod tests;
