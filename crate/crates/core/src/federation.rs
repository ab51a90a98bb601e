//! Round-synchronous federated meta-training and few-shot meta-testing.
//!
//! Each round the server broadcasts θ; every client loads it into its local
//! model, takes `N` optimizer steps on its support set over the whole model
//! (encoder and mapper carry over from the previous round), then reports the
//! query-set gradient of the meta part at the updated weights. The server
//! applies `θ ← θ − η Σ ρ_k g_k`, summing in ascending client id.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;

use crate::data::LocalizationTask;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::mde;
use crate::model::{client_seed, ClientModel, LossBreakdown, ModelConfig};
use crate::nn::{GradientBundle, Mlp, Optimizer, OptimizerKind};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct FederationConfig {
    /// Maximum number of communication rounds `R`.
    pub rounds: usize,
    /// Local optimizer steps per round `N`.
    pub local_steps: usize,
    /// Outer (server) learning rate `η`.
    pub outer_lr: f64,
    /// Minibatch size `b` for every local step.
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once the relative change of the mean query loss stays below this
    /// for `patience` consecutive rounds. `None` always runs `rounds` rounds.
    pub convergence_tol: Option<f64>,
    pub patience: usize,
    /// Rule applied to the aggregated gradient. Plain SGD is the literal
    /// `θ − η Σ ρ_k g_k`; ADAM feeds `Σ ρ_k g_k` through a server-side ADAM.
    pub server_optimizer: OptimizerKind,
    /// Denominator floor of the server-side ADAM. Aggregated gradients
    /// shrink toward noise late in training; a floor well above the usual
    /// 1e-8 keeps the step from staying at full size there.
    pub server_adam_epsilon: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            rounds: 1000,
            local_steps: 5,
            outer_lr: 0.001,
            batch_size: 32,
            seed: 0,
            convergence_tol: Some(1e-5),
            patience: 20,
            server_optimizer: OptimizerKind::Sgd,
            server_adam_epsilon: 1e-3,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return Err(Error::InvalidConfig("outer learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if !(self.server_adam_epsilon > 0.0 && self.server_adam_epsilon.is_finite()) {
            return Err(Error::InvalidConfig("server ADAM epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Server-held shared parameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetaModel {
    pub theta: Mlp,
    pub round: u64,
    pub outer_lr: f64,
    pub optimizer: Optimizer,
}

impl MetaModel {
    pub fn new(theta: Mlp, outer_lr: f64, kind: OptimizerKind) -> Self {
        let optimizer = Optimizer::new(kind, &theta);
        MetaModel { theta, round: 0, outer_lr, optimizer }
    }
}

/// One participant of the federation.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub task: LocalizationTask,
    pub model: ClientModel,
    pub local_steps: usize,
    /// Contribution factor `ρ_k = |D_k^q| / Σ |D^q|`.
    pub weight: f64,
}

/// What a client sends back after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub grad: GradientBundle,
    pub query_loss: f64,
    /// Composite loss of the last local step, if any step ran.
    pub support_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: u64,
    pub mean_query_loss: f64,
    /// Query loss per client, ascending client id.
    pub client_losses: Vec<f64>,
}

/// Recomputes `ρ_k` from the query-set sizes of the cohort.
pub fn assign_weights(clients: &mut [ClientState]) -> Result<()> {
    if clients.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let total: usize = clients.iter().map(|c| c.task.query.len()).sum();
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    for c in clients.iter_mut() {
        c.weight = c.task.query.len() as f64 / total as f64;
    }
    Ok(())
}

/// Initial θ and one client per task, each assembled as `(α_k, θ⁰, β_k)`.
pub fn server_init(
    model_cfg: &ModelConfig,
    fed_cfg: &FederationConfig,
    tasks: Vec<LocalizationTask>,
) -> Result<(MetaModel, Vec<ClientState>)> {
    model_cfg.validate()?;
    fed_cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let theta = model_cfg.init_meta(fed_cfg.seed)?;
    let mut clients = tasks
        .into_iter()
        .enumerate()
        .map(|(id, task)| {
            if task.support.coord_dim() != model_cfg.coord_dim {
                return Err(Error::dims("task coordinates", model_cfg.coord_dim, task.support.coord_dim()));
            }
            let model = ClientModel::new(model_cfg, task.num_aps(), client_seed(fed_cfg.seed, id as u64), theta.clone())?;
            Ok(ClientState {
                id,
                task,
                model,
                local_steps: fed_cfg.local_steps,
                weight: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    assign_weights(&mut clients)?;
    let mut meta = MetaModel::new(theta, fed_cfg.outer_lr, fed_cfg.server_optimizer);
    if let Optimizer::Adam(state) = &mut meta.optimizer {
        state.epsilon = fed_cfg.server_adam_epsilon;
    }
    Ok((meta, clients))
}

/// Minibatch row indices: all rows when the set is no larger than `b`,
/// otherwise `b` distinct rows.
pub fn sample_batch(rng: &mut Rng, rows: usize, b: usize) -> Vec<usize> {
    if rows <= b {
        (0..rows).collect()
    } else {
        index::sample(rng, rows, b).into_vec()
    }
}

/// Takes one optimizer step on a minibatch of the support set.
pub fn support_step(
    model: &mut ClientModel,
    task: &LocalizationTask,
    rng: &mut Rng,
    batch_size: usize,
) -> Result<LossBreakdown> {
    let idx = sample_batch(rng, task.support.len(), batch_size);
    let (x, y) = batch_rows(task, &idx);
    model.train_step(&x, &y)
}

impl ClientState {
    /// Local training for one round; `theta` is copied, never mutated.
    pub fn local_train(&mut self, theta: &Mlp, round: u64, batch_size: usize, seed: u64) -> Result<ClientUpdate> {
        if self.task.support.is_empty() || self.task.query.is_empty() {
            return Err(Error::EmptyDataset);
        }
        self.model.load_meta(theta)?;
        let mut r = rng::seeded(seed, rng::stream_id(&[0xC11E, self.id as u64, round]));
        let mut support_loss = None;
        for _ in 0..self.local_steps {
            support_loss = Some(support_step(&mut self.model, &self.task, &mut r, batch_size)?.total);
        }
        let (query_loss, grad) = self
            .model
            .meta_gradient(self.task.query.rssi(), self.task.query_targets())?;
        Ok(ClientUpdate {
            client_id: self.id,
            grad,
            query_loss,
            support_loss,
        })
    }
}

/// `θ ← θ − η Σ_k ρ_k g_k` (or the server optimizer's rule for that
/// gradient), summed in ascending client id; bumps the round.
/// `weights[i]` belongs to `updates[i]`.
pub fn server_aggregate(meta: &mut MetaModel, updates: &[ClientUpdate], weights: &[f64]) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::EmptyCohort);
    }
    if weights.len() != updates.len() {
        return Err(Error::dims("aggregation weights", updates.len(), weights.len()));
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    for u in updates {
        if !u.grad.shape_matches(&meta.theta) {
            return Err(Error::InvalidConfig(alloc::format!(
                "update from client {} does not match the meta-model shape",
                u.client_id
            )));
        }
    }
    let first = order[0];
    let mut acc = updates[first].grad.clone();
    acc.scale(weights[first]);
    for &i in &order[1..] {
        acc.add_scaled(&updates[i].grad, weights[i])?;
    }
    meta.optimizer.step(&mut meta.theta, &acc, meta.outer_lr)?;
    meta.round += 1;
    Ok(())
}

/// Strategy for running the clients of one round.
pub trait ClientExecutor {
    /// Runs `work` once per client. Results may come back in any order.
    fn run_round(
        &self,
        clients: &mut [ClientState],
        work: &(dyn Fn(&mut ClientState) -> Result<ClientUpdate> + Sync),
    ) -> Vec<Result<ClientUpdate>>;
}

/// Runs clients one after another.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl ClientExecutor for Sequential {
    fn run_round(
        &self,
        clients: &mut [ClientState],
        work: &(dyn Fn(&mut ClientState) -> Result<ClientUpdate> + Sync),
    ) -> Vec<Result<ClientUpdate>> {
        clients.iter_mut().map(work).collect()
    }
}

/// Detects a plateau of the mean query loss.
#[derive(Debug, Clone)]
struct Plateau {
    tol: f64,
    patience: usize,
    streak: usize,
    last: Option<f64>,
}

impl Plateau {
    fn observe(&mut self, loss: f64) -> bool {
        if let Some(prev) = self.last {
            let rel = (loss - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
            self.streak = if rel < self.tol { self.streak + 1 } else { 0 };
        }
        self.last = Some(loss);
        self.patience > 0 && self.streak >= self.patience
    }
}

/// Callback invoked after every aggregated round.
pub type RoundHook<'a> = Box<dyn FnMut(&MetaModel, &RoundReport) -> Result<()> + 'a>;

/// Full federation state.
pub struct Federation {
    pub meta: MetaModel,
    pub clients: Vec<ClientState>,
    pub config: FederationConfig,
}

impl Federation {
    pub fn new(model_cfg: &ModelConfig, fed_cfg: &FederationConfig, tasks: Vec<LocalizationTask>) -> Result<Self> {
        let (meta, clients) = server_init(model_cfg, fed_cfg, tasks)?;
        Ok(Federation {
            meta,
            clients,
            config: fed_cfg.clone(),
        })
    }

    /// One broadcast → local training → aggregation cycle.
    pub fn round(&mut self, exec: &dyn ClientExecutor) -> Result<RoundReport> {
        let theta = self.meta.theta.clone();
        let round = self.meta.round;
        let (batch, seed) = (self.config.batch_size, self.config.seed);
        let work = move |c: &mut ClientState| c.local_train(&theta, round, batch, seed);
        let mut updates = exec
            .run_round(&mut self.clients, &work)
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        updates.sort_by_key(|u| u.client_id);
        let weights: Vec<f64> = updates
            .iter()
            .map(|u| {
                self.clients
                    .iter()
                    .find(|c| c.id == u.client_id)
                    .map(|c| c.weight)
                    .ok_or(Error::EmptyCohort)
            })
            .collect::<Result<_>>()?;
        server_aggregate(&mut self.meta, &updates, &weights)?;
        let client_losses: Vec<f64> = updates.iter().map(|u| u.query_loss).collect();
        let mean_query_loss = client_losses.iter().sum::<f64>() / client_losses.len() as f64;
        Ok(RoundReport {
            round: self.meta.round,
            mean_query_loss,
            client_losses,
        })
    }

    /// Runs up to `R` rounds, stopping early on a loss plateau.
    pub fn train(&mut self, exec: &dyn ClientExecutor, mut hook: Option<RoundHook<'_>>) -> Result<Vec<RoundReport>> {
        let mut plateau = self.config.convergence_tol.map(|tol| Plateau {
            tol,
            patience: self.config.patience,
            streak: 0,
            last: None,
        });
        let mut log = Vec::new();
        while (self.meta.round as usize) < self.config.rounds {
            let report = self.round(exec)?;
            if let Some(h) = hook.as_mut() {
                h(&self.meta, &report)?;
            }
            let stop = plateau.as_mut().is_some_and(|p| p.observe(report.mean_query_loss));
            log.push(report);
            if stop {
                break;
            }
        }
        Ok(log)
    }
}

/// Runs meta-training end to end and returns `θ^R` with the round log.
pub fn meta_train(
    model_cfg: &ModelConfig,
    fed_cfg: &FederationConfig,
    tasks: Vec<LocalizationTask>,
    exec: &dyn ClientExecutor,
) -> Result<(MetaModel, Vec<RoundReport>)> {
    let mut fed = Federation::new(model_cfg, fed_cfg, tasks)?;
    let log = fed.train(exec, None)?;
    Ok((fed.meta, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum InitMode {
    /// Random initialization of the whole model.
    #[cfg_attr(feature = "serde", serde(rename = "RI"))]
    Random,
    /// Meta part initialized from the trained meta-model.
    #[cfg_attr(feature = "serde", serde(rename = "MI"))]
    Meta,
}

impl InitMode {
    pub fn label(self) -> &'static str {
        match self {
            InitMode::Random => "RI",
            InitMode::Meta => "MI",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptationStep {
    pub step: usize,
    pub support_loss: f64,
    pub query_mde: f64,
}

/// Learning curve of one test task under one initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationTrace {
    pub task_id: String,
    pub mode: InitMode,
    pub seed: u64,
    /// Query MDE before the first step.
    pub initial_mde: f64,
    /// Steps `1..=N_κ`.
    pub steps: Vec<AdaptationStep>,
}

impl AdaptationTrace {
    pub fn mde_at(&self, step: usize) -> Option<f64> {
        step.checked_sub(1).and_then(|i| self.steps.get(i)).map(|s| s.query_mde)
    }
}

/// Query-set mean distance error in the task's original coordinate units.
pub fn query_mde(model: &ClientModel, task: &LocalizationTask) -> Result<f64> {
    let pred = model.full_forward(task.query.rssi())?;
    mde(&task.normalizer().denormalize(&pred), task.query.coords())
}

const TEST_CLIENT: u64 = u64::MAX;

/// Fresh test-client model. RI and MI share the encoder, decoder and mapper
/// draws for a given seed; RI additionally draws a random meta part.
pub fn test_client_model(
    model_cfg: &ModelConfig,
    task: &LocalizationTask,
    mode: InitMode,
    theta: &Mlp,
    seed: u64,
) -> Result<ClientModel> {
    let private_seed = client_seed(seed, TEST_CLIENT);
    let meta = match mode {
        InitMode::Meta => {
            if !theta.same_shape(&model_cfg.init_meta(0)?) {
                return Err(Error::InvalidConfig(alloc::format!(
                    "meta-model shape does not match config (d={}, n={})",
                    model_cfg.latent_dim,
                    model_cfg.feature_dim
                )));
            }
            theta.clone()
        }
        InitMode::Random => model_cfg.init_meta(rng::stream_id(&[seed, 0x0F1]))?,
    };
    ClientModel::new(model_cfg, task.num_aps(), private_seed, meta)
}

/// Few-shot adaptation of a new task, recording the query MDE after each of
/// `steps` optimizer steps on the support set.
pub fn meta_test(
    model_cfg: &ModelConfig,
    task: &LocalizationTask,
    mode: InitMode,
    theta: &Mlp,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(AdaptationTrace, ClientModel)> {
    if task.support.is_empty() || task.query.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = test_client_model(model_cfg, task, mode, theta, seed)?;
    let mut r = rng::seeded(seed, rng::stream_id(&[0x7E57, TEST_CLIENT]));
    let initial_mde = query_mde(&model, task)?;
    let mut trace = Vec::with_capacity(steps);
    for step in 1..=steps {
        let loss = support_step(&mut model, task, &mut r, batch_size)?;
        trace.push(AdaptationStep {
            step,
            support_loss: loss.total,
            query_mde: query_mde(&model, task)?,
        });
    }
    Ok((
        AdaptationTrace {
            task_id: task.id.clone(),
            mode,
            seed,
            initial_mde,
            steps: trace,
        },
        model,
    ))
}

/// Support rows and normalized labels for `idx`.
pub fn batch_rows(task: &LocalizationTask, idx: &[usize]) -> (Matrix, Matrix) {
    (
        task.support.rssi().select_rows(idx),
        task.support_targets().select_rows(idx),
    )
}
