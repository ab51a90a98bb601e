//! Empirical probes of the convergence analysis: steps to an ε-accurate
//! solution, the linearized n-step update, and rough estimates of the
//! smoothness and gradient-bound constants. Everything here runs plain
//! full-batch gradient descent so that trajectories are deterministic.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::LocalizationTask;
use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};
use crate::model::{ClientModel, Part};
use crate::nn::{mse_loss, Activation, DenseLayer, GradientBundle, Mlp};

/// A differentiable objective over a flat parameter vector.
pub trait SgdProblem {
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]) -> Result<()>;
    /// Training loss and its gradient over all parameters.
    fn train_grad(&self) -> Result<(f64, Vec<f64>)>;
    /// Gradient whose squared norm defines ε-accuracy.
    fn probe_grad(&self) -> Result<Vec<f64>>;
}

fn sub_scaled(p: &mut [f64], g: &[f64], lr: f64) {
    for (a, b) in p.iter_mut().zip(g) {
        *a -= lr * b;
    }
}

/// Least squares through a single linear layer; the probe gradient is the
/// full gradient on a separate evaluation set.
#[derive(Debug, Clone)]
pub struct LinearLeastSquares {
    pub net: Mlp,
    pub train: (Matrix, Matrix),
    pub eval: (Matrix, Matrix),
}

impl LinearLeastSquares {
    pub fn new(weights: Matrix, biases: Vec<f64>, train: (Matrix, Matrix), eval: (Matrix, Matrix)) -> Result<Self> {
        let net = Mlp::new(vec![DenseLayer::new(weights, biases, Activation::Identity)?])?;
        Ok(LinearLeastSquares { net, train, eval })
    }

    fn grad_on(&self, x: &Matrix, y: &Matrix) -> Result<(f64, Vec<f64>)> {
        let (pred, cache) = self.net.forward(x)?;
        let (loss, up) = mse_loss(&pred, y)?;
        let (g, _) = self.net.backward(&cache, &up)?;
        Ok((loss, g.to_flat()))
    }
}

impl SgdProblem for LinearLeastSquares {
    fn params(&self) -> Vec<f64> {
        self.net.to_flat()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        self.net.set_flat(params)
    }

    fn train_grad(&self) -> Result<(f64, Vec<f64>)> {
        self.grad_on(&self.train.0, &self.train.1)
    }

    fn probe_grad(&self) -> Result<Vec<f64>> {
        Ok(self.grad_on(&self.eval.0, &self.eval.1)?.1)
    }
}

/// A client model on its task: trains every part on the full support set;
/// the probe is the meta-part gradient on the query set.
#[derive(Debug, Clone)]
pub struct ClientProblem {
    pub model: ClientModel,
    pub task: LocalizationTask,
}

impl SgdProblem for ClientProblem {
    fn params(&self) -> Vec<f64> {
        self.model.to_flat()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let total: usize = Part::ALL.iter().map(|&p| self.model.net(p).num_params()).sum();
        if params.len() != total {
            return Err(Error::dims("client parameters", total, params.len()));
        }
        let mut offset = 0;
        for part in Part::ALL {
            let net = self.model.net_mut(part);
            let n = net.num_params();
            net.set_flat(&params[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    fn train_grad(&self) -> Result<(f64, Vec<f64>)> {
        let (loss, grads) = self
            .model
            .composite_loss(self.task.support.rssi(), self.task.support_targets())?;
        let mut flat = Vec::new();
        for part in Part::ALL {
            flat.extend(grads.get(part).values().copied());
        }
        Ok((loss.total, flat))
    }

    fn probe_grad(&self) -> Result<Vec<f64>> {
        let (_, g): (f64, GradientBundle) = self
            .model
            .meta_gradient(self.task.query.rssi(), self.task.query_targets())?;
        Ok(g.to_flat())
    }
}

/// Gradient-descent trajectory statistics.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpsilonRun {
    /// First step `n ≥ 1` with `‖probe gradient‖² < ε`, if reached.
    pub steps: Option<usize>,
    /// `‖probe gradient‖²` after every step.
    pub grad_norm_sq: Vec<f64>,
    /// `‖probe gradient‖²` before the first step.
    pub initial_grad_norm_sq: f64,
    /// Largest `‖Δ train gradient‖ / ‖Δ params‖` between consecutive steps.
    pub smoothness_estimate: f64,
}

/// Runs up to `max_steps` gradient steps with rate `lr`, stopping at the
/// first ε-accurate iterate.
pub fn epsilon_accuracy_steps<P: SgdProblem>(
    problem: &mut P,
    lr: f64,
    epsilon: f64,
    max_steps: usize,
) -> Result<EpsilonRun> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig("epsilon must be > 0".into()));
    }
    if !(lr > 0.0) {
        return Err(Error::InvalidConfig("learning rate must be > 0".into()));
    }
    let probe0 = problem.probe_grad()?;
    let mut run = EpsilonRun {
        steps: None,
        grad_norm_sq: Vec::new(),
        initial_grad_norm_sq: probe0.iter().map(|v| v * v).sum(),
        smoothness_estimate: 0.0,
    };
    let mut params = problem.params();
    let (_, mut grad) = problem.train_grad()?;
    for step in 1..=max_steps {
        let prev_params = params.clone();
        sub_scaled(&mut params, &grad, lr);
        problem.set_params(&params)?;
        let probe = problem.probe_grad()?;
        let g2: f64 = probe.iter().map(|v| v * v).sum();
        run.grad_norm_sq.push(g2);
        if g2 < epsilon {
            run.steps = Some(step);
            break;
        }
        let (_, next) = problem.train_grad()?;
        let dp: Vec<f64> = params.iter().zip(&prev_params).map(|(a, b)| a - b).collect();
        let dg: Vec<f64> = next.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let denom = norm(&dp);
        if denom > 0.0 {
            run.smoothness_estimate = run.smoothness_estimate.max(norm(&dg) / denom);
        }
        grad = next;
    }
    Ok(run)
}

/// Relative distance between `n` true gradient steps and the linearized
/// update `Ω⁰ − μ·n·∇L(Ω⁰)`, normalized by `‖Ω⁰‖`, for each rate in `lrs`.
/// The problem is restored to its starting parameters afterwards.
pub fn linearization_probe<P: SgdProblem>(problem: &mut P, lrs: &[f64], steps: usize) -> Result<Vec<(f64, f64)>> {
    let start = problem.params();
    let start_norm = norm(&start);
    if start_norm == 0.0 {
        return Err(Error::DivisionByZero("initial parameters have zero norm"));
    }
    let (_, g0) = problem.train_grad()?;
    let mut out = Vec::with_capacity(lrs.len());
    for &lr in lrs {
        let mut params = start.clone();
        problem.set_params(&params)?;
        for _ in 0..steps {
            let (_, g) = problem.train_grad()?;
            sub_scaled(&mut params, &g, lr);
            problem.set_params(&params)?;
        }
        let scale = lr * steps as f64;
        let linear: Vec<f64> = start.iter().zip(&g0).map(|(p, g)| p - scale * g).collect();
        let diff: Vec<f64> = params.iter().zip(&linear).map(|(a, b)| a - b).collect();
        out.push((lr, norm(&diff) / start_norm));
    }
    problem.set_params(&start)?;
    Ok(out)
}

/// Right-hand side of the step bound `N² < ((ε − 2G)/‖∇L⁰‖² + 1)/(δ₁μ)²`
/// with `G = ‖∇L⁰‖·‖∇L^ε‖`.
pub fn step_bound_sq(delta1: f64, lr: f64, epsilon: f64, init_grad_norm: f64, final_grad_norm: f64) -> f64 {
    let g = init_grad_norm * final_grad_norm;
    ((epsilon - 2.0 * g) / (init_grad_norm * init_grad_norm) + 1.0) / ((delta1 * lr) * (delta1 * lr))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ProbeConfig {
    pub epsilon: f64,
    pub lr: f64,
    pub max_steps: usize,
    pub linearization_lrs: Vec<f64>,
    pub linearization_steps: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epsilon: 1e-3,
            lr: 1e-2,
            max_steps: 500,
            linearization_lrs: vec![1e-2, 1e-3, 1e-4],
            linearization_steps: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TheoryProbeReport {
    pub epsilon: f64,
    pub lr: f64,
    pub random: EpsilonRun,
    pub meta: EpsilonRun,
    /// `(μ, residual)` pairs of the linearization probe (random init).
    pub linearization_residuals: Vec<(f64, f64)>,
    /// Largest probe gradient norm observed in either run.
    pub zeta_hat: f64,
    /// Largest smoothness ratio observed in either run.
    pub delta1_hat: f64,
    /// Evaluated step bound for each run (`None` when not reached or the
    /// bound is not positive).
    pub step_bound_random: Option<f64>,
    pub step_bound_meta: Option<f64>,
}

fn bound_for(run: &EpsilonRun, delta1: f64, cfg: &ProbeConfig) -> Option<f64> {
    let last = *run.grad_norm_sq.last()?;
    run.steps?;
    let b = step_bound_sq(delta1, cfg.lr, cfg.epsilon, libm::sqrt(run.initial_grad_norm_sq), libm::sqrt(last));
    (b > 0.0 && b.is_finite()).then(|| libm::sqrt(b))
}

/// ε-accuracy under both initializations plus the linearization probe.
pub fn theory_probe<P: SgdProblem>(random: &mut P, meta: &mut P, cfg: &ProbeConfig) -> Result<TheoryProbeReport> {
    let linearization_residuals = linearization_probe(random, &cfg.linearization_lrs, cfg.linearization_steps)?;
    let r = epsilon_accuracy_steps(random, cfg.lr, cfg.epsilon, cfg.max_steps)?;
    let m = epsilon_accuracy_steps(meta, cfg.lr, cfg.epsilon, cfg.max_steps)?;
    let zeta_hat = r
        .grad_norm_sq
        .iter()
        .chain(&m.grad_norm_sq)
        .chain([&r.initial_grad_norm_sq, &m.initial_grad_norm_sq])
        .map(|v| libm::sqrt(*v))
        .fold(0.0, f64::max);
    let delta1_hat = r.smoothness_estimate.max(m.smoothness_estimate);
    Ok(TheoryProbeReport {
        epsilon: cfg.epsilon,
        lr: cfg.lr,
        step_bound_random: bound_for(&r, delta1_hat, cfg),
        step_bound_meta: bound_for(&m, delta1_hat, cfg),
        random: r,
        meta: m,
        linearization_residuals,
        zeta_hat,
        delta1_hat,
    })
}
