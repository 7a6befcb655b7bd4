//! Gradient descent with Armijo backtracking and minibatch SGD with momentum.

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{KcsrError, Result};

/// Objective with a full gradient.
pub trait DifferentiableObjective {
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Objective whose gradient is estimated on ordered subsets of samples.
pub trait StochasticObjective {
    /// Number of samples `n` that minibatches are drawn from.
    fn samples(&self) -> usize;

    /// Objective and gradient at update `t` (1-based) on the samples at
    /// `indices` (sorted, 0-based).
    fn minibatch(&self, t: usize, x: &[f64], indices: &[usize]) -> Result<(f64, Vec<f64>)>;

    /// Objective on the whole sequence, if affordable.
    fn full_value(&self, _x: &[f64]) -> Option<Result<f64>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GdConfig {
    /// Stop once `|J(γ_{t+1}) − J(γ_t)| ≤ epsilon`.
    pub epsilon: f64,
    /// Sufficient-decrease constant of the Armijo condition.
    pub armijo_c: f64,
    /// Step shrink factor per backtracking trial.
    pub backtrack: f64,
    pub initial_step: f64,
    pub max_iters: usize,
}

impl Default for GdConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            armijo_c: 1e-4,
            backtrack: 0.5,
            initial_step: 1.0,
            max_iters: 1000,
        }
    }
}

impl GdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon > 0.0
            && self.armijo_c > 0.0
            && self.armijo_c < 1.0
            && self.backtrack > 0.0
            && self.backtrack < 1.0
            && self.initial_step > 0.0
            && self.max_iters > 0;
        if ok {
            Ok(())
        } else {
            Err(KcsrError::input(format!("invalid gradient-descent settings: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    /// Number of minibatch updates `T`.
    pub iterations: usize,
    pub batch: usize,
    pub eta0: f64,
    /// Geometric step decay: `η_t = η₀ ρᵗ`.
    pub rho: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl SgdConfig {
    pub const DEFAULT_BATCH: usize = 256;

    /// Defaults for a sequence of `n` samples: batch `min(256, n)` and enough
    /// updates to pass over the data at least 50 times and to let the step
    /// decay to 1% of `eta0`.
    pub fn for_length(n: usize) -> Self {
        let batch = Self::DEFAULT_BATCH.min(n.max(1));
        let rho = 0.999;
        Self {
            iterations: Self::default_iterations(n, batch, rho),
            batch,
            eta0: 0.1,
            rho,
            momentum: 0.9,
            seed: 0,
        }
    }

    pub fn default_iterations(n: usize, batch: usize, rho: f64) -> usize {
        Self::passes_to_iterations(n, batch, 50).max(Self::decay_iterations(rho, 0.01))
    }

    /// Updates after which `ρᵗ` has fallen to `fraction`; 0 when `ρ = 1`.
    pub fn decay_iterations(rho: f64, fraction: f64) -> usize {
        if rho >= 1.0 || rho <= 0.0 {
            return 0;
        }
        (fraction.ln() / rho.ln()).ceil() as usize
    }

    /// Smallest `T` with `T · batch ≥ passes · n`.
    pub fn passes_to_iterations(n: usize, batch: usize, passes: usize) -> usize {
        (passes * n).div_ceil(batch.max(1)).max(1)
    }

    pub fn with_batch(mut self, n: usize, batch: usize) -> Self {
        self.batch = batch;
        self.iterations = Self::default_iterations(n, batch, self.rho);
        self
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.batch == 0 || self.batch > n {
            return Err(KcsrError::input(format!(
                "minibatch size {} must lie in [1, {n}]",
                self.batch
            )));
        }
        let ok = self.iterations > 0
            && self.eta0 > 0.0
            && self.rho > 0.0
            && self.rho <= 1.0
            && (0.0..1.0).contains(&self.momentum);
        if ok {
            Ok(())
        } else {
            Err(KcsrError::input(format!("invalid SGD settings: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptResult {
    pub gamma: Vec<f64>,
    /// `(iteration, J)` pairs; iteration 0 is the starting point for GD.
    /// For SGD these are minibatch objectives.
    pub objective_trace: Vec<(usize, f64)>,
    /// Periodic full-sequence objectives recorded by SGD.
    pub full_objective_trace: Vec<(usize, f64)>,
    pub converged: bool,
    pub iterations_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearch {
    pub step: f64,
    /// Objective at the accepted (or last tried) point.
    pub value: f64,
    /// Whether the Armijo condition held at `step`.
    pub satisfied: bool,
}

/// Maximum number of step reductions before the search gives up.
pub const MAX_BACKTRACKS: usize = 60;

/// Largest `η = initial_step · backtrackᵐ` with
/// `J(x − η g) ≤ J(x) − c η ‖g‖²`. After [`MAX_BACKTRACKS`] reductions the
/// smallest trial step is returned with `satisfied = false`.
pub fn armijo_line_search<F>(mut eval: F, x: &[f64], fx: f64, grad: &[f64], config: &GdConfig) -> Result<LineSearch>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let grad_sq: f64 = grad.iter().map(|g| g * g).sum();
    let mut step = config.initial_step;
    let mut trial = vec![0.0; x.len()];
    let mut value = f64::NAN;
    for attempt in 0..=MAX_BACKTRACKS {
        for ((t, &xi), &gi) in trial.iter_mut().zip(x).zip(grad) {
            *t = xi - step * gi;
        }
        value = eval(&trial)?;
        if value - fx <= -config.armijo_c * step * grad_sq {
            return Ok(LineSearch {
                step,
                value,
                satisfied: true,
            });
        }
        if attempt < MAX_BACKTRACKS {
            step *= config.backtrack;
        }
    }
    Ok(LineSearch {
        step,
        value,
        satisfied: false,
    })
}

fn diverged(iteration: usize, detail: String, gamma: &[f64]) -> KcsrError {
    KcsrError::Diverged {
        iteration,
        detail,
        last_gamma: gamma.to_vec(),
    }
}

/// Gradient descent `γ ← γ − η ∇J` with Armijo steps until the objective
/// changes by at most `epsilon` or `max_iters` is reached.
///
/// A line search that fails to find sufficient decrease leaves `γ` in place,
/// which ends the run, so the trace is non-increasing.
pub fn run_gd<P: DifferentiableObjective>(problem: &P, gamma0: &[f64], config: &GdConfig) -> Result<OptResult> {
    config.validate()?;
    let mut gamma = gamma0.to_vec();
    if gamma.iter().any(|v| !v.is_finite()) {
        return Err(KcsrError::input("initial parameters must be finite"));
    }
    let mut trace = Vec::with_capacity(config.max_iters.min(4096) + 1);
    let mut converged = false;
    let mut iterations = 0;
    let (mut value, mut grad) = problem.value_and_grad(&gamma)?;
    if !value.is_finite() {
        return Err(diverged(0, format!("objective {value}"), &gamma));
    }
    trace.push((0, value));

    for t in 1..=config.max_iters {
        iterations = t;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(diverged(t, "non-finite gradient".into(), &gamma));
        }
        if grad.iter().all(|&g| g == 0.0) {
            trace.push((t, value));
            converged = true;
            break;
        }
        let search = armijo_line_search(|p| problem.value(p), &gamma, value, &grad, config)?;
        let next_value = if search.satisfied && search.value.is_finite() {
            for (g, d) in gamma.iter_mut().zip(&grad) {
                *g -= search.step * d;
            }
            search.value
        } else {
            debug!("line search stalled at iteration {t}; keeping the current point");
            value
        };
        trace.push((t, next_value));
        if (next_value - value).abs() <= config.epsilon {
            converged = true;
            break;
        }
        let (v, g) = problem.value_and_grad(&gamma)?;
        if !v.is_finite() {
            return Err(diverged(t, format!("objective {v}"), &gamma));
        }
        value = v;
        grad = g;
    }
    Ok(OptResult {
        gamma,
        objective_trace: trace,
        full_objective_trace: Vec::new(),
        converged,
        iterations_used: iterations,
    })
}

/// Minibatch SGD with heavy-ball momentum:
/// `Δ_t = μ Δ_{t−1} − η_t ∇J_batch`, `γ_t = γ_{t−1} + Δ_t`, `η_t = η₀ ρᵗ`.
///
/// Each minibatch is `batch` distinct indices drawn uniformly without
/// replacement and sorted, so samples keep their original positions.
pub fn run_sgd<P: StochasticObjective>(problem: &P, gamma0: &[f64], config: &SgdConfig) -> Result<OptResult> {
    let n = problem.samples();
    config.validate(n)?;
    let mut gamma = gamma0.to_vec();
    if gamma.iter().any(|v| !v.is_finite()) {
        return Err(KcsrError::input("initial parameters must be finite"));
    }
    let mut velocity = vec![0.0; gamma.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::with_capacity(config.iterations);
    let mut full_trace = Vec::new();
    let full_every = config.iterations.div_ceil(20).max(1);

    let mut record_full = |t: usize, gamma: &[f64]| -> Result<()> {
        if let Some(v) = problem.full_value(gamma) {
            full_trace.push((t, v?));
        }
        Ok(())
    };
    record_full(0, &gamma)?;

    for t in 1..=config.iterations {
        let eta = config.eta0 * config.rho.powi(t as i32);
        let mut batch = rand::seq::index::sample(&mut rng, n, config.batch).into_vec();
        batch.sort_unstable();
        let (value, grad) = problem.minibatch(t, &gamma, &batch)?;
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !value.is_finite() || !grad_norm.is_finite() {
            return Err(diverged(
                t,
                format!("η = {eta:.3e}, ‖∇γ‖ = {grad_norm:.3e}, J = {value}"),
                &gamma,
            ));
        }
        for ((v, g), d) in velocity.iter_mut().zip(gamma.iter_mut()).zip(&grad) {
            *v = config.momentum * *v - eta * d;
            *g += *v;
        }
        if gamma.iter().any(|v| !v.is_finite()) {
            return Err(diverged(
                t,
                format!("non-finite update, η = {eta:.3e}, ‖∇γ‖ = {grad_norm:.3e}"),
                &gamma,
            ));
        }
        trace.push((t, value));
        if t % full_every == 0 || t == config.iterations {
            record_full(t, &gamma)?;
        }
    }
    Ok(OptResult {
        gamma,
        objective_trace: trace,
        full_objective_trace: full_trace,
        converged: true,
        iterations_used: config.iterations,
    })
}
