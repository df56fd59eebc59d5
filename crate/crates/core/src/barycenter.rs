//! Regularized barycenter of several measures on a fixed support.
//!
//! Each input measure `mu^k` gets its own potential `a^k` while a single `b` is
//! shared. The objective is `sum_k theta_k F_k(a^k, b)`, where `F_k` is the dual
//! objective with `mu^k` in place of `mu`. Because the weights sum to one, the
//! entropy term appears once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dual::{default_log_gap, log_sum_exp, DualState, LazyMean, Problem};
use crate::error::{Error, Result};
use crate::measures::{kl_divergence, Categorical, CostMatrix, DiscreteMeasure, RegParams};
use crate::oracle::{simplex_grid_argmin, sinkhorn};
use crate::simplex::{
    check_finite, clamp_pair, finish_step, update_b, MetricsRow, RunMetrics, RunStatus, ScheduleKind,
    SolverConfig, StepSchedule,
};

#[derive(Debug, Clone)]
pub struct BarycenterProblem {
    /// One single-measure problem per input, all sharing the prior and the log gap.
    parts: Vec<Problem>,
    weights: Vec<f64>,
    sampler: Categorical,
}

impl BarycenterProblem {
    /// `log_gap` overrides the default `m = log(1 / min beta)`.
    pub fn new(
        inputs: Vec<DiscreteMeasure>,
        weights: Vec<f64>,
        beta: DiscreteMeasure,
        costs: Vec<CostMatrix>,
        reg: RegParams,
        log_gap: Option<f64>,
    ) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidParameter("barycenter needs at least one input".into()));
        }
        if weights.len() != inputs.len() || costs.len() != inputs.len() {
            return Err(Error::LengthMismatch {
                expected: inputs.len(),
                found: if weights.len() != inputs.len() { weights.len() } else { costs.len() },
            });
        }
        let total: f64 = weights.iter().sum();
        let sampler = Categorical::new(&weights)?;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("barycenter weights sum to {total}, not 1")));
        }
        let m = log_gap.unwrap_or_else(|| default_log_gap(&beta));
        let parts = inputs
            .into_iter()
            .zip(costs)
            .map(|(mu, cost)| Problem::new(mu, beta.clone(), cost, reg, Some(m)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { parts, weights, sampler })
    }

    /// Input `k` as a single-measure problem.
    pub fn part(&self, k: usize) -> &Problem {
        &self.parts[k]
    }

    pub fn parts(&self) -> &[Problem] {
        &self.parts
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn k_len(&self) -> usize {
        self.parts.len()
    }

    pub fn j_len(&self) -> usize {
        self.parts[0].j_len()
    }

    pub fn beta(&self) -> &DiscreteMeasure {
        self.parts[0].beta()
    }

    pub fn epsilon(&self) -> f64 {
        self.parts[0].epsilon()
    }

    pub fn gap(&self) -> f64 {
        self.parts[0].gap()
    }

    fn active(&self) -> impl Iterator<Item = usize> + Clone + '_ {
        (0..self.k_len()).filter(|&k| self.weights[k] > 0.0)
    }

    /// Smallest strong-concavity modulus over the inputs with positive weight.
    pub fn lambda(&self) -> f64 {
        self.active()
            .map(|k| self.parts[k].constants().lambda)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn schedule(&self, kind: ScheduleKind, c0: f64) -> Result<StepSchedule> {
        StepSchedule::new(kind, self.lambda(), c0, self.epsilon())
    }

    /// `b` starts at the smallest single-problem initial value and each `a^k`
    /// takes the rest, so `a^k_i + b_j - C^k_ij <= -eps m` everywhere.
    pub fn init_state(&self) -> BarycenterState {
        let base: Vec<f64> = self
            .parts
            .iter()
            .map(|p| p.cost().min() - p.epsilon() * p.constants().m)
            .collect();
        let b0 = base.iter().map(|v| v / 2.0).fold(f64::INFINITY, f64::min);
        let a = self
            .parts
            .iter()
            .zip(&base)
            .map(|(p, v)| vec![v - b0; p.i_len()])
            .collect();
        BarycenterState::new(a, vec![b0; self.j_len()], self)
    }

    /// `sum_k theta_k F_k(a^k, b)`. Costs `O(sum_k I_k J)`.
    pub fn eval_f_tilde(&self, a: &[Vec<f64>], b: &[f64]) -> Result<f64> {
        let eps = self.epsilon();
        let beta = self.beta().weights();
        let mut total = 0.0;
        for k in self.active() {
            let p = &self.parts[k];
            let mut linear = 0.0;
            let mut mass = 0.0;
            for (i, (&mu_i, &a_i)) in p.mu().weights().iter().zip(&a[k]).enumerate() {
                linear += mu_i * a_i;
                let mut row = 0.0;
                for (j, &b_j) in b.iter().enumerate() {
                    row += beta[j] * p.gibbs_factor(a_i, b_j, i, j)?;
                }
                mass += mu_i * row;
            }
            total += self.weights[k] * (linear - eps * mass);
        }
        let gap = self.gap();
        let alpha: Vec<f64> = b.iter().map(|bj| -bj / gap).collect();
        Ok(total - gap * self.parts[0].legendre_entropy(&alpha))
    }

    /// Exact gradient: `theta_k` times the single-problem `a`-gradient for each
    /// input, and `nu(b) - beta_j sum_k theta_k sum_i mu^k_i D^k_ij` for `b`.
    pub fn exact_grad(&self, a: &[Vec<f64>], b: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let beta = self.beta().weights();
        let mut grad_a: Vec<Vec<f64>> = a.iter().map(|v| vec![0.0; v.len()]).collect();
        let mut col = vec![0.0; b.len()];
        for k in self.active() {
            let p = &self.parts[k];
            let w = self.weights[k];
            let mu = p.mu().weights();
            for i in 0..a[k].len() {
                let mut row = 0.0;
                for j in 0..b.len() {
                    let d = p.gibbs_factor(a[k][i], b[j], i, j)?;
                    row += beta[j] * d;
                    col[j] += w * mu[i] * d;
                }
                grad_a[k][i] = w * mu[i] * (1.0 - row);
            }
        }
        let nu = self.density_from_dual(b);
        let grad_b = (0..b.len()).map(|j| nu.weights()[j] - beta[j] * col[j]).collect();
        Ok((grad_a, grad_b))
    }

    pub fn density_from_dual(&self, b: &[f64]) -> DiscreteMeasure {
        self.parts[0].density_from_dual(b)
    }

    /// `sum_k theta_k OT_eps(mu^k, nu) + eta KL(nu, beta)`.
    pub fn primal_objective(&self, nu: &DiscreteMeasure, tol: f64) -> Result<f64> {
        let mut total = 0.0;
        for k in self.active() {
            let p = &self.parts[k];
            total += self.weights[k] * sinkhorn(p.mu(), nu, p.cost(), p.epsilon(), tol, 1_000_000)?.value;
        }
        Ok(total + self.parts[0].reg().eta() * kl_divergence(nu, self.beta())?)
    }

    /// Grid minimizer of [`Self::primal_objective`] over the simplex; `J <= 6` only.
    pub fn brute_force(&self, tol: f64) -> Result<DiscreteMeasure> {
        let j = self.j_len();
        if j > 6 {
            return Err(Error::InvalidParameter(format!("grid search supports J <= 6, got {j}")));
        }
        let support = self.beta().support().clone();
        let nu = simplex_grid_argmin(
            j,
            |w| {
                DiscreteMeasure::on_support(w.to_vec(), support.clone())
                    .and_then(|nu| self.primal_objective(&nu, 1e-13))
                    .unwrap_or(f64::INFINITY)
            },
            tol,
        );
        DiscreteMeasure::on_support(nu, support)
    }
}

/// Maximizer of the summed dual found by exact block-coordinate ascent.
#[derive(Debug, Clone)]
pub struct BarycenterSolution {
    pub a_star: Vec<Vec<f64>>,
    pub b_star: Vec<f64>,
    pub nu_star: DiscreteMeasure,
    pub f_star: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Alternates exact maximization over each `a^k` and over `b` until the
/// gradient norm drops below `tol`.
///
/// Given the `a^k`, the `b`-block optimum solves `nu_j(b) = beta_j exp(b_j / eps) R_j`
/// with `R_j = sum_k theta_k sum_i mu^k_i exp((a^k_i - C^k_ij) / eps)`, which has the
/// closed form `b_j = -kappa (log S + log R_j)` where `kappa = eps (eta - eps) / eta`
/// and `(1 - eps / eta) log S = log sum_j beta_j R_j^(eps / eta)`.
pub fn block_ascent(bp: &BarycenterProblem, tol: f64, max_iter: usize) -> Result<BarycenterSolution> {
    let eps = bp.epsilon();
    let eta = bp.part(0).reg().eta();
    let kappa = eps * bp.gap() / eta;
    let ratio = eps / eta;
    let log_beta: Vec<f64> = bp.beta().weights().iter().map(|w| w.ln()).collect();
    let j_len = bp.j_len();
    let init = bp.init_state();
    let mut a = init.a;
    let mut b = init.shared.b;
    let mut grad_norm = f64::INFINITY;
    for iter in 1..=max_iter {
        for k in bp.active() {
            let p = bp.part(k);
            for (i, a_i) in a[k].iter_mut().enumerate() {
                *a_i = -eps * log_sum_exp((0..j_len).map(|j| log_beta[j] + (b[j] - p.cost().get(i, j)) / eps));
            }
        }
        let log_r: Vec<f64> = (0..j_len)
            .map(|j| {
                log_sum_exp(bp.active().flat_map(|k| {
                    let p = bp.part(k);
                    let log_w = bp.weights()[k].ln();
                    let a_k = &a[k];
                    p.mu()
                        .weights()
                        .iter()
                        .enumerate()
                        .map(move |(i, m)| log_w + m.ln() + (a_k[i] - p.cost().get(i, j)) / eps)
                }))
            })
            .collect();
        let log_s = log_sum_exp((0..j_len).map(|j| log_beta[j] + ratio * log_r[j])) / (1.0 - ratio);
        for j in 0..j_len {
            b[j] = -kappa * (log_s + log_r[j]);
        }
        let (ga, gb) = bp.exact_grad(&a, &b)?;
        grad_norm = ga.iter().flatten().chain(&gb).map(|v| v * v).sum::<f64>().sqrt();
        if grad_norm <= tol {
            return Ok(BarycenterSolution {
                f_star: bp.eval_f_tilde(&a, &b)?,
                nu_star: bp.density_from_dual(&b),
                a_star: a,
                b_star: b,
                grad_norm,
                iterations: iter,
            });
        }
    }
    Err(Error::MaxIterExceeded {
        iterations: max_iter,
        residual: grad_norm,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarycenterState {
    a: Vec<Vec<f64>>,
    a_mean: Vec<LazyMean>,
    /// Holds `b`, its average, the normalizer sum and the step counter; its own
    /// `a` is empty.
    shared: DualState,
}

impl BarycenterState {
    pub fn new(a: Vec<Vec<f64>>, b: Vec<f64>, bp: &BarycenterProblem) -> Self {
        Self {
            a_mean: a.iter().map(|v| LazyMean::new(v.len(), 0)).collect(),
            a,
            shared: DualState::new(Vec::new(), b, bp.beta().weights(), bp.gap()),
        }
    }

    pub fn a(&self) -> &[Vec<f64>] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        self.shared.b()
    }

    pub fn t(&self) -> u64 {
        self.shared.t()
    }

    pub fn a_bar(&self) -> Vec<Vec<f64>> {
        let t = self.t();
        self.a.iter().zip(&self.a_mean).map(|(a, m)| m.materialize(a, t)).collect()
    }

    pub fn b_bar(&self) -> Vec<f64> {
        self.shared.b_bar()
    }

    pub fn s_sum_relative_error(&self, beta: &[f64]) -> f64 {
        self.shared.s_sum_relative_error(beta)
    }

    pub fn grad_second_moment(&self) -> f64 {
        self.shared.grad_second_moment()
    }

    fn begin_step(&mut self, cfg: &SolverConfig) {
        let t = self.t();
        if cfg.suffix_start() == Some(t) {
            self.a_mean.iter_mut().for_each(|m| m.reset(t));
            self.shared.b_mean.reset(t);
        }
    }

    fn write_a(&mut self, k: usize, i: usize, value: f64) {
        let t = self.t() + 1;
        self.a_mean[k].record(i, self.a[k][i], t);
        self.a[k][i] = value;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarycenterVariant {
    /// Every input moves each step.
    Full,
    /// One input drawn with probability `theta_k` moves each step.
    Randomized,
}

impl std::str::FromStr for BarycenterVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "randomized" => Ok(Self::Randomized),
            other => Err(Error::InvalidParameter(format!("unknown barycenter variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarycenterStepStats {
    /// Sampled `(k, i)` pairs, one per moved input.
    pub sampled: Vec<(usize, usize)>,
    pub j: usize,
    pub writes: usize,
}

/// One step moving every input with positive weight: `i_k ~ mu^k` for each `k`
/// in order, then a shared `j ~ beta`. On error the state is unchanged.
pub fn sgd_step_full<R: Rng + ?Sized>(
    bp: &BarycenterProblem,
    st: &mut BarycenterState,
    cfg: &SolverConfig,
    rng: &mut R,
) -> Result<BarycenterStepStats> {
    st.begin_step(cfg);
    let t = st.t() + 1;
    let gamma = cfg.schedule.step_size(t);
    let sampled: Vec<(usize, usize)> = bp.active().map(|k| (k, bp.parts[k].mu().sample_index(rng))).collect();
    let j = bp.beta().sample_index(rng);
    let b_j = st.shared.b[j];
    let f = st.shared.sum.ratio(b_j);

    let mut g_b = 0.0;
    let mut grad_sq = 0.0;
    let mut new_a = Vec::with_capacity(sampled.len());
    for &(k, i) in &sampled {
        let w = bp.weights[k];
        let d = bp.parts[k].gibbs_factor(st.a[k][i], b_j, i, j)?;
        let g_a = w * (1.0 - d);
        g_b += w * (f - d);
        grad_sq += g_a * g_a;
        new_a.push(check_finite(st.a[k][i] + gamma * g_a)?);
    }
    let mut new_b = check_finite(b_j + gamma * g_b)?;
    if cfg.clamp_duals {
        for (&(k, i), &a_i) in sampled.iter().zip(&new_a) {
            let p = &bp.parts[k];
            new_b = clamp_pair(a_i, new_b, p.cost().get(i, j), p.constants().big_b);
        }
    }

    for (&(k, i), &a_i) in sampled.iter().zip(&new_a) {
        st.write_a(k, i, a_i);
    }
    update_b(&bp.parts[0], &mut st.shared, j, new_b);
    finish_step(&bp.parts[0], &mut st.shared, cfg.refresh_period(bp.j_len()), grad_sq + g_b * g_b);
    Ok(BarycenterStepStats {
        writes: sampled.len() + 1,
        sampled,
        j,
    })
}

/// One step of the single-measure solver on an input drawn with probability
/// `theta_k`; the update is not scaled by `theta_k`. On error the state is unchanged.
pub fn sgd_step_randomized<R: Rng + ?Sized>(
    bp: &BarycenterProblem,
    st: &mut BarycenterState,
    cfg: &SolverConfig,
    rng: &mut R,
) -> Result<BarycenterStepStats> {
    st.begin_step(cfg);
    let t = st.t() + 1;
    let gamma = cfg.schedule.step_size(t);
    let k = bp.sampler.sample(rng);
    let p = &bp.parts[k];
    let i = p.mu().sample_index(rng);
    let j = bp.beta().sample_index(rng);
    let b_j = st.shared.b[j];
    let d = p.gibbs_factor(st.a[k][i], b_j, i, j)?;
    let (g_a, g_b) = (1.0 - d, st.shared.sum.ratio(b_j) - d);
    let new_a = check_finite(st.a[k][i] + gamma * g_a)?;
    let mut new_b = check_finite(b_j + gamma * g_b)?;
    if cfg.clamp_duals {
        new_b = clamp_pair(new_a, new_b, p.cost().get(i, j), p.constants().big_b);
    }
    st.write_a(k, i, new_a);
    update_b(p, &mut st.shared, j, new_b);
    finish_step(p, &mut st.shared, cfg.refresh_period(bp.j_len()), g_a * g_a + g_b * g_b);
    Ok(BarycenterStepStats {
        sampled: vec![(k, i)],
        j,
        writes: 2,
    })
}

pub fn barycenter_step<R: Rng + ?Sized>(
    bp: &BarycenterProblem,
    st: &mut BarycenterState,
    cfg: &SolverConfig,
    variant: BarycenterVariant,
    rng: &mut R,
) -> Result<BarycenterStepStats> {
    match variant {
        BarycenterVariant::Full => sgd_step_full(bp, st, cfg, rng),
        BarycenterVariant::Randomized => sgd_step_randomized(bp, st, cfg, rng),
    }
}

#[derive(Debug, Clone)]
pub struct BarycenterOutput {
    pub estimate: DiscreteMeasure,
    pub metrics: RunMetrics,
    pub state: BarycenterState,
    pub status: RunStatus,
}

fn barycenter_metrics_row(
    bp: &BarycenterProblem,
    st: &BarycenterState,
    step_size: f64,
    reference: Option<&DiscreteMeasure>,
) -> MetricsRow {
    let a_bar = st.a_bar();
    let b_bar = st.b_bar();
    let grad_norm = bp
        .exact_grad(&a_bar, &b_bar)
        .map(|(ga, gb)| ga.iter().flatten().chain(&gb).map(|v| v * v).sum::<f64>().sqrt())
        .unwrap_or(f64::NAN);
    let dual_value = bp.eval_f_tilde(&a_bar, &b_bar).unwrap_or(f64::NAN);
    let kl_to_reference =
        reference.map(|r| kl_divergence(r, &bp.density_from_dual(&b_bar)).unwrap_or(f64::NAN));
    MetricsRow {
        t: st.t(),
        step_size,
        grad_norm,
        kl_to_reference,
        dual_value,
        grad_second_moment: st.grad_second_moment(),
    }
}

/// Runs `cfg.steps` steps from [`BarycenterProblem::init_state`]; the estimate
/// is read from the averaged `b`.
pub fn run_barycenter(
    bp: &BarycenterProblem,
    cfg: &SolverConfig,
    variant: BarycenterVariant,
    reference: Option<&DiscreteMeasure>,
) -> Result<BarycenterOutput> {
    cfg.validate()?;
    if let Some(r) = reference {
        if r.len() != bp.j_len() {
            return Err(Error::SupportMismatch {
                left: r.len(),
                right: bp.j_len(),
            });
        }
    }
    let mut st = bp.init_state();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut next = cfg.checkpoint_steps().into_iter().peekable();
    let mut metrics = RunMetrics::default();
    let mut status = RunStatus::Completed;
    while st.t() < cfg.steps {
        match barycenter_step(bp, &mut st, cfg, variant, &mut rng) {
            Ok(_) => {}
            Err(Error::DivergenceDetected { exponent }) => {
                log::warn!("barycenter run diverged at step {} (exponent {exponent:.3e})", st.t() + 1);
                status = RunStatus::Diverged { step: st.t() + 1, exponent };
                break;
            }
            Err(e) => return Err(e),
        }
        if next.peek() == Some(&st.t()) {
            next.next();
            metrics
                .rows
                .push(barycenter_metrics_row(bp, &st, cfg.schedule.step_size(st.t()), reference));
        }
    }
    Ok(BarycenterOutput {
        estimate: bp.density_from_dual(&st.b_bar()),
        metrics,
        state: st,
        status,
    })
}
