//! Averaged stochastic dual ascent over the full simplex.
//!
//! Each step samples `i ~ mu` and `j ~ beta`, touches only `a_i` and `b_j`, and
//! reads `f_j = nu_j / beta_j` from a running sum, so its cost does not depend on
//! the support sizes. The estimate is recovered from the averaged `b`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dual::{DualState, Problem};
use crate::error::{Error, Result};
use crate::measures::{kl_divergence, DiscreteMeasure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    /// `1 / (lambda t)`
    StronglyConvex,
    /// `c0 eps / sqrt(t)`
    Convex,
    /// `min(1 / (lambda t), c0 eps / sqrt(t))`
    Combined,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strong" => Ok(Self::StronglyConvex),
            "convex" => Ok(Self::Convex),
            "combined" => Ok(Self::Combined),
            other => Err(Error::Parse(format!("unknown schedule `{other}`"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::StronglyConvex => "strong",
            Self::Convex => "convex",
            Self::Combined => "combined",
        })
    }
}

/// Default multiplier of the `eps / sqrt(t)` branch.
pub const DEFAULT_C0: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub kind: ScheduleKind,
    pub lambda: f64,
    pub c0: f64,
    pub epsilon: f64,
}

impl StepSchedule {
    pub fn new(kind: ScheduleKind, lambda: f64, c0: f64, epsilon: f64) -> Result<Self> {
        let needs_lambda = kind != ScheduleKind::Convex;
        let needs_c0 = kind != ScheduleKind::StronglyConvex;
        if kind == ScheduleKind::StronglyConvex && !(lambda > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "strongly convex schedule needs lambda > 0, got {lambda}"
            )));
        }
        if needs_lambda && (lambda < 0.0 || lambda.is_nan()) {
            return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {lambda}")));
        }
        if needs_c0 && !(c0 > 0.0 && epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "c0 and epsilon must be > 0, got {c0} and {epsilon}"
            )));
        }
        Ok(Self { kind, lambda, c0, epsilon })
    }

    /// Schedule with `lambda` and `eps` taken from the problem.
    pub fn for_problem(kind: ScheduleKind, problem: &Problem, c0: f64) -> Result<Self> {
        Self::new(kind, problem.constants().lambda, c0, problem.epsilon())
    }

    /// `gamma_t` for `t >= 1`. A zero `lambda` makes the `1 / (lambda t)` branch infinite.
    pub fn step_size(&self, t: u64) -> f64 {
        let t = t as f64;
        let strong = || 1.0 / (self.lambda * t);
        let convex = || self.c0 * self.epsilon / t.sqrt();
        match self.kind {
            ScheduleKind::StronglyConvex => strong(),
            ScheduleKind::Convex => convex(),
            ScheduleKind::Combined => strong().min(convex()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Averaging {
    Full,
    /// Average only the last `alpha T` iterates, `alpha` in `(0, 1]`.
    Suffix(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoints {
    Every(u64),
    /// Explicit step indices; the final step is always added.
    At(Vec<u64>),
}

impl Checkpoints {
    /// Roughly `per_decade` steps per power of ten from 1 up to `steps`.
    pub fn log_spaced(steps: u64, per_decade: u32) -> Self {
        let mut ts: Vec<u64> = (0..)
            .map(|k| 10f64.powf(k as f64 / per_decade.max(1) as f64).round() as u64)
            .take_while(|&t| t < steps)
            .collect();
        ts.push(steps);
        ts.dedup();
        Checkpoints::At(ts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub steps: u64,
    pub seed: u64,
    pub schedule: StepSchedule,
    pub averaging: Averaging,
    /// Keep `a_i + b_j - C_ij` of the updated pair inside `[-B, B]`.
    pub clamp_duals: bool,
    /// Steps between exact recomputations of the running sum; `None` means `10 J`.
    pub s_refresh_period: Option<u64>,
    /// `None` means every `max(T / 200, 1)` steps.
    pub checkpoints: Option<Checkpoints>,
}

impl SolverConfig {
    pub fn new(steps: u64, seed: u64, schedule: StepSchedule) -> Self {
        Self {
            steps,
            seed,
            schedule,
            averaging: Averaging::Full,
            clamp_duals: false,
            s_refresh_period: None,
            checkpoints: None,
        }
    }

    pub fn with_averaging(mut self, averaging: Averaging) -> Self {
        self.averaging = averaging;
        self
    }

    pub fn with_clamp(mut self, clamp: bool) -> Self {
        self.clamp_duals = clamp;
        self
    }

    pub fn with_checkpoints(mut self, checkpoints: Checkpoints) -> Self {
        self.checkpoints = Some(checkpoints);
        self
    }

    pub fn with_refresh_period(mut self, period: u64) -> Self {
        self.s_refresh_period = Some(period);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidParameter("steps must be >= 1".into()));
        }
        if let Averaging::Suffix(alpha) = self.averaging {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(Error::InvalidParameter(format!("suffix alpha must be in (0, 1], got {alpha}")));
            }
        }
        match &self.checkpoints {
            Some(Checkpoints::Every(0)) => Err(Error::InvalidParameter("checkpoint period must be >= 1".into())),
            Some(Checkpoints::At(ts)) if ts.iter().any(|&t| t == 0) => {
                Err(Error::InvalidParameter("checkpoint steps must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    pub(crate) fn refresh_period(&self, j_len: usize) -> u64 {
        self.s_refresh_period.unwrap_or(10 * j_len as u64).max(1)
    }

    /// Step after which the running averages restart, if any.
    pub(crate) fn suffix_start(&self) -> Option<u64> {
        match self.averaging {
            Averaging::Full => None,
            Averaging::Suffix(alpha) => {
                let start = ((1.0 - alpha) * self.steps as f64).ceil() as u64;
                (start > 0).then_some(start)
            }
        }
    }

    pub(crate) fn checkpoint_steps(&self) -> Vec<u64> {
        let steps = self.steps;
        let mut ts = match &self.checkpoints {
            Some(Checkpoints::At(ts)) => ts.iter().copied().filter(|&t| t <= steps).collect(),
            other => {
                let every = match other {
                    Some(Checkpoints::Every(n)) => *n,
                    _ => (steps / 200).max(1),
                };
                (1..=steps / every).map(|k| k * every).collect::<Vec<_>>()
            }
        };
        ts.push(steps);
        ts.sort_unstable();
        ts.dedup();
        ts
    }
}

/// One diagnostic record, computed from exact `O(I J)` quantities at the averaged iterates.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub t: u64,
    pub step_size: f64,
    pub grad_norm: f64,
    pub kl_to_reference: Option<f64>,
    pub dual_value: f64,
    /// Running mean of the squared stochastic-gradient norms.
    pub grad_second_moment: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
}

impl RunMetrics {
    pub const CSV_HEADER: &'static str = "t,step_size,grad_norm,kl_to_reference,dual_value,grad_second_moment";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let kl = r.kl_to_reference.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.t, r.step_size, r.grad_norm, kl, r.dual_value, r.grad_second_moment
            );
        }
        out
    }

    /// `(t, value)` pairs of one column, for slope fits.
    pub fn series(&self, pick: impl Fn(&MetricsRow) -> Option<f64>) -> Vec<(f64, f64)> {
        self.rows.iter().filter_map(|r| pick(r).map(|v| (r.t as f64, v))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunStatus {
    Completed,
    /// The exponent guard fired during step `step`; results are from the last valid state.
    Diverged { step: u64, exponent: f64 },
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub estimate: DiscreteMeasure,
    pub metrics: RunMetrics,
    pub state: DualState,
    pub status: RunStatus,
}

/// What one step touched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepStats {
    pub i: usize,
    pub j: usize,
    /// Iterate coordinates written. Averages are maintained lazily alongside
    /// each written coordinate and the periodic sum refresh is excluded.
    pub writes: usize,
}

/// Clamp `a_i + b_j - C_ij` into `[-B, B]` by moving `b_j`.
pub(crate) fn clamp_pair(a_i: f64, b_j: f64, c_ij: f64, bound: f64) -> f64 {
    let x = a_i + b_j - c_ij;
    if x > bound {
        b_j - (x - bound)
    } else if x < -bound {
        b_j + (-bound - x)
    } else {
        b_j
    }
}

pub(crate) fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::DivergenceDetected { exponent: f64::INFINITY })
    }
}

/// Moves `a_i` and `b_j` by the given increments during step `st.t + 1`.
fn apply_pair_update(p: &Problem, st: &mut DualState, i: usize, j: usize, da: f64, db: f64, clamp: bool) -> Result<()> {
    let t = st.t + 1;
    let new_a = check_finite(st.a[i] + da)?;
    let mut new_b = check_finite(st.b[j] + db)?;
    if clamp {
        new_b = clamp_pair(new_a, new_b, p.cost().get(i, j), p.constants().big_b);
    }
    st.a_mean.record(i, st.a[i], t);
    st.a[i] = new_a;
    update_b(p, st, j, new_b);
    Ok(())
}

pub(crate) fn update_b(p: &Problem, st: &mut DualState, j: usize, new_b: f64) {
    let t = st.t + 1;
    let beta = p.beta().weights();
    let old_b = st.b[j];
    st.b_mean.record(j, old_b, t);
    st.b[j] = new_b;
    if !st.sum.update(beta[j], old_b, new_b) {
        st.sum.rebuild(beta, &st.b);
    }
}

/// Closes step `st.t + 1`: advances the counter and refreshes the running sum on schedule.
pub(crate) fn finish_step(p: &Problem, st: &mut DualState, refresh: u64, grad_sq: f64) {
    st.t += 1;
    st.grad_sq_sum += grad_sq;
    if st.t % refresh == 0 {
        st.sum.rebuild(p.beta().weights(), &st.b);
    }
}

/// One averaged stochastic gradient ascent step. On error the state is unchanged.
pub fn sgd_step<R: Rng + ?Sized>(p: &Problem, st: &mut DualState, cfg: &SolverConfig, rng: &mut R) -> Result<StepStats> {
    if cfg.suffix_start() == Some(st.t) {
        st.a_mean.reset(st.t);
        st.b_mean.reset(st.t);
    }
    let t = st.t + 1;
    let gamma = cfg.schedule.step_size(t);
    let i = p.mu().sample_index(rng);
    let j = p.beta().sample_index(rng);
    let (g_a, g_b) = p.stochastic_grads(st, i, j)?;
    apply_pair_update(p, st, i, j, gamma * g_a, gamma * g_b, cfg.clamp_duals)?;
    finish_step(p, st, cfg.refresh_period(p.j_len()), g_a * g_a + g_b * g_b);
    Ok(StepStats { i, j, writes: 2 })
}

/// The estimate at the averaged dual `b`.
pub fn extract_estimator(p: &Problem, st: &DualState) -> DiscreteMeasure {
    p.density_from_dual(&st.b_bar())
}

fn euclidean_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().chain(b).map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn metrics_row(
    p: &Problem,
    st: &DualState,
    step_size: f64,
    reference: Option<&DiscreteMeasure>,
) -> MetricsRow {
    let a_bar = st.a_bar();
    let b_bar = st.b_bar();
    let grad_norm = p
        .exact_grad(&a_bar, &b_bar)
        .map(|(ga, gb)| euclidean_norm(&ga, &gb))
        .unwrap_or(f64::NAN);
    let dual_value = p.eval_f(&a_bar, &b_bar).unwrap_or(f64::NAN);
    let kl_to_reference = reference.map(|r| {
        let nu = p.density_from_dual(&b_bar);
        kl_divergence(r, &nu).unwrap_or(f64::NAN)
    });
    MetricsRow {
        t: st.t,
        step_size,
        grad_norm,
        kl_to_reference,
        dual_value,
        grad_second_moment: st.grad_second_moment(),
    }
}

/// Runs `cfg.steps` steps from the standard initialization.
pub fn run(p: &Problem, cfg: &SolverConfig, reference: Option<&DiscreteMeasure>) -> Result<RunOutput> {
    run_from(p, p.init_state(), cfg, reference)
}

/// Runs from a given state (its step counter is honored).
pub fn run_from(
    p: &Problem,
    mut st: DualState,
    cfg: &SolverConfig,
    reference: Option<&DiscreteMeasure>,
) -> Result<RunOutput> {
    cfg.validate()?;
    if let Some(r) = reference {
        if r.len() != p.j_len() {
            return Err(Error::SupportMismatch {
                left: r.len(),
                right: p.j_len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let checkpoints = cfg.checkpoint_steps();
    let start = st.t;
    let mut next = checkpoints.iter().copied().filter(|&c| c > start).peekable();
    let mut metrics = RunMetrics::default();
    let mut status = RunStatus::Completed;
    while st.t < cfg.steps {
        match sgd_step(p, &mut st, cfg, &mut rng) {
            Ok(_) => {}
            Err(Error::DivergenceDetected { exponent }) => {
                log::warn!("run diverged at step {} (exponent {exponent:.3e})", st.t + 1);
                status = RunStatus::Diverged { step: st.t + 1, exponent };
                break;
            }
            Err(e) => return Err(e),
        }
        if next.peek() == Some(&st.t) {
            next.next();
            metrics.rows.push(metrics_row(p, &st, cfg.schedule.step_size(st.t), reference));
        }
    }
    Ok(RunOutput {
        estimate: extract_estimator(p, &st),
        metrics,
        state: st,
        status,
    })
}
