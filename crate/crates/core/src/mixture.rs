//! Estimation over the convex hull of fixed component measures.
//!
//! The estimate is `nu = M theta` where column `k` of `M` holds the weights of
//! component `k` on the prior's support. The solver regularizes `theta` towards
//! `M^+ beta` and keeps logits `alpha` in step with the dual `b`, so one step
//! costs `O(K)`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dual::{log_sum_exp, softmax, DualState, Problem};
use crate::error::{Error, Result};
use crate::measures::{kl_divergence, DiscreteMeasure, RegParams, SupportPoints};
use crate::oracle::{simplex_grid_argmin, sinkhorn};
use crate::simplex::{check_finite, clamp_pair, MetricsRow, RunMetrics, RunStatus, SolverConfig, StepStats};

/// Relative singular-value cutoff of the pseudo-inverse.
pub const PINV_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct MixtureModel {
    /// `J x K`, row-major.
    m: Vec<f64>,
    j_len: usize,
    k_len: usize,
    pinv: DMatrix<f64>,
    projector: DMatrix<f64>,
    pinv_prior: Vec<f64>,
    log_pinv_prior: Vec<f64>,
    beta: Vec<f64>,
    support: SupportPoints,
}

/// Assembles `M` from components on the prior's support and validates `M^+ beta > 0`.
pub fn build_mixture(components: &[DiscreteMeasure], beta: &DiscreteMeasure) -> Result<MixtureModel> {
    if components.is_empty() {
        return Err(Error::InvalidParameter("mixture needs at least one component".into()));
    }
    let j_len = beta.len();
    let k_len = components.len();
    for c in components {
        if c.len() != j_len || c.support() != beta.support() {
            return Err(Error::SupportMismatch {
                left: c.len(),
                right: j_len,
            });
        }
    }
    let mut m = vec![0.0; j_len * k_len];
    for (k, c) in components.iter().enumerate() {
        for (j, w) in c.weights().iter().enumerate() {
            m[j * k_len + k] = *w;
        }
    }
    let mat = DMatrix::from_row_slice(j_len, k_len, &m);
    let svd = mat.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let pinv = svd
        .pseudo_inverse(PINV_CUTOFF * sigma_max)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let projector = &mat * &pinv;
    let pinv_prior: Vec<f64> = (&pinv * nalgebra::DVector::from_column_slice(beta.weights())).iter().copied().collect();
    for (index, &value) in pinv_prior.iter().enumerate() {
        if !(value > 0.0) {
            return Err(Error::NonpositivePrior { index, value });
        }
    }
    let log_pinv_prior = pinv_prior.iter().map(|v| v.ln()).collect();
    Ok(MixtureModel {
        m,
        j_len,
        k_len,
        pinv,
        projector,
        pinv_prior,
        log_pinv_prior,
        beta: beta.weights().to_vec(),
        support: beta.support().clone(),
    })
}

impl MixtureModel {
    pub fn components(&self) -> usize {
        self.k_len
    }

    pub fn atoms(&self) -> usize {
        self.j_len
    }

    /// Weight of component `k` at atom `j`.
    #[inline]
    pub fn entry(&self, j: usize, k: usize) -> f64 {
        self.m[j * self.k_len + k]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.m[j * self.k_len..(j + 1) * self.k_len]
    }

    /// `M^+ beta`.
    pub fn pinv_prior(&self) -> &[f64] {
        &self.pinv_prior
    }

    pub fn log_pinv_prior(&self) -> &[f64] {
        &self.log_pinv_prior
    }

    pub fn pseudo_inverse(&self) -> &DMatrix<f64> {
        &self.pinv
    }

    /// Orthogonal projector onto the column space of `M`.
    pub fn projector(&self) -> &DMatrix<f64> {
        &self.projector
    }

    /// `M theta` as raw weights.
    pub fn mix(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.j_len)
            .map(|j| self.row(j).iter().zip(theta).map(|(m, t)| m * t).sum())
            .collect()
    }

    /// `M theta` as a measure on the prior's support.
    pub fn mixture_measure(&self, theta: &[f64]) -> Result<DiscreteMeasure> {
        DiscreteMeasure::on_support(self.mix(theta), self.support.clone())
    }

    /// `M^T v`.
    pub fn transpose_apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.k_len)
            .map(|k| (0..self.j_len).map(|j| self.entry(j, k) * v[j]).sum())
            .collect()
    }
}

/// Mixture weights maximizing `alpha^T M theta - KL(theta, M^+ beta)` at `alpha = -b / (eta - eps)`.
pub fn closed_form_theta_modified(mm: &MixtureModel, b: &[f64], reg: &RegParams) -> Vec<f64> {
    let gap = reg.gap();
    let shifted: Vec<f64> = b.iter().map(|v| -v / gap - 1.0).collect();
    let logits: Vec<f64> = mm
        .transpose_apply(&shifted)
        .iter()
        .zip(&mm.log_pinv_prior)
        .map(|(x, l)| x + l)
        .collect();
    softmax(&logits)
}

/// Closed form for the hull-constrained entropy conjugate: projects
/// `-b / (eta - eps) - 1 + log beta` onto the column space of `M`,
/// exponentiates, and maps back through `M^+`. Returns `theta` and `M theta`.
pub fn closed_form_theta_projection(
    mm: &MixtureModel,
    b: &[f64],
    reg: &RegParams,
) -> Result<(Vec<f64>, DiscreteMeasure)> {
    let gap = reg.gap();
    let v = nalgebra::DVector::from_iterator(
        mm.j_len,
        b.iter().zip(&mm.beta).map(|(bj, w)| -bj / gap - 1.0 + w.ln()),
    );
    let w = &mm.projector * v;
    let max = w.max();
    let e = w.map(|x| (x - max).exp());
    let raw = &mm.pinv * e;
    let total = raw.sum();
    let theta: Vec<f64> = raw.iter().map(|x| x / total).collect();
    for (index, &value) in theta.iter().enumerate() {
        if value < 0.0 {
            return Err(Error::NegativeTheta { index, value });
        }
    }
    let nu = mm.mixture_measure(&theta)?;
    Ok((theta, nu))
}

/// `(alpha - log(M theta) + log beta)^T M theta`.
pub fn hull_legendre_objective(mm: &MixtureModel, alpha: &[f64], theta: &[f64]) -> f64 {
    mm.mix(theta)
        .iter()
        .zip(alpha)
        .zip(&mm.beta)
        .filter(|((nu, _), _)| **nu > 0.0)
        .map(|((nu, a), w)| nu * (a - nu.ln() + w.ln()))
        .sum()
}

/// `(M^T alpha - log theta + log M^+ beta)^T theta`.
pub fn modified_legendre_objective(mm: &MixtureModel, alpha: &[f64], theta: &[f64]) -> f64 {
    mm.transpose_apply(alpha)
        .iter()
        .zip(theta)
        .zip(&mm.log_pinv_prior)
        .filter(|((_, t), _)| **t > 0.0)
        .map(|((x, t), l)| t * (x - t.ln() + l))
        .sum()
}

/// `sum_k theta_k log(theta_k / p_k)` for a possibly unnormalized `p`.
fn relative_entropy(theta: &[f64], p: &[f64]) -> f64 {
    theta
        .iter()
        .zip(p)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, q)| t * (t / q).ln())
        .sum()
}

/// Dual objective of the mixture problem:
/// `sum mu a - eps sum mu beta D - (eta - eps) log sum_k p_k exp((M^T (-b / (eta - eps)))_k)`.
pub fn mixture_eval_f(p: &Problem, mm: &MixtureModel, a: &[f64], b: &[f64]) -> Result<f64> {
    let gap = p.gap();
    let mut linear = 0.0;
    let mut mass = 0.0;
    for (i, (&mu_i, &a_i)) in p.mu().weights().iter().zip(a).enumerate() {
        linear += mu_i * a_i;
        for (j, (&beta_j, &b_j)) in p.beta().weights().iter().zip(b).enumerate() {
            mass += mu_i * beta_j * p.gibbs_factor(a_i, b_j, i, j)?;
        }
    }
    let alpha: Vec<f64> = b.iter().map(|v| -v / gap).collect();
    let proj = mm.transpose_apply(&alpha);
    let conj = log_sum_exp(proj.iter().zip(&mm.log_pinv_prior).map(|(x, l)| x + l));
    Ok(linear - p.epsilon() * mass - gap * conj)
}

/// Exact gradient of [`mixture_eval_f`]; the `b` part uses `nu = M theta*(b)`.
pub fn mixture_exact_grad(p: &Problem, mm: &MixtureModel, a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mu = p.mu().weights();
    let beta = p.beta().weights();
    let mut grad_a = vec![0.0; a.len()];
    let mut col = vec![0.0; b.len()];
    for i in 0..a.len() {
        let mut row = 0.0;
        for j in 0..b.len() {
            let d = p.gibbs_factor(a[i], b[j], i, j)?;
            row += beta[j] * d;
            col[j] += mu[i] * d;
        }
        grad_a[i] = mu[i] * (1.0 - row);
    }
    let nu = mm.mix(&closed_form_theta_modified(mm, b, p.reg()));
    let grad_b = (0..b.len()).map(|j| nu[j] - beta[j] * col[j]).collect();
    Ok((grad_a, grad_b))
}

/// Primal objective minimized by the mixture solver:
/// `OT_eps(mu, M theta) + eps KL(M theta, beta) + (eta - eps) KL(theta, M^+ beta)`.
pub fn mixture_primal_objective(p: &Problem, mm: &MixtureModel, theta: &[f64], tol: f64) -> Result<f64> {
    let nu = mm.mixture_measure(theta)?;
    let ot = sinkhorn(p.mu(), &nu, p.cost(), p.epsilon(), tol, 1_000_000)?;
    Ok(ot.value + p.epsilon() * kl_divergence(&nu, p.beta())? + p.gap() * relative_entropy(theta, &mm.pinv_prior))
}

/// Grid minimizer of [`mixture_primal_objective`] over the weight simplex; small `K` only.
pub fn mixture_brute_force(p: &Problem, mm: &MixtureModel, tol: f64) -> Result<Vec<f64>> {
    if mm.k_len > 6 {
        return Err(Error::InvalidParameter(format!(
            "grid search supports K <= 6, got {}",
            mm.k_len
        )));
    }
    Ok(simplex_grid_argmin(
        mm.k_len,
        |theta| mixture_primal_objective(p, mm, theta, 1e-13).unwrap_or(f64::INFINITY),
        tol,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureState {
    dual: DualState,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    alpha_origin: u64,
}

impl MixtureState {
    /// Standard dual initialization with `alpha = log(M^+ beta)`.
    pub fn new(p: &Problem, mm: &MixtureModel) -> Self {
        let alpha = mm.log_pinv_prior.clone();
        Self {
            dual: p.init_state(),
            alpha_bar: alpha.clone(),
            alpha,
            alpha_origin: 0,
        }
    }

    pub fn a(&self) -> &[f64] {
        self.dual.a()
    }

    pub fn b(&self) -> &[f64] {
        self.dual.b()
    }

    pub fn a_bar(&self) -> Vec<f64> {
        self.dual.a_bar()
    }

    pub fn b_bar(&self) -> Vec<f64> {
        self.dual.b_bar()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `softmax(alpha)`.
    pub fn theta(&self) -> Vec<f64> {
        softmax(&self.alpha)
    }

    /// `softmax(alpha_bar)`, the reported mixture weights.
    pub fn theta_bar(&self) -> Vec<f64> {
        softmax(&self.alpha_bar)
    }

    pub fn t(&self) -> u64 {
        self.dual.t()
    }

    pub fn grad_second_moment(&self) -> f64 {
        self.dual.grad_second_moment()
    }
}

/// One step of the mixture solver. On error the state is unchanged.
pub fn sgd_step_mixture<R: Rng + ?Sized>(
    p: &Problem,
    mm: &MixtureModel,
    st: &mut MixtureState,
    cfg: &SolverConfig,
    rng: &mut R,
) -> Result<StepStats> {
    let dual = &mut st.dual;
    if cfg.suffix_start() == Some(dual.t) {
        dual.a_mean.reset(dual.t);
        dual.b_mean.reset(dual.t);
        st.alpha_origin = dual.t;
    }
    let t = dual.t + 1;
    let gamma = cfg.schedule.step_size(t);
    let gap = p.gap();
    let i = p.mu().sample_index(rng);
    let j = p.beta().sample_index(rng);
    let d = p.gibbs_factor(dual.a[i], dual.b[j], i, j)?;
    let theta = softmax(&st.alpha);
    let nu_j: f64 = mm.row(j).iter().zip(&theta).map(|(m, t)| m * t).sum();
    let f = nu_j / p.beta().weights()[j];
    let (g_a, g_b) = (1.0 - d, f - d);

    let new_a = check_finite(dual.a[i] + gamma * g_a)?;
    let mut new_b = check_finite(dual.b[j] + gamma * g_b)?;
    let mut b_step = gamma * g_b;
    if cfg.clamp_duals {
        let clamped = clamp_pair(new_a, new_b, p.cost().get(i, j), p.constants().big_b);
        if clamped != new_b {
            b_step = clamped - dual.b[j];
            new_b = clamped;
        }
    }
    let mut new_alpha = st.alpha.clone();
    for (k, m) in mm.row(j).iter().enumerate() {
        new_alpha[k] = check_finite(new_alpha[k] - b_step / gap * m)?;
    }

    dual.a_mean.record(i, dual.a[i], t);
    dual.a[i] = new_a;
    dual.b_mean.record(j, dual.b[j], t);
    dual.b[j] = new_b;
    st.alpha = new_alpha;
    let weight = 1.0 / (t - st.alpha_origin) as f64;
    for (bar, a) in st.alpha_bar.iter_mut().zip(&st.alpha) {
        *bar += weight * (a - *bar);
    }
    dual.t = t;
    dual.grad_sq_sum += g_a * g_a + g_b * g_b;
    Ok(StepStats {
        i,
        j,
        writes: 2 + 2 * mm.k_len,
    })
}

#[derive(Debug, Clone)]
pub struct MixtureOutput {
    pub theta: Vec<f64>,
    pub estimate: DiscreteMeasure,
    pub metrics: RunMetrics,
    pub state: MixtureState,
    pub status: RunStatus,
}

fn mixture_metrics_row(
    p: &Problem,
    mm: &MixtureModel,
    st: &MixtureState,
    step_size: f64,
    reference: Option<&DiscreteMeasure>,
) -> MetricsRow {
    let a_bar = st.a_bar();
    let b_bar = st.b_bar();
    let grad_norm = mixture_exact_grad(p, mm, &a_bar, &b_bar)
        .map(|(ga, gb)| ga.iter().chain(&gb).map(|v| v * v).sum::<f64>().sqrt())
        .unwrap_or(f64::NAN);
    let dual_value = mixture_eval_f(p, mm, &a_bar, &b_bar).unwrap_or(f64::NAN);
    let kl_to_reference = reference.map(|r| {
        mm.mixture_measure(&st.theta_bar())
            .and_then(|nu| kl_divergence(r, &nu))
            .unwrap_or(f64::NAN)
    });
    MetricsRow {
        t: st.t(),
        step_size,
        grad_norm,
        kl_to_reference,
        dual_value,
        grad_second_moment: st.grad_second_moment(),
    }
}

/// Runs the mixture solver; the result uses `theta = softmax(alpha_bar)` and `nu = M theta`.
pub fn run_mixture(
    p: &Problem,
    mm: &MixtureModel,
    cfg: &SolverConfig,
    reference: Option<&DiscreteMeasure>,
) -> Result<MixtureOutput> {
    cfg.validate()?;
    if mm.j_len != p.j_len() {
        return Err(Error::SupportMismatch {
            left: mm.j_len,
            right: p.j_len(),
        });
    }
    let mut st = MixtureState::new(p, mm);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut next = cfg.checkpoint_steps().into_iter().peekable();
    let mut metrics = RunMetrics::default();
    let mut status = RunStatus::Completed;
    while st.t() < cfg.steps {
        match sgd_step_mixture(p, mm, &mut st, cfg, &mut rng) {
            Ok(_) => {}
            Err(Error::DivergenceDetected { exponent }) => {
                log::warn!("mixture run diverged at step {} (exponent {exponent:.3e})", st.t() + 1);
                status = RunStatus::Diverged { step: st.t() + 1, exponent };
                break;
            }
            Err(e) => return Err(e),
        }
        if next.peek() == Some(&st.t()) {
            next.next();
            metrics
                .rows
                .push(mixture_metrics_row(p, mm, &st, cfg.schedule.step_size(st.t()), reference));
        }
    }
    let theta = st.theta_bar();
    Ok(MixtureOutput {
        estimate: mm.mixture_measure(&theta)?,
        theta,
        metrics,
        state: st,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::random_weighted_problem;
    use crate::simplex::{self, ScheduleKind, StepSchedule, DEFAULT_C0};
    use approx::assert_abs_diff_eq;

    fn line(n: usize) -> SupportPoints {
        SupportPoints::grid_1d(n).unwrap()
    }

    fn measure(w: &[f64], s: &SupportPoints) -> DiscreteMeasure {
        DiscreteMeasure::on_support(w.to_vec(), s.clone()).unwrap()
    }

    fn point_masses(n: usize) -> Vec<DiscreteMeasure> {
        let s = line(n);
        (0..n)
            .map(|k| measure(&(0..n).map(|j| if j == k { 1.0 } else { 0.0 }).collect::<Vec<_>>(), &s))
            .collect()
    }

    /// Components `c_k = beta (1 + v_k)` with `sum_k v_k = 0` and `sum_j beta_j v_kj = 0`,
    /// so `beta` is their average and `M^+ beta` stays positive. A single component
    /// is an unrelated random measure.
    fn random_components(beta: &DiscreteMeasure, k: usize, seed: u64) -> Vec<DiscreteMeasure> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = beta.weights();
        if k == 1 {
            let raw: Vec<f64> = w.iter().map(|_| rng.random_range(0.1..1.0)).collect();
            return vec![measure(&raw, beta.support())];
        }
        let mut v: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let r: Vec<f64> = w.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
                let mean: f64 = r.iter().zip(w).map(|(x, b)| x * b).sum();
                r.iter().map(|x| x - mean).collect()
            })
            .collect();
        for j in 0..w.len() {
            let mean = v.iter().map(|row| row[j]).sum::<f64>() / k as f64;
            v.iter_mut().for_each(|row| row[j] -= mean);
        }
        let scale = 0.5 / v.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
        v.iter()
            .map(|row| {
                let c: Vec<f64> = row.iter().zip(w).map(|(x, b)| b * (1.0 + scale * x)).collect();
                measure(&c, beta.support())
            })
            .collect()
    }

    #[test]
    fn single_component_pinv() {
        let s = line(3);
        let c = measure(&[0.2, 0.3, 0.5], &s);
        let beta = measure(&[0.5, 0.25, 0.25], &s);
        let mm = build_mixture(&[c.clone()], &beta).unwrap();
        let expected = (0.2 * 0.5 + 0.3 * 0.25 + 0.5 * 0.25) / (0.04 + 0.09 + 0.25);
        assert_abs_diff_eq!(mm.pinv_prior()[0], expected, epsilon = 1e-14);
    }

    #[test]
    fn identity_mixture() {
        let s = line(4);
        let beta = measure(&[0.1, 0.2, 0.3, 0.4], &s);
        let mm = build_mixture(&point_masses(4), &beta).unwrap();
        for (x, y) in mm.pinv_prior().iter().zip(beta.weights()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }
    }

    #[test]
    fn rank_deficient_components() {
        let s = line(3);
        let c1 = measure(&[0.5, 0.5, 0.0], &s);
        let c2 = measure(&[0.0, 0.5, 0.5], &s);
        let c3 = measure(&[0.25, 0.5, 0.25], &s);
        let beta = DiscreteMeasure::uniform(s.clone()).unwrap();
        let mm = build_mixture(&[c1, c2, c3], &beta).unwrap();
        let pinv = mm.pseudo_inverse();
        let mat = DMatrix::from_row_slice(3, 3, &mm.m);
        // Moore-Penrose conditions
        assert!((&mat * pinv * &mat - &mat).norm() < 1e-12);
        assert!((pinv * &mat * pinv - pinv).norm() < 1e-12);
        assert!(((&mat * pinv).transpose() - &mat * pinv).norm() < 1e-12);
        assert!((mm.projector() * mm.projector() - mm.projector()).norm() < 1e-12);
        assert!(mm.pinv_prior().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn construction_errors() {
        let s = line(2);
        let beta = measure(&[0.1, 0.9], &s);
        let comps = [measure(&[1.0, 0.0], &s), measure(&[0.5, 0.5], &s)];
        assert!(matches!(build_mixture(&comps, &beta), Err(Error::NonpositivePrior { index: 0, .. })));
        let other = measure(&[0.3, 0.3, 0.4], &line(3));
        assert!(matches!(build_mixture(&[other], &beta), Err(Error::SupportMismatch { .. })));
        assert!(build_mixture(&[], &beta).is_err());
    }

    #[test]
    fn modified_closed_form_reductions() {
        let s = line(4);
        let beta = DiscreteMeasure::uniform(s.clone()).unwrap();
        let mm = build_mixture(&point_masses(4), &beta).unwrap();
        let reg = RegParams::new(0.5, 1.0).unwrap();
        let b = [0.3, -0.2, 0.8, 0.1];
        let theta = closed_form_theta_modified(&mm, &b, &reg);
        let expected = softmax(&b.iter().map(|v| -v / 0.5).collect::<Vec<_>>());
        for (x, y) in theta.iter().zip(&expected) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }

        let comps = random_components(&beta, 3, 2);
        let mm = build_mixture(&comps, &beta).unwrap();
        let theta = closed_form_theta_modified(&mm, &[0.7; 4], &reg);
        let total: f64 = mm.pinv_prior().iter().sum();
        for (x, y) in theta.iter().zip(mm.pinv_prior()) {
            assert_abs_diff_eq!(*x, y / total, epsilon = 1e-14);
        }
    }

    #[test]
    fn modified_closed_form_maximizes() {
        let s = line(5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..3 {
            let beta = measure(&(0..5).map(|_| rng.random_range(0.2..1.0)).collect::<Vec<_>>(), &s);
            let mm = build_mixture(&random_components(&beta, 2, seed), &beta).unwrap();
            let reg = RegParams::new(0.3, 0.8).unwrap();
            let b: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let alpha: Vec<f64> = b.iter().map(|v| -v / reg.gap()).collect();
            let theta = closed_form_theta_modified(&mm, &b, &reg);
            let numeric = simplex_grid_argmin(2, |t| -modified_legendre_objective(&mm, &alpha, t), 1e-10);
            for (x, y) in theta.iter().zip(&numeric) {
                assert!((x - y).abs() < 1e-6, "{theta:?} vs {numeric:?}");
            }
            let best = modified_legendre_objective(&mm, &alpha, &theta);
            for _ in 0..200 {
                let w = rng.random_range(0.0..1.0);
                assert!(best >= modified_legendre_objective(&mm, &alpha, &[w, 1.0 - w]) - 1e-9);
            }
        }
    }

    #[test]
    fn projection_closed_form_reductions() {
        let s = line(4);
        let beta = measure(&[0.1, 0.2, 0.3, 0.4], &s);
        let reg = RegParams::new(0.5, 1.0).unwrap();
        let b = [0.3, -0.2, 0.8, 0.1];
        let mm = build_mixture(&point_masses(4), &beta).unwrap();
        let (theta, nu) = closed_form_theta_projection(&mm, &b, &reg).unwrap();
        let logits: Vec<f64> = b.iter().zip(beta.weights()).map(|(v, w)| w.ln() - v / 0.5).collect();
        let expected = softmax(&logits);
        for ((x, y), z) in theta.iter().zip(&expected).zip(nu.weights()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-13);
            assert_abs_diff_eq!(z, y, epsilon = 1e-13);
        }

        let single = random_components(&beta, 1, 5);
        let mm = build_mixture(&single, &beta).unwrap();
        let (theta, nu) = closed_form_theta_projection(&mm, &b, &reg).unwrap();
        assert_abs_diff_eq!(theta[0], 1.0, epsilon = 1e-14);
        for (x, y) in nu.weights().iter().zip(single[0].weights()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }
    }

    fn combined(p: &Problem) -> StepSchedule {
        StepSchedule::for_problem(ScheduleKind::Combined, p, DEFAULT_C0).unwrap()
    }

    fn grid_problem_with_beta(n: usize, eps: f64, eta: f64, seed: u64) -> Problem {
        random_weighted_problem(n, n, RegParams::new(eps, eta).unwrap(), seed).unwrap()
    }

    #[test]
    fn step_touches_two_plus_two_k() {
        let p = grid_problem_with_beta(5, 0.5, 1.0, 1);
        let comps = random_components(p.beta(), 3, 4);
        let mm = build_mixture(&comps, p.beta()).unwrap();
        let cfg = SolverConfig::new(100, 0, combined(&p));
        let mut st = MixtureState::new(&p, &mm);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let before = st.clone();
            let stats = sgd_step_mixture(&p, &mm, &mut st, &cfg, &mut rng).unwrap();
            let changed = (0..5).filter(|&i| st.a()[i] != before.a()[i]).count()
                + (0..5).filter(|&j| st.b()[j] != before.b()[j]).count()
                + (0..3).filter(|&k| st.alpha()[k] != before.alpha()[k]).count()
                + (0..3).filter(|&k| st.alpha_bar()[k] != before.alpha_bar()[k]).count();
            assert_eq!(stats.writes, 8);
            assert!(changed <= stats.writes);
            let theta = st.theta();
            assert_abs_diff_eq!(theta.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(theta.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn logits_track_closed_form() {
        let p = grid_problem_with_beta(4, 0.5, 1.0, 2);
        let comps = random_components(p.beta(), 2, 9);
        let mm = build_mixture(&comps, p.beta()).unwrap();
        let out = run_mixture(&p, &mm, &SolverConfig::new(5_000, 3, combined(&p)), None).unwrap();
        let from_b = closed_form_theta_modified(&mm, &out.state.b_bar(), p.reg());
        for (x, y) in out.theta.iter().zip(&from_b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
        let now = closed_form_theta_modified(&mm, out.state.b(), p.reg());
        for (x, y) in out.state.theta().iter().zip(&now) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn single_component_keeps_theta() {
        let p = grid_problem_with_beta(3, 0.5, 1.0, 3);
        let comps = random_components(p.beta(), 1, 1);
        let mm = build_mixture(&comps, p.beta()).unwrap();
        let out = run_mixture(&p, &mm, &SolverConfig::new(1000, 1, combined(&p)), None).unwrap();
        assert_eq!(out.theta, vec![1.0]);
        assert_eq!(out.estimate.weights(), comps[0].weights());
    }

    #[test]
    fn components_equal_to_prior() {
        let p = grid_problem_with_beta(3, 0.5, 1.0, 4);
        let comps = vec![p.beta().clone(), p.beta().clone()];
        let mm = build_mixture(&comps, p.beta()).unwrap();
        let out = run_mixture(&p, &mm, &SolverConfig::new(1000, 1, combined(&p)), None).unwrap();
        assert_abs_diff_eq!(out.theta.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for (x, y) in out.estimate.weights().iter().zip(p.beta().weights()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn identity_mixture_matches_simplex_solver() {
        let p = grid_problem_with_beta(4, 0.5, 1.0, 5);
        let mm = build_mixture(&point_masses_on(p.beta().support()), p.beta()).unwrap();
        let cfg = SolverConfig::new(20_000, 7, combined(&p));
        let mix = run_mixture(&p, &mm, &cfg, None).unwrap();
        let plain = simplex::run(&p, &cfg, None).unwrap();
        let kl = kl_divergence(&plain.estimate, &mix.estimate).unwrap();
        assert!(kl <= 1e-3, "{kl}");
    }

    fn point_masses_on(s: &SupportPoints) -> Vec<DiscreteMeasure> {
        let n = s.len();
        (0..n)
            .map(|k| measure(&(0..n).map(|j| if j == k { 1.0 } else { 0.0 }).collect::<Vec<_>>(), s))
            .collect()
    }

    #[test]
    fn deterministic_replay() {
        let p = grid_problem_with_beta(4, 0.5, 1.0, 6);
        let comps = random_components(p.beta(), 2, 3);
        let mm = build_mixture(&comps, p.beta()).unwrap();
        let cfg = SolverConfig::new(3_000, 2, combined(&p));
        let x = run_mixture(&p, &mm, &cfg, None).unwrap();
        let y = run_mixture(&p, &mm, &cfg, None).unwrap();
        assert_eq!(x.state, y.state);
        assert_eq!(x.metrics.to_csv(), y.metrics.to_csv());
    }

    #[test]
    fn primal_dual_offset() {
        // the mixture dual shares the eps offset of the plain problem
        let p = grid_problem_with_beta(3, 0.5, 1.0, 8);
        let comps = random_components(p.beta(), 2, 12);
        let mm = build_mixture(&comps, p.beta()).unwrap();
        let theta = mixture_brute_force(&p, &mm, 1e-9).unwrap();
        let primal = mixture_primal_objective(&p, &mm, &theta, 1e-13).unwrap();
        let out = run_mixture(&p, &mm, &SolverConfig::new(200_000, 1, combined(&p)), None).unwrap();
        let dual = mixture_eval_f(&p, &mm, &out.state.a_bar(), &out.state.b_bar()).unwrap();
        assert!(primal >= dual + p.epsilon() - 1e-9);
        assert!(primal - dual - p.epsilon() < 1e-3, "{primal} {dual}");
    }
}
