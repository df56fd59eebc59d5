//! Deterministic reference solvers used to validate the stochastic ones:
//! log-domain Sinkhorn, the primal objective, a Newton maximizer of the dual,
//! brute-force primal minimization, the kernel likelihood, nearest-neighbor
//! projection and a finite-difference curvature check on the slice.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::dual::{log_sum_exp, DualState, Problem};
use crate::error::{Error, Result};
use crate::measures::{build_cost_matrix, kl_divergence, CostFunction, CostMatrix, DiscreteMeasure, SupportPoints};

/// Sinkhorn output. The plan is `pi_ij = mu_i nu_j exp((f_i + g_j - C_ij) / eps)`.
#[derive(Debug, Clone)]
pub struct SinkhornResult {
    /// Row-major transport plan.
    pub plan: Vec<f64>,
    /// `<pi, C> + eps KL(pi, mu x nu)`.
    pub value: f64,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub iterations: usize,
}

/// Log-domain Sinkhorn iterations for `OT_eps(mu, nu)` with the relative entropy
/// taken against `mu x nu`. Stops when the row marginals are within `tol` in `l1`.
pub fn sinkhorn(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cost: &CostMatrix,
    epsilon: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SinkhornResult> {
    let (n, m) = (mu.len(), nu.len());
    if cost.rows() != n || cost.cols() != m {
        return Err(Error::DimensionMismatch(format!(
            "cost is {}x{} but measures have {n} and {m} atoms",
            cost.rows(),
            cost.cols()
        )));
    }
    if !(epsilon > 0.0) || !(tol > 0.0) {
        return Err(Error::InvalidParameter("epsilon and tol must be > 0".into()));
    }
    let log_mu: Vec<f64> = mu.weights().iter().map(|w| w.ln()).collect();
    let log_nu: Vec<f64> = nu.weights().iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut residual = f64::INFINITY;
    for iter in 1..=max_iter {
        for i in 0..n {
            f[i] = -epsilon * log_sum_exp((0..m).map(|j| log_nu[j] + (g[j] - cost.get(i, j)) / epsilon));
        }
        for j in 0..m {
            g[j] = -epsilon * log_sum_exp((0..n).map(|i| log_mu[i] + (f[i] - cost.get(i, j)) / epsilon));
        }
        residual = (0..n)
            .map(|i| {
                let row: f64 = (0..m)
                    .map(|j| (log_mu[i] + log_nu[j] + (f[i] + g[j] - cost.get(i, j)) / epsilon).exp())
                    .sum();
                (row - mu.weights()[i]).abs()
            })
            .sum();
        if residual <= tol {
            let plan = plan_from_potentials(&log_mu, &log_nu, &f, &g, cost, epsilon);
            let value = plan
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(k, &p)| p * (f[k / m] + g[k % m]))
                .sum();
            return Ok(SinkhornResult { plan, value, f, g, iterations: iter });
        }
    }
    Err(Error::MaxIterExceeded { iterations: max_iter, residual })
}

fn plan_from_potentials(
    log_mu: &[f64],
    log_nu: &[f64],
    f: &[f64],
    g: &[f64],
    cost: &CostMatrix,
    epsilon: f64,
) -> Vec<f64> {
    let mut plan = Vec::with_capacity(f.len() * g.len());
    for i in 0..f.len() {
        for j in 0..g.len() {
            plan.push((log_mu[i] + log_nu[j] + (f[i] + g[j] - cost.get(i, j)) / epsilon).exp());
        }
    }
    plan
}

const SINKHORN_MAX_ITER: usize = 1_000_000;

/// `OT_eps(mu, nu) + eta KL(nu, beta)` for `nu` on the prior's support.
pub fn primal_objective(p: &Problem, nu: &DiscreteMeasure, tol: f64) -> Result<f64> {
    let ot = sinkhorn(p.mu(), nu, p.cost(), p.epsilon(), tol, SINKHORN_MAX_ITER)?;
    Ok(ot.value + p.reg().eta() * kl_divergence(nu, p.beta())?)
}

/// Maximizer of the dual objective, pinned to the slice `sum mu a = sum beta b`.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub a_star: Vec<f64>,
    pub b_star: Vec<f64>,
    pub nu_star: DiscreteMeasure,
    pub f_star: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

impl OracleSolution {
    /// `max_j |log(nu*_j / beta_j)|`, the smallest valid logarithmic gap.
    pub fn log_gap(&self, p: &Problem) -> f64 {
        self.nu_star
            .weights()
            .iter()
            .zip(p.beta().weights())
            .map(|(n, b)| (n / b).ln().abs())
            .fold(0.0, f64::max)
    }

    /// `max_ij |a*_i + b*_j - C_ij|`.
    pub fn max_pair_excess(&self, p: &Problem) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, a) in self.a_star.iter().enumerate() {
            for (j, b) in self.b_star.iter().enumerate() {
                worst = worst.max((a + b - p.cost().get(i, j)).abs());
            }
        }
        worst
    }
}

/// Hessian of `-F`, ordered `(a, b)`. Positive semidefinite with null direction `(1, -1)`.
pub fn dual_hessian(p: &Problem, a: &[f64], b: &[f64]) -> Result<DMatrix<f64>> {
    let (ni, nj) = (a.len(), b.len());
    let eps = p.epsilon();
    let gap = p.gap();
    let mu = p.mu().weights();
    let beta = p.beta().weights();
    let mut h = DMatrix::zeros(ni + nj, ni + nj);
    for i in 0..ni {
        for j in 0..nj {
            let w = mu[i] * beta[j] * p.gibbs_factor(a[i], b[j], i, j)? / eps;
            h[(i, i)] += w;
            h[(ni + j, ni + j)] += w;
            h[(i, ni + j)] += w;
            h[(ni + j, i)] += w;
        }
    }
    let nu = p.density_from_dual(b);
    let nu = nu.weights();
    for j in 0..nj {
        for l in 0..nj {
            let kron = if j == l { nu[j] } else { 0.0 };
            h[(ni + j, ni + l)] += (kron - nu[j] * nu[l]) / gap;
        }
    }
    Ok(h)
}

fn grad_vector(p: &Problem, a: &[f64], b: &[f64]) -> Result<DVector<f64>> {
    let (ga, gb) = p.exact_grad(a, b)?;
    Ok(DVector::from_iterator(a.len() + b.len(), ga.into_iter().chain(gb)))
}

/// Damped Newton ascent on `F` from the standard initialization, until the exact
/// gradient norm is at most `tol`. Falls back to a gradient step when the
/// regularized Hessian is not numerically positive definite.
pub fn full_batch_ascent(p: &Problem, tol: f64, max_iter: usize) -> Result<OracleSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be > 0, got {tol}")));
    }
    let (ni, nj) = (p.i_len(), p.j_len());
    let n = ni + nj;
    let ini = p.init_value();
    let mut x = DVector::from_element(n, ini);
    let split = |x: &DVector<f64>| (x.rows(0, ni).iter().copied().collect::<Vec<_>>(), x.rows(ni, nj).iter().copied().collect::<Vec<_>>());
    let eval = |x: &DVector<f64>| {
        let (a, b) = split(x);
        p.eval_f(&a, &b).unwrap_or(f64::NEG_INFINITY)
    };
    let mut null = DVector::from_element(n, 1.0);
    null.rows_mut(ni, nj).fill(-1.0);
    let null = null.normalize();
    let mut value = eval(&x);
    let mut iterations = 0;
    loop {
        let (a, b) = split(&x);
        let grad = grad_vector(p, &a, &b)?;
        let norm = grad.norm();
        if norm <= tol || iterations >= max_iter {
            if norm > tol {
                return Err(Error::MaxIterExceeded { iterations, residual: norm });
            }
            let (a, b) = p.project_to_slice(&a, &b);
            let nu_star = p.density_from_dual(&b);
            let f_star = p.eval_f(&a, &b)?;
            return Ok(OracleSolution { a_star: a, b_star: b, nu_star, f_star, grad_norm: norm, iterations });
        }
        iterations += 1;
        let h = dual_hessian(p, &a, &b)? + &null * null.transpose();
        let direction = match h.cholesky() {
            Some(chol) => chol.solve(&grad),
            None => grad.clone(),
        };
        let slope = grad.dot(&direction);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &x + &direction * step;
            let trial_value = eval(&trial);
            let armijo = trial_value >= value + 1e-4 * step * slope;
            // near the optimum F stalls at rounding level; accept steps that
            // shrink the gradient without a measurable loss in value
            let stalled = trial_value >= value - 1e-14 * value.abs().max(1.0) && {
                let (ta, tb) = split(&trial);
                grad_vector(p, &ta, &tb).map(|g| g.norm() < norm).unwrap_or(false)
            };
            if armijo || stalled {
                x = trial;
                value = trial_value;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::MaxIterExceeded { iterations, residual: norm });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BruteForce {
    /// Simplex lattice followed by local zoom refinement; meant for `J <= 6`.
    Grid,
    /// Damped Newton iterations in softmax coordinates, with gradients taken from
    /// the Sinkhorn potentials and curvature from their finite differences.
    Mirror,
}

/// Minimizes the primal objective over the simplex on the prior's support,
/// independently of the dual machinery.
pub fn brute_force_min(p: &Problem, strategy: BruteForce, tol: f64) -> Result<DiscreteMeasure> {
    let support = p.beta().support().clone();
    if p.j_len() == 1 {
        return DiscreteMeasure::on_support(vec![1.0], support);
    }
    match strategy {
        BruteForce::Grid => grid_min(p, tol),
        BruteForce::Mirror => mirror_min(p, tol),
    }
}

const INNER_TOL: f64 = 1e-13;

fn objective_at(p: &Problem, w: &[f64]) -> f64 {
    DiscreteMeasure::on_support(w.to_vec(), p.beta().support().clone())
        .and_then(|nu| primal_objective(p, &nu, INNER_TOL))
        .unwrap_or(f64::INFINITY)
}

fn grid_min(p: &Problem, tol: f64) -> Result<DiscreteMeasure> {
    let j = p.j_len();
    if j > 6 {
        return Err(Error::InvalidParameter(format!("grid search supports J <= 6, got {j}")));
    }
    let best = simplex_grid_argmin(j, |w| objective_at(p, w), tol);
    DiscreteMeasure::on_support(best, p.beta().support().clone())
}

/// Minimizes `objective` over the probability simplex in `R^j`: a lattice with
/// spacing `1/16`, then repeated local searches with halved spacing until it
/// drops below `tol`. Reliable for convex objectives and small `j`.
pub fn simplex_grid_argmin(j: usize, objective: impl Fn(&[f64]) -> f64, tol: f64) -> Vec<f64> {
    if j <= 1 {
        return vec![1.0; j];
    }
    let free = j - 1;
    let divisions: i64 = 16;
    let mut best = vec![1.0 / j as f64; j];
    let mut best_value = objective(&best);
    let mut counts = vec![0i64; free];
    'lattice: loop {
        let used: i64 = counts.iter().sum();
        if used <= divisions {
            let mut w: Vec<f64> = counts.iter().map(|&c| c as f64 / divisions as f64).collect();
            w.push((divisions - used) as f64 / divisions as f64);
            let v = objective(&w);
            if v < best_value {
                best_value = v;
                best = w;
            }
        }
        for k in 0..free {
            counts[k] += 1;
            if counts[k] <= divisions {
                continue 'lattice;
            }
            counts[k] = 0;
        }
        break;
    }
    let mut h = 1.0 / divisions as f64;
    while h > tol {
        h /= 2.0;
        let center = best.clone();
        let mut offsets = vec![-2i64; free];
        'local: loop {
            let mut w: Vec<f64> = (0..free).map(|k| center[k] + offsets[k] as f64 * h).collect();
            let last = 1.0 - w.iter().sum::<f64>();
            if w.iter().all(|&v| v >= 0.0) && last >= -1e-15 {
                w.push(last.max(0.0));
                let v = objective(&w);
                if v < best_value {
                    best_value = v;
                    best = w;
                }
            }
            for k in 0..free {
                offsets[k] += 1;
                if offsets[k] <= 2 {
                    continue 'local;
                }
                offsets[k] = -2;
            }
            break;
        }
    }
    best
}

fn mirror_min(p: &Problem, tol: f64) -> Result<DiscreteMeasure> {
    let eta = p.reg().eta();
    let nj = p.j_len();
    let free = nj - 1;
    let log_beta: Vec<f64> = p.beta().weights().iter().map(|w| w.ln()).collect();
    let support = p.beta().support().clone();
    // nu = softmax(l, 0); the gradient in nu is g_j + eta log(nu_j / beta_j), and
    // in the free logits it becomes nu_k (G_k - <nu, G>)
    let evaluate = |l: &DVector<f64>| -> Result<(DiscreteMeasure, f64, DVector<f64>)> {
        let logits: Vec<f64> = l.iter().copied().chain(std::iter::once(0.0)).collect();
        let nu = DiscreteMeasure::on_support(crate::dual::softmax(&logits), support.clone())?;
        let ot = sinkhorn(p.mu(), &nu, p.cost(), p.epsilon(), INNER_TOL, SINKHORN_MAX_ITER)?;
        let value = ot.value + eta * kl_divergence(&nu, p.beta())?;
        let w = nu.weights();
        let grad: Vec<f64> = (0..nj).map(|j| ot.g[j] + eta * (w[j].ln() - log_beta[j])).collect();
        let mean: f64 = w.iter().zip(&grad).map(|(a, b)| a * b).sum();
        let reduced = DVector::from_iterator(free, (0..free).map(|k| w[k] * (grad[k] - mean)));
        Ok((nu, value, reduced))
    };
    let mut l = DVector::from_iterator(free, (0..free).map(|k| log_beta[k] - log_beta[free]));
    let (mut nu, mut value, mut grad) = evaluate(&l)?;
    let max_iter = 500;
    for _ in 0..max_iter {
        if grad.norm() <= tol {
            return Ok(nu);
        }
        let mut hess = DMatrix::zeros(free, free);
        for k in 0..free {
            let h = 1e-5;
            let mut plus = l.clone();
            let mut minus = l.clone();
            plus[k] += h;
            minus[k] -= h;
            hess.set_column(k, &((evaluate(&plus)?.2 - evaluate(&minus)?.2) / (2.0 * h)));
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        let direction = match hess.cholesky() {
            Some(chol) => chol.solve(&grad),
            None => grad.clone(),
        };
        let slope = grad.dot(&direction);
        let mut step = 1.0;
        loop {
            let trial = &l - &direction * step;
            let (t_nu, t_value, t_grad) = evaluate(&trial)?;
            let armijo = t_value <= value - 1e-4 * step * slope;
            let stalled = t_value <= value + 1e-14 * value.abs().max(1.0) && t_grad.norm() < grad.norm();
            if armijo || stalled {
                l = trial;
                (nu, value, grad) = (t_nu, t_value, t_grad);
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                return Err(Error::MaxIterExceeded { iterations: max_iter, residual: grad.norm() });
            }
        }
    }
    Err(Error::MaxIterExceeded { iterations: max_iter, residual: grad.norm() })
}

/// Kernel log-likelihood `sum_i mu_i log sum_j kappa_ij nu_j` with
/// `kappa_ij = exp(-C_ij / eps) / sum_k exp(-C_kj / eps)`.
pub fn mle_objective(p: &Problem, nu: &DiscreteMeasure) -> f64 {
    let eps = p.epsilon();
    let cost = p.cost();
    let (ni, nj) = (p.i_len(), p.j_len());
    let log_norm: Vec<f64> = (0..nj).map(|j| log_sum_exp((0..ni).map(|k| -cost.get(k, j) / eps))).collect();
    p.mu()
        .weights()
        .iter()
        .enumerate()
        .map(|(i, mu_i)| {
            let inner = log_sum_exp(
                (0..nj)
                    .filter(|&j| nu.weights()[j] > 0.0)
                    .map(|j| -cost.get(i, j) / eps - log_norm[j] + nu.weights()[j].ln()),
            );
            mu_i * inner
        })
        .sum()
}

/// Pushes each atom of `mu` to its nearest point of `y` (lowest index on ties).
pub fn nearest_neighbor_projection(
    x: &SupportPoints,
    y: &SupportPoints,
    mu: &DiscreteMeasure,
    c: CostFunction,
) -> Result<DiscreteMeasure> {
    if mu.len() != x.len() {
        return Err(Error::LengthMismatch { expected: x.len(), found: mu.len() });
    }
    let cost = build_cost_matrix(x, y, c)?;
    let mut weights = vec![0.0; y.len()];
    for (i, w) in mu.weights().iter().enumerate() {
        let row = cost.row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v < row[best] {
                best = j;
            }
        }
        weights[best] += w;
    }
    DiscreteMeasure::on_support(weights, y.clone())
}

/// Smallest eigenvalue of the Hessian of `-F` at the state's current iterate,
/// restricted to the slice's tangent space.
pub fn hessian_min_eigenvalue(p: &Problem, st: &DualState) -> f64 {
    slice_hessian_min_eigenvalue(p, st.a(), st.b())
}

/// [`hessian_min_eigenvalue`] at an explicit point. The Hessian comes from central
/// differences of the exact gradient.
pub fn slice_hessian_min_eigenvalue(p: &Problem, a: &[f64], b: &[f64]) -> f64 {
    let (ni, nj) = (a.len(), b.len());
    let n = ni + nj;
    let point: Vec<f64> = a.iter().chain(b).copied().collect();
    let grad_at = |x: &[f64]| grad_vector(p, &x[..ni], &x[ni..]).unwrap_or_else(|_| DVector::from_element(n, f64::NAN));
    let mut h = DMatrix::zeros(n, n);
    for k in 0..n {
        let step = 1e-5 * point[k].abs().max(1.0);
        let mut plus = point.clone();
        let mut minus = point.clone();
        plus[k] += step;
        minus[k] -= step;
        let column = (grad_at(&minus) - grad_at(&plus)) / (2.0 * step);
        h.set_column(k, &column);
    }
    let h = (&h + h.transpose()) * 0.5;

    let mut normal = DVector::zeros(n);
    normal.rows_mut(0, ni).copy_from(&DVector::from_column_slice(p.mu().weights()));
    normal.rows_mut(ni, nj).copy_from(&(-DVector::from_column_slice(p.beta().weights())));
    let normal = normal.normalize();
    let projector = DMatrix::identity(n, n) - &normal * normal.transpose();
    let eig = SymmetricEigen::new(projector);
    let columns: Vec<DVector<f64>> = (0..n)
        .filter(|&k| eig.eigenvalues[k] > 0.5)
        .map(|k| eig.eigenvectors.column(k).into_owned())
        .collect();
    if columns.is_empty() {
        return f64::INFINITY;
    }
    let basis = DMatrix::from_columns(&columns);
    let reduced = basis.transpose() * h * &basis;
    SymmetricEigen::new(reduced).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::RegParams;
    use crate::testutil::{random_problem, tiny_problem};

    fn two_point_problem(eps: f64, eta: f64) -> Problem {
        let s = SupportPoints::grid_1d(2).unwrap();
        let m = DiscreteMeasure::uniform(s.clone()).unwrap();
        let c = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        Problem::new(m.clone(), m, c, RegParams::new(eps, eta).unwrap(), None).unwrap()
    }

    #[test]
    fn sinkhorn_point_mass() {
        let p = tiny_problem(0.0, 1.0, 2.0);
        let r = sinkhorn(p.mu(), p.beta(), p.cost(), 1.0, 1e-12, 100).unwrap();
        assert!((r.plan[0] - 1.0).abs() < 1e-15);
        assert!(r.value.abs() < 1e-15);
    }

    #[test]
    fn sinkhorn_large_eps_is_product() {
        let p = two_point_problem(0.5, 1.0);
        let r = sinkhorn(p.mu(), p.beta(), p.cost(), 1e3, 1e-12, 1000).unwrap();
        for v in &r.plan {
            assert!((v - 0.25).abs() < 1e-3);
        }
        assert!((r.value - 0.5).abs() < 1e-3);
    }

    #[test]
    fn sinkhorn_marginals() {
        let p = random_problem(4, 6, 0.2, 0.5, 3);
        let r = sinkhorn(p.mu(), p.beta(), p.cost(), 0.2, 1e-12, 100_000).unwrap();
        for i in 0..4 {
            let row: f64 = r.plan[i * 6..(i + 1) * 6].iter().sum();
            assert!((row - p.mu().weights()[i]).abs() < 1e-12);
        }
        for j in 0..6 {
            let col: f64 = (0..4).map(|i| r.plan[i * 6 + j]).sum();
            assert!((col - p.beta().weights()[j]).abs() < 1e-12);
        }
    }

    /// Newton's method on the free entries `pi_ij`, `i < I-1`, `j < J-1`, of a plan
    /// whose last row and column are fixed by the marginals.
    fn direct_primal(mu: &[f64], nu: &[f64], cost: &CostMatrix, eps: f64) -> f64 {
        let (n, m) = (mu.len(), nu.len());
        let (fi, fj) = (n - 1, m - 1);
        let dim = fi * fj;
        let full = |x: &DVector<f64>| {
            let mut pi = vec![0.0; n * m];
            for i in 0..fi {
                for j in 0..fj {
                    pi[i * m + j] = x[i * fj + j];
                }
            }
            for i in 0..fi {
                pi[i * m + fj] = mu[i] - (0..fj).map(|j| pi[i * m + j]).sum::<f64>();
            }
            for j in 0..m {
                pi[fi * m + j] = nu[j] - (0..fi).map(|i| pi[i * m + j]).sum::<f64>();
            }
            pi
        };
        let value = |pi: &[f64]| -> f64 {
            if pi.iter().any(|&v| v <= 0.0) {
                return f64::INFINITY;
            }
            (0..n * m)
                .map(|k| {
                    let (i, j) = (k / m, k % m);
                    pi[k] * cost.get(i, j) + eps * pi[k] * (pi[k] / (mu[i] * nu[j])).ln()
                })
                .sum()
        };
        let slope = |pi: &[f64], i: usize, j: usize| cost.get(i, j) + eps * ((pi[i * m + j] / (mu[i] * nu[j])).ln() + 1.0);
        let mut x = DVector::from_iterator(dim, (0..dim).map(|k| mu[k / fj] * nu[k % fj]));
        for _ in 0..200 {
            let pi = full(&x);
            let mut grad = DVector::zeros(dim);
            let mut hess = DMatrix::zeros(dim, dim);
            for i in 0..fi {
                for j in 0..fj {
                    let r = i * fj + j;
                    grad[r] = slope(&pi, i, j) - slope(&pi, i, fj) - slope(&pi, fi, j) + slope(&pi, fi, fj);
                    for k in 0..fi {
                        for l in 0..fj {
                            let mut v = eps / pi[fi * m + fj];
                            if i == k {
                                v += eps / pi[i * m + fj];
                            }
                            if j == l {
                                v += eps / pi[fi * m + j];
                            }
                            if i == k && j == l {
                                v += eps / pi[i * m + j];
                            }
                            hess[(r, k * fj + l)] = v;
                        }
                    }
                }
            }
            if grad.norm() < 1e-14 {
                break;
            }
            let d = hess.cholesky().unwrap().solve(&grad);
            let current = value(&pi);
            let mut t = 1.0;
            while value(&full(&(&x - &d * t))) > current && t > 1e-12 {
                t *= 0.5;
            }
            x -= d * t;
        }
        value(&full(&x))
    }

    #[test]
    fn sinkhorn_matches_direct_primal() {
        for seed in 0..3 {
            let p = random_problem(4, 4, 0.3, 0.6, seed);
            let r = sinkhorn(p.mu(), p.beta(), p.cost(), 0.3, 1e-13, 100_000).unwrap();
            let direct = direct_primal(p.mu().weights(), p.beta().weights(), p.cost(), 0.3);
            assert!((r.value - direct).abs() < 1e-6, "{} vs {direct}", r.value);
        }
    }

    #[test]
    fn primal_examples() {
        let p = tiny_problem(0.0, 1.0, 2.0);
        assert!(primal_objective(&p, p.beta(), 1e-12).unwrap().abs() < 1e-15);
        let s = SupportPoints::grid_1d(3).unwrap();
        let m = DiscreteMeasure::uniform(s.clone()).unwrap();
        let c = build_cost_matrix(&s, &s, CostFunction::AbsoluteIndex).unwrap();
        let p = Problem::new(m.clone(), m.clone(), c, RegParams::new(0.01, 0.02).unwrap(), None).unwrap();
        let v = primal_objective(&p, &m, 1e-12).unwrap();
        let ot = sinkhorn(&m, &m, p.cost(), 0.01, 1e-12, 10_000).unwrap();
        assert_eq!(v, ot.value);
        // the plan is nearly diagonal, so only the entropic term remains
        assert!((v - 0.01 * 3f64.ln()).abs() < 1e-3, "{v}");
    }

    #[test]
    fn newton_one_by_one() {
        let p = tiny_problem(0.0, 1.0, 2.0);
        let s = full_batch_ascent(&p, 1e-12, 100).unwrap();
        assert!(s.a_star[0].abs() < 1e-12 && s.b_star[0].abs() < 1e-12);
        assert!((s.f_star + 1.0).abs() < 1e-12);
    }

    #[test]
    fn newton_optimality_conditions() {
        for seed in 0..5 {
            let p = random_problem(3, 3, 0.4, 0.9, seed);
            let s = full_batch_ascent(&p, 1e-10, 500).unwrap();
            assert!(s.grad_norm <= 1e-10);
            let plan = p.plan_matrix(&s.a_star, &s.b_star).unwrap();
            assert!((plan.iter().sum::<f64>() - 1.0).abs() < 1e-8);
            for i in 0..3 {
                assert!((plan[i * 3..i * 3 + 3].iter().sum::<f64>() - p.mu().weights()[i]).abs() < 1e-8);
            }
            let sa: f64 = p.mu().weights().iter().zip(&s.a_star).map(|(w, v)| w * v).sum();
            let sb: f64 = p.beta().weights().iter().zip(&s.b_star).map(|(w, v)| w * v).sum();
            assert!((sa - sb).abs() < 1e-12);
            let bound = p.epsilon() * s.log_gap(&p) + 2.0 * p.cost().range();
            assert!(s.max_pair_excess(&p) <= bound);
        }
    }

    #[test]
    fn primal_equals_dual_plus_epsilon() {
        for seed in 0..3 {
            let p = random_problem(5, 5, 0.3, 0.7, seed);
            let s = full_batch_ascent(&p, 1e-10, 500).unwrap();
            let primal = primal_objective(&p, &s.nu_star, 1e-12).unwrap();
            assert!((primal - s.f_star - p.epsilon()).abs() < 1e-6, "{primal} {}", s.f_star);
        }
    }

    #[test]
    fn brute_force_point_and_symmetry() {
        let p = tiny_problem(0.0, 1.0, 2.0);
        assert_eq!(brute_force_min(&p, BruteForce::Grid, 1e-6).unwrap().weights(), &[1.0]);
        let p = two_point_problem(0.5, 1.0);
        for strategy in [BruteForce::Grid, BruteForce::Mirror] {
            let nu = brute_force_min(&p, strategy, 1e-9).unwrap();
            assert!((nu.weights()[0] - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn brute_force_agrees_with_newton() {
        for seed in 0..2 {
            let p = random_problem(3, 3, 0.3, 0.6, seed);
            let s = full_batch_ascent(&p, 1e-10, 500).unwrap();
            for strategy in [BruteForce::Mirror, BruteForce::Grid] {
                let nu = brute_force_min(&p, strategy, 1e-6).unwrap();
                let kl = kl_divergence(&s.nu_star, &nu).unwrap();
                assert!(kl <= 1e-6, "{strategy:?} seed {seed}: {kl}");
            }
        }
    }

    #[test]
    fn mle_single_atom() {
        let p = tiny_problem(0.3, 1.0, 2.0);
        assert_eq!(mle_objective(&p, p.beta()), 0.0);
    }

    #[test]
    fn nearest_neighbor_examples() {
        let y = SupportPoints::new(vec![vec![0.0], vec![1.0]]).unwrap();
        let x = SupportPoints::new(vec![vec![0.4]]).unwrap();
        let mu = DiscreteMeasure::uniform(x.clone()).unwrap();
        let nu = nearest_neighbor_projection(&x, &y, &mu, CostFunction::Euclidean).unwrap();
        assert_eq!(nu.weights(), &[1.0, 0.0]);

        let x = SupportPoints::new(vec![vec![0.5]]).unwrap();
        let nu = nearest_neighbor_projection(&x, &y, &mu, CostFunction::Euclidean).unwrap();
        assert_eq!(nu.weights(), &[1.0, 0.0]);

        let x = SupportPoints::new(vec![vec![0.0], vec![2.0], vec![5.0]]).unwrap();
        let mu = DiscreteMeasure::new(vec![0.2, 0.3, 0.5], x.clone()).unwrap();
        let nu = nearest_neighbor_projection(&x, &x, &mu, CostFunction::SquaredEuclidean).unwrap();
        assert_eq!(nu.weights(), mu.weights());
    }

    #[test]
    fn hessian_one_by_one() {
        let p = tiny_problem(0.0, 1.0, 2.0);
        let v = slice_hessian_min_eigenvalue(&p, &[0.0], &[0.0]);
        assert!((v - 2.0).abs() < 1e-6, "{v}");
        let v = slice_hessian_min_eigenvalue(&p, &[0.7], &[-0.7]);
        assert!((v - 2.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn hessian_bounds_and_invariance() {
        let p = random_problem(3, 3, 0.5, 1.0, 4);
        let s = full_batch_ascent(&p, 1e-10, 500).unwrap();
        let q = p.with_log_gap(s.log_gap(&p)).unwrap();
        let v = slice_hessian_min_eigenvalue(&p, &s.a_star, &s.b_star);
        assert!(v >= q.constants().lambda - 1e-4);
        let shifted_a: Vec<f64> = s.a_star.iter().map(|x| x + 0.3).collect();
        let shifted_b: Vec<f64> = s.b_star.iter().map(|x| x - 0.3).collect();
        let w = slice_hessian_min_eigenvalue(&p, &shifted_a, &shifted_b);
        assert!((v - w).abs() < 1e-6);
        let analytic = dual_hessian(&p, &s.a_star, &s.b_star).unwrap();
        let st = DualState::new(s.a_star.clone(), s.b_star.clone(), p.beta().weights(), p.gap());
        assert_eq!(hessian_min_eigenvalue(&p, &st), v);
        let mut null = DVector::from_element(6, 1.0);
        null.rows_mut(3, 3).fill(-1.0);
        assert!((analytic * null).norm() < 1e-12);
    }

    fn ot_only(mu: &DiscreteMeasure, support: &SupportPoints, cost: &CostMatrix, eps: f64, w: &[f64]) -> f64 {
        let nu = DiscreteMeasure::on_support(w.to_vec(), support.clone()).unwrap();
        sinkhorn(mu, &nu, cost, eps, 1e-13, 1_000_000).unwrap().value
    }

    fn kernel_instance(points: Vec<Vec<f64>>, mu: Vec<f64>, eps: f64) -> Problem {
        let s = SupportPoints::new(points).unwrap();
        let mu = DiscreteMeasure::new(mu, s.clone()).unwrap();
        let c = build_cost_matrix(&s, &s, CostFunction::SquaredEuclidean).unwrap();
        Problem::new(mu, DiscreteMeasure::uniform(s).unwrap(), c, RegParams::new(eps, 2.0 * eps).unwrap(), None).unwrap()
    }

    #[test]
    fn likelihood_shares_optimum_with_entropic_ot() {
        // equal column normalizers: the vertices of an equilateral triangle
        let h = 3f64.sqrt() / 2.0;
        let p = kernel_instance(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, h]], vec![0.5, 0.3, 0.2], 0.5);
        let support = p.beta().support().clone();
        let on = |w: &[f64]| DiscreteMeasure::on_support(w.to_vec(), support.clone()).unwrap();
        let mle_best = simplex_grid_argmin(3, |w| -mle_objective(&p, &on(w)), 1e-7);
        let ot_best = simplex_grid_argmin(3, |w| ot_only(p.mu(), &support, p.cost(), 0.5, w), 1e-7);
        for (x, y) in mle_best.iter().zip(&ot_best) {
            assert!((x - y).abs() < 1e-3, "{mle_best:?} vs {ot_best:?}");
        }
        // same optimum, different values
        let scaled_mle = -0.5 * mle_objective(&p, &on(&ot_best));
        let ot = ot_only(p.mu(), &support, p.cost(), 0.5, &ot_best);
        assert!((scaled_mle - ot).abs() > 1e-3);
    }

    #[test]
    fn entropic_ot_optimum_maximizes_unnormalized_kernel_likelihood() {
        let eps = 0.5;
        let p = kernel_instance(vec![vec![0.0], vec![0.7], vec![1.5]], vec![0.2, 0.5, 0.3], eps);
        let support = p.beta().support().clone();
        let unnormalized = |w: &[f64]| -> f64 {
            (0..3)
                .map(|i| {
                    let inner: f64 = (0..3).map(|j| (-p.cost().get(i, j) / eps).exp() * w[j]).sum();
                    p.mu().weights()[i] * inner.ln()
                })
                .sum()
        };
        let lik_best = simplex_grid_argmin(3, |w| -unnormalized(w), 1e-7);
        let ot_best = simplex_grid_argmin(3, |w| ot_only(p.mu(), &support, p.cost(), eps, w), 1e-7);
        for (x, y) in lik_best.iter().zip(&ot_best) {
            assert!((x - y).abs() < 1e-3, "{lik_best:?} vs {ot_best:?}");
        }
        // unequal normalizers move the column-normalized likelihood's optimum
        let on = |w: &[f64]| DiscreteMeasure::on_support(w.to_vec(), support.clone()).unwrap();
        let mle_best = simplex_grid_argmin(3, |w| -mle_objective(&p, &on(w)), 1e-7);
        assert!(mle_best.iter().zip(&ot_best).any(|(x, y)| (x - y).abs() > 1e-2));
    }
}
