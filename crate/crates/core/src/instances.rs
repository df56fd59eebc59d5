//! Seeded synthetic problems: the index grid with `|i - j|` cost and Gaussian
//! point clouds with a distance cost.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dual::Problem;
use crate::error::{Error, Result};
use crate::measures::{build_cost_matrix, CostFunction, DiscreteMeasure, RegParams, SupportPoints};

/// How the observed measure of a grid problem is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum GridMu {
    Uniform,
    /// Two discretized Gaussian bumps with seeded centers, widths and masses,
    /// plus a small floor so every atom keeps positive mass.
    Bimodal,
    Weights(Vec<f64>),
}

impl GridMu {
    pub fn describe(&self) -> String {
        match self {
            GridMu::Uniform => "uniform".into(),
            GridMu::Bimodal => "bimodal".into(),
            GridMu::Weights(_) => "explicit".into(),
        }
    }
}

pub fn bimodal_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nf = n as f64;
    let c1 = nf * rng.random_range(0.15..0.4);
    let c2 = nf * rng.random_range(0.6..0.85);
    let w1 = nf * rng.random_range(0.04..0.1);
    let w2 = nf * rng.random_range(0.04..0.1);
    let m1 = rng.random_range(0.35..0.65);
    (0..n)
        .map(|i| {
            let x = i as f64;
            let g1 = (-0.5 * ((x - c1) / w1).powi(2)).exp() / w1;
            let g2 = (-0.5 * ((x - c2) / w2).powi(2)).exp() / w2;
            m1 * g1 + (1.0 - m1) * g2 + 1e-3 / nf
        })
        .collect()
}

/// Grid `{0, ..., n-1}` shared by both measures, cost `|i - j|`, uniform prior.
pub fn grid_problem(n: usize, mu: &GridMu, seed: u64, reg: RegParams, log_gap: Option<f64>) -> Result<Problem> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!("grid needs n >= 2, got {n}")));
    }
    let support = SupportPoints::grid_1d(n)?;
    let weights = match mu {
        GridMu::Uniform => vec![1.0; n],
        GridMu::Bimodal => bimodal_weights(n, seed),
        GridMu::Weights(w) => w.clone(),
    };
    let mu = DiscreteMeasure::new(weights, support.clone())?;
    let beta = DiscreteMeasure::uniform(support.clone())?;
    let cost = build_cost_matrix(&support, &support, CostFunction::AbsoluteIndex)?;
    Problem::new(mu, beta, cost, reg, log_gap)
}

pub fn gaussian_points<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Result<SupportPoints> {
    SupportPoints::new(
        (0..count)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
            .collect(),
    )
}

/// Standard Gaussian clouds in `R^d`, uniform weights, Euclidean distance cost.
pub fn gaussian_clouds(
    i_count: usize,
    j_count: usize,
    dim: usize,
    seed: u64,
    reg: RegParams,
    log_gap: Option<f64>,
) -> Result<Problem> {
    if i_count == 0 || j_count == 0 || dim == 0 {
        return Err(Error::InvalidParameter("cloud sizes and dimension must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian_points(i_count, dim, &mut rng)?;
    let y = gaussian_points(j_count, dim, &mut rng)?;
    let cost = build_cost_matrix(&x, &y, CostFunction::Euclidean)?;
    Problem::new(DiscreteMeasure::uniform(x)?, DiscreteMeasure::uniform(y)?, cost, reg, log_gap)
}

/// Gaussian clouds in the plane with random (non-uniform) weights, used for
/// randomized checks. Weights are drawn in `[0.2, 1)` before normalization.
pub fn random_weighted_problem(i_count: usize, j_count: usize, reg: RegParams, seed: u64) -> Result<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian_points(i_count, 2, &mut rng)?;
    let y = gaussian_points(j_count, 2, &mut rng)?;
    let wx: Vec<f64> = (0..i_count).map(|_| rng.random_range(0.2..1.0)).collect();
    let wy: Vec<f64> = (0..j_count).map(|_| rng.random_range(0.2..1.0)).collect();
    let cost = build_cost_matrix(&x, &y, CostFunction::SquaredEuclidean)?;
    Problem::new(DiscreteMeasure::new(wx, x)?, DiscreteMeasure::new(wy, y)?, cost, reg, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg() -> RegParams {
        RegParams::new(0.1, 0.2).unwrap()
    }

    #[test]
    fn grid_two_points() {
        let p = grid_problem(2, &GridMu::Bimodal, 1, reg(), None).unwrap();
        assert_eq!(p.cost().values(), &[0.0, 1.0, 1.0, 0.0]);
        assert!(grid_problem(1, &GridMu::Uniform, 1, reg(), None).is_err());
    }

    #[test]
    fn uniform_grid_has_mu_equal_beta() {
        let p = grid_problem(7, &GridMu::Uniform, 1, reg(), None).unwrap();
        assert_eq!(p.mu().weights(), p.beta().weights());
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = grid_problem(30, &GridMu::Bimodal, 9, reg(), None).unwrap();
        let b = grid_problem(30, &GridMu::Bimodal, 9, reg(), None).unwrap();
        assert_eq!(a.mu(), b.mu());
        let c = grid_problem(30, &GridMu::Bimodal, 10, reg(), None).unwrap();
        assert_ne!(a.mu(), c.mu());

        let a = gaussian_clouds(5, 6, 3, 4, reg(), None).unwrap();
        let b = gaussian_clouds(5, 6, 3, 4, reg(), None).unwrap();
        assert_eq!(a.mu().support(), b.mu().support());
        assert_eq!(a.cost(), b.cost());
    }

    #[test]
    fn clouds_shapes() {
        let p = gaussian_clouds(1, 1, 2, 0, reg(), None).unwrap();
        assert_eq!((p.i_len(), p.j_len()), (1, 1));
        let p = gaussian_clouds(100, 100, 2, 0, reg(), None).unwrap();
        assert!(p.cost().values().iter().all(|&c| c > 0.0));
    }
}
