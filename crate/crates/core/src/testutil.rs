use crate::dual::Problem;
use crate::instances::random_weighted_problem;
use crate::measures::{CostMatrix, DiscreteMeasure, RegParams, SupportPoints};

/// Single-atom problem with cost `c`.
pub(crate) fn tiny_problem(c: f64, eps: f64, eta: f64) -> Problem {
    let x = SupportPoints::grid_1d(1).unwrap();
    let m = DiscreteMeasure::uniform(x).unwrap();
    let cost = CostMatrix::new(vec![c], 1, 1).unwrap();
    Problem::new(m.clone(), m, cost, RegParams::new(eps, eta).unwrap(), None).unwrap()
}

pub(crate) fn random_problem(i: usize, j: usize, eps: f64, eta: f64, seed: u64) -> Problem {
    random_weighted_problem(i, j, RegParams::new(eps, eta).unwrap(), seed).unwrap()
}
