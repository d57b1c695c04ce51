//! Shared fixtures for the benchmarks.

use dsgd_core::objectives::{generate_logistic_problem, generate_quadratic_problem};
use dsgd_core::{CommMatrix, NoiseModel, ObjectiveSet};

/// Logistic problem on a 4-cluster graph, sized like the figure presets.
pub fn logistic_clusters(m: usize) -> (CommMatrix, ObjectiveSet, NoiseModel) {
    let w = CommMatrix::clusters(m, 4, 1.0 / 3.0, 0.1).expect("valid cluster graph");
    let obj = generate_logistic_problem(m, 50, 2, 2.0, 0.1, 0).expect("valid problem");
    (w, obj, NoiseModel::minibatch(1).expect("valid batch"))
}

pub fn quadratic_ring(m: usize, d: usize) -> (CommMatrix, ObjectiveSet) {
    let w = CommMatrix::ring(m, 1.0 / 3.0).expect("valid ring");
    let obj = generate_quadratic_problem(m, d, 1.0, 0.5, 2.0, false, 0).expect("valid problem");
    (w, obj)
}
