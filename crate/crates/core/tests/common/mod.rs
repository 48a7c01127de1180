//! Shared test helpers: a reference eigen-solver and random fixtures.
#![allow(dead_code)]

use glider::expert::{ExpertModel, LoraModule, ToyBaseModel};
use glider::linalg::Mat;
use glider::pool::ExpertPool;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Eigen-decomposition of a symmetric matrix by a dense reference solver.
/// Returns eigenvalues with their eigenvectors, largest first.
pub fn symmetric_eigen(s: &Mat) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = s.rows();
    let dense = nalgebra::DMatrix::from_row_slice(n, n, s.data());
    let eig = nalgebra::SymmetricEigen::new(dense);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    (values, vectors)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Expert with random non-zero `A`, `B`, gates and global vector.
pub fn random_expert(rng: &mut ChaCha8Rng, name: &str, d: usize, m: usize, rank: usize, d_g: usize) -> ExpertModel {
    let modules = (0..m)
        .map(|_| {
            LoraModule::new(random_mat(rng, rank, d), random_mat(rng, d, rank), 1.0)
                .unwrap()
                .with_gate(random_vec(rng, d))
                .unwrap()
        })
        .collect();
    let mut e = ExpertModel::new(name, modules);
    e.set_global_vector(random_vec(rng, d_g)).unwrap();
    e.task_description = format!("random expert {name}");
    e
}

pub fn random_pool(seed: u64, n: usize, d: usize, m: usize) -> ExpertPool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = ToyBaseModel::from_seed(d, m, seed).unwrap();
    let mut pool = ExpertPool::new(base, 8);
    for i in 0..n {
        let rank = rng.random_range(1..=3usize.min(d));
        pool.add_expert(random_expert(&mut rng, &format!("e{i}"), d, m, rank, 8)).unwrap();
    }
    pool
}

pub fn random_tokens(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

/// Sign-insensitive distance between two unit vectors.
pub fn dist_up_to_sign(a: &[f64], b: &[f64]) -> f64 {
    let plus: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let minus: f64 = a.iter().zip(b).map(|(x, y)| (x + y).abs()).fold(0.0, f64::max);
    plus.min(minus)
}
