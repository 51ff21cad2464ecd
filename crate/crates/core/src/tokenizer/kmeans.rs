//! Lloyd's K-means with k-means++ seeding.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::rng::PortableRng;

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    /// Quantization MSE after each assignment step; entry 0 is the seeding.
    pub mse_history: Vec<f64>,
}

impl KMeansFit {
    pub fn final_mse(&self) -> f64 {
        *self.mse_history.last().expect("at least one assignment")
    }
}

pub(crate) fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; ties go to the lower index.
pub fn nearest(x: ArrayView1<f64>, centroids: ArrayView2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.outer_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all(data: ArrayView2<f64>, centroids: ArrayView2<f64>) -> Vec<(usize, f64)> {
    (0..data.nrows())
        .into_par_iter()
        .map(|i| nearest(data.row(i), centroids))
        .collect()
}

fn mean_sq(assigned: &[(usize, f64)]) -> f64 {
    assigned.iter().map(|a| a.1).sum::<f64>() / assigned.len().max(1) as f64
}

fn plus_plus_init(data: ArrayView2<f64>, k: usize, rng: &mut PortableRng) -> Array2<f64> {
    let n = data.nrows();
    let mut centroids = Array2::zeros((k, data.ncols()));
    let first = rng.below(n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), data.row(pick)));
        }
    }
    centroids
}

/// Runs `iters` Lloyd updates. An empty cluster is re-seeded at the point
/// currently farthest from its assigned centroid, which keeps all `k`
/// centroids in use and the objective non-increasing.
pub fn fit(data: ArrayView2<f64>, k: usize, iters: usize, rng: &mut PortableRng) -> KMeansFit {
    assert!(data.nrows() > 0, "k-means on empty data");
    assert!(k > 0);
    let dim = data.ncols();
    let mut centroids = plus_plus_init(data, k, rng);
    let mut assigned = assign_all(data, centroids.view());
    let mut mse_history = vec![mean_sq(&assigned)];

    for _ in 0..iters {
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assigned.iter().enumerate() {
            sums.row_mut(c).scaled_add(1.0, &data.row(i));
            counts[c] += 1;
        }
        let mut taken = vec![false; data.nrows()];
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                let mean = &sums.row(c) / count as f64;
                centroids.row_mut(c).assign(&mean);
            } else {
                let far = assigned
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken[*i])
                    .fold(None::<(usize, f64)>, |best, (i, &(_, d))| match best {
                        Some((_, bd)) if bd >= d => best,
                        _ => Some((i, d)),
                    });
                if let Some((i, _)) = far {
                    taken[i] = true;
                    assigned[i].1 = 0.0;
                    centroids.row_mut(c).assign(&data.row(i));
                }
            }
        }
        assigned = assign_all(data, centroids.view());
        mse_history.push(mean_sq(&assigned));
    }

    KMeansFit {
        centroids,
        assignments: assigned.into_iter().map(|a| a.0).collect(),
        mse_history,
    }
}

/// Squared-norm sum of rows, used by tests as an independent objective.
pub fn objective(data: ArrayView2<f64>, centroids: ArrayView2<f64>, assignments: &[usize]) -> f64 {
    data.axis_iter(Axis(0))
        .zip(assignments)
        .map(|(x, &c)| sq_dist(x, centroids.row(c)))
        .sum::<f64>()
        / data.nrows() as f64
}
