//! k-means over embedding vectors: k-means++ seeding, Lloyd iterations,
//! best of several restarts by inertia.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::masks::{MaskSet, MaskStage};

pub const DEFAULT_RESTARTS: usize = 10;
pub const MAX_LLOYD_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub labels: Vec<usize>,
    /// `k x E`.
    pub centroids: Array2<f64>,
    /// Sum of squared distances of every point to its centroid.
    pub inertia: f64,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Row `i` of a standard-layout view.
fn row<'a>(points: &'a ArrayView2<f64>, i: usize) -> &'a [f64] {
    let dim = points.ncols();
    &points.as_slice().expect("points are contiguous")[i * dim..(i + 1) * dim]
}

fn plus_plus_seeds(points: &ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let dim = points.ncols();
    let mut centroids = Array2::zeros((k, dim));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(points, i), row(points, first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random_range(0.0..total);
            let mut acc = 0.0;
            d2.iter()
                .position(|&d| {
                    acc += d;
                    acc > target
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(points, i), row(points, pick)));
        }
    }
    centroids
}

/// Assigns every point to its nearest centroid (ties to the lowest index).
/// Returns the per-point squared distances.
fn assign(points: &ArrayView2<f64>, centroids: &Array2<f64>, labels: &mut [usize]) -> Vec<f64> {
    let cs = centroids.as_slice().expect("centroids are contiguous");
    let dim = centroids.ncols();
    labels
        .iter_mut()
        .enumerate()
        .map(|(i, label)| {
            let p = row(points, i);
            let (best, dist) = cs
                .chunks_exact(dim)
                .map(|c| sq_dist(p, c))
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (j, d)| if d < acc.1 { (j, d) } else { acc });
            *label = best;
            dist
        })
        .collect()
}

fn lloyd(points: &ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> KmeansResult {
    let n = points.nrows();
    let dim = points.ncols();
    let mut centroids = plus_plus_seeds(points, k, rng);
    let mut labels = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut prev_labels = Vec::new();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut dist = assign(points, &centroids, &mut labels);
        // Empty clusters take over the point farthest from its centroid.
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
                if let Some(far) = far {
                    counts[labels[far]] -= 1;
                    labels[far] = c;
                    counts[c] = 1;
                    dist[far] = 0.0;
                    centroids.row_mut(c).assign(&points.row(far));
                }
            }
        }
        history.push(dist.iter().sum());
        if labels == prev_labels {
            break;
        }
        let mut sums = Array2::<f64>::zeros((k, dim));
        for (i, &l) in labels.iter().enumerate() {
            let mut s = sums.row_mut(l);
            s += &points.row(i);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centroids.row_mut(c).assign(&mean);
            }
        }
        prev_labels.clone_from(&labels);
    }
    let inertia = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(row(points, i), centroids.row(l).as_slice().expect("centroids are contiguous")))
        .sum();
    KmeansResult {
        labels,
        centroids,
        inertia,
        inertia_history: history,
    }
}

/// Clusters the rows of `points` into `k` groups.
pub fn kmeans(points: ArrayView2<f64>, k: usize, restarts: usize, seed: u64) -> Result<KmeansResult> {
    let n = points.nrows();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!("cannot form {k} clusters from {n} points")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("points must be finite".into()));
    }
    let points = points.as_standard_layout();
    let view = points.view();
    let results: Vec<KmeansResult> = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            lloyd(&view, k, &mut rng)
        })
        .collect();
    let best = results
        .into_iter()
        .reduce(|best, r| if r.inertia < best.inertia { r } else { best })
        .expect("at least one restart");
    Ok(best)
}

/// Index of the closest centroid (first on ties) for every row of `points`.
pub fn nearest_centroid(points: ArrayView2<f64>, centroids: ArrayView2<f64>) -> Result<Vec<usize>> {
    if points.ncols() != centroids.ncols() || centroids.nrows() == 0 {
        return Err(Error::Shape(format!(
            "{} centroids of dimension {} for points of dimension {}",
            centroids.nrows(),
            centroids.ncols(),
            points.ncols()
        )));
    }
    Ok(points
        .outer_iter()
        .map(|p| {
            let d: Vec<f64> = centroids
                .outer_iter()
                .map(|c| p.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum())
                .collect();
            (0..d.len()).fold(0, |best, j| if d[j] < d[best] { j } else { best })
        })
        .collect())
}

/// One-hot masks from labels stacked t-major, f-minor.
pub fn labels_to_masks(labels: &[usize], frames: usize, bins: usize, k: usize) -> Result<MaskSet> {
    MaskSet::one_hot(labels, k, frames, bins, MaskStage::Final)
}

#[cfg(test)]
mod tests {
    use super::*;
    use itertools::Itertools;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = array![[0.0, 1.0], [2.0, 3.0], [4.0, -1.0]];
        let r = kmeans(pts.view(), 1, 3, 0).unwrap();
        assert!(r.labels.iter().all(|&l| l == 0));
        assert!((r.centroids[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((r.centroids[[0, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn four_points_match_exhaustive_oracle() {
        let pts = array![[0.0], [0.1], [10.0], [10.1]];
        // Exhaustive search over all 2^4 labelings with both clusters non-empty.
        let best = (0..4)
            .map(|_| 0..2usize)
            .multi_cartesian_product()
            .filter(|ls| ls.contains(&0) && ls.contains(&1))
            .map(|ls| {
                (0..2)
                    .map(|c| {
                        let members: Vec<f64> = ls.iter().zip(pts.iter()).filter(|(l, _)| **l == c).map(|(_, &p)| p).collect();
                        let m = members.iter().sum::<f64>() / members.len() as f64;
                        members.iter().map(|p| (p - m) * (p - m)).sum::<f64>()
                    })
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        assert!((best - 0.01).abs() < 1e-12);
        let r = kmeans(pts.view(), 2, 10, 7).unwrap();
        assert!((r.inertia - best).abs() < 1e-12);
        assert_eq!(r.labels[0], r.labels[1]);
        assert_eq!(r.labels[2], r.labels[3]);
        assert_ne!(r.labels[0], r.labels[2]);
    }

    #[test]
    fn separated_clouds_always_split() {
        for trial in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let mut data = Vec::new();
            for i in 0..60 {
                let center = if i < 30 { 0.0 } else { 10.0 };
                for _ in 0..3 {
                    let u: f64 = rng.random_range(-0.5..0.5);
                    data.push(center + u);
                }
            }
            let pts = Array2::from_shape_vec((60, 3), data).unwrap();
            let r = kmeans(pts.view(), 2, 10, trial).unwrap();
            assert!(r.labels[..30].iter().all(|&l| l == r.labels[0]));
            assert!(r.labels[30..].iter().all(|&l| l == r.labels[30]));
            assert_ne!(r.labels[0], r.labels[30]);
        }
    }

    #[test]
    fn inertia_never_increases_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..500 * 4).map(|_| StandardNormal.sample(&mut rng)).collect();
        let pts = Array2::from_shape_vec((500, 4), data).unwrap();
        let a = kmeans(pts.view(), 5, 4, 9).unwrap();
        for w in a.inertia_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        assert_eq!(a, kmeans(pts.view(), 5, 4, 9).unwrap());
        let direct: f64 = (0..500)
            .map(|i| {
                let c = a.centroids.row(a.labels[i]);
                pts.row(i).iter().zip(c.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
            })
            .sum();
        assert!((direct - a.inertia).abs() < 1e-9);
    }

    #[test]
    fn duplicate_points_leave_no_cluster_empty() {
        let pts = Array2::from_shape_vec((5, 1), vec![1.0, 1.0, 1.0, 1.0, 2.0]).unwrap();
        let r = kmeans(pts.view(), 3, 2, 0).unwrap();
        for c in 0..3 {
            assert!(r.labels.contains(&c));
        }
    }

    #[test]
    fn too_few_points() {
        let pts = array![[1.0], [2.0]];
        assert!(kmeans(pts.view(), 3, 1, 0).is_err());
    }

    #[test]
    fn nearest_centroid_prefers_the_first_on_ties() {
        let pts = array![[0.0, 0.0], [1.0, 0.0], [4.0, 1.0], [0.5, 0.0]];
        let c = array![[0.0, 0.0], [1.0, 0.0], [4.0, 0.0]];
        assert_eq!(nearest_centroid(pts.view(), c.view()).unwrap(), vec![0, 1, 2, 0]);
        assert!(nearest_centroid(pts.view(), array![[0.0]].view()).is_err());
        assert!(nearest_centroid(pts.view(), Array2::zeros((0, 2)).view()).is_err());
    }

    #[test]
    fn label_masks() {
        let m = labels_to_masks(&[0; 6], 2, 3, 2).unwrap();
        assert!(m.class_mask(0).iter().all(|&v| v == 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<usize> = (0..12).map(|_| rng.random_range(0..3)).collect();
        let m = labels_to_masks(&labels, 3, 4, 3).unwrap();
        assert!(m.simplex_defect() == 0.0);
        assert_eq!(m.argmax_labels(), labels);
        assert!(labels_to_masks(&[3], 1, 1, 3).is_err());
    }
}
