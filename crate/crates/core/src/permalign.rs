//! Frequency permutation alignment of per-bin class masks.
//!
//! A per-frequency mixture model labels its classes arbitrarily in every bin.
//! Alignment picks, for each bin, the class permutation whose masks correlate
//! best (Pearson over time) with per-class centroids accumulated over bins.
//!
//! The search runs in two phases:
//! 1. Greedy build-up: bins are visited in order of descending mask variance;
//!    the first bin seeds the centroids and every later bin is aligned to the
//!    running centroid sum of the bins already placed.
//! 2. Refinement sweeps: centroids are recomputed from all aligned bins and
//!    every bin re-picks its best permutation, until nothing changes or
//!    [`MAX_SWEEPS`] sweeps have run.
//!
//! If the result scores below the input labeling, the input labeling is
//! kept. Finally all permutations are relabeled so the anchor bin (highest
//! variance) keeps its input labels. The procedure only depends on mask
//! content, so it is idempotent.

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::masks::{MaskSet, MaskStage};

pub const MAX_CLASSES: usize = 6;
pub const MAX_SWEEPS: usize = 20;

/// `perms[f][k]` is the input class placed at output class `k` in bin `f`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationMap {
    perms: Vec<Vec<usize>>,
}

impl PermutationMap {
    pub fn identity(classes: usize, bins: usize) -> Self {
        Self {
            perms: vec![(0..classes).collect(); bins],
        }
    }

    pub fn new(perms: Vec<Vec<usize>>) -> Result<Self> {
        for p in &perms {
            let mut seen = vec![false; p.len()];
            for &k in p {
                if k >= p.len() || std::mem::replace(&mut seen[k], true) {
                    return Err(Error::InvalidArgument(format!("{p:?} is not a permutation")));
                }
            }
        }
        Ok(Self { perms })
    }

    pub fn as_slice(&self) -> &[Vec<usize>] {
        &self.perms
    }

    pub fn is_identity(&self) -> bool {
        self.perms
            .iter()
            .all(|p| p.iter().enumerate().all(|(k, &src)| k == src))
    }

    /// Applies the map to raw masks.
    pub fn apply(&self, masks: &MaskSet) -> Result<MaskSet> {
        masks.permute_per_frequency(&self.perms)
    }
}

/// Time series of every (class, bin) mask, copied out for cache-friendly access.
struct BinSeries {
    classes: usize,
    frames: usize,
    /// `F x K x T`.
    data: Vec<f64>,
}

impl BinSeries {
    fn new(masks: &MaskSet) -> Self {
        let (classes, frames, bins) = (masks.classes(), masks.frames(), masks.bins());
        let mut data = vec![0.0; bins * classes * frames];
        for f in 0..bins {
            for k in 0..classes {
                for t in 0..frames {
                    data[(f * classes + k) * frames + t] = masks.get(k, t, f);
                }
            }
        }
        Self { classes, frames, data }
    }

    fn series(&self, f: usize, k: usize) -> &[f64] {
        let start = (f * self.classes + k) * self.frames;
        &self.data[start..start + self.frames]
    }
}

/// Pearson correlation; zero when either series is constant.
fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let denom = (saa * sbb).sqrt();
    if denom <= 1e-12 * n || !denom.is_finite() {
        0.0
    } else {
        sab / denom
    }
}

fn permutations(classes: usize) -> Vec<Vec<usize>> {
    (0..classes).permutations(classes).collect()
}

/// Best permutation of bin `f` against `centroids` (`K x T`) and its score.
/// Ties keep the earliest candidate in lexicographic order.
fn best_permutation(series: &BinSeries, f: usize, centroids: &[Vec<f64>], candidates: &[Vec<usize>]) -> (usize, f64) {
    let k = series.classes;
    // corr[src][dst]
    let corr: Vec<Vec<f64>> = (0..k)
        .map(|src| (0..k).map(|dst| correlation(series.series(f, src), &centroids[dst])).collect())
        .collect();
    let mut best = (0, f64::NEG_INFINITY);
    for (i, p) in candidates.iter().enumerate() {
        let score: f64 = p.iter().enumerate().map(|(dst, &src)| corr[src][dst]).sum();
        if score > best.1 + 1e-12 {
            best = (i, score);
        }
    }
    best
}

fn centroids_of(series: &BinSeries, perms: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let mut c = vec![vec![0.0; series.frames]; series.classes];
    for (f, p) in perms.iter().enumerate() {
        for (dst, &src) in p.iter().enumerate() {
            for (acc, v) in c[dst].iter_mut().zip(series.series(f, src)) {
                *acc += v;
            }
        }
    }
    c
}

fn bin_variance(series: &BinSeries, f: usize) -> f64 {
    let n = (series.classes * series.frames) as f64;
    let vals = (0..series.classes).flat_map(|k| series.series(f, k).iter().copied());
    let mean = vals.clone().sum::<f64>() / n;
    vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

fn check_input(masks: &MaskSet) -> Result<()> {
    if masks.classes() > MAX_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "alignment enumerates K! permutations; K = {} exceeds {MAX_CLASSES}",
            masks.classes()
        )));
    }
    masks.check_simplex(crate::masks::SIMPLEX_TOL)
}

/// Aligns class labels across frequency. Returns the aligned masks and the
/// map that produces them from the input.
pub fn align(masks: &MaskSet) -> Result<(MaskSet, PermutationMap)> {
    check_input(masks)?;
    let (classes, bins) = (masks.classes(), masks.bins());
    if bins == 0 || masks.frames() == 0 {
        return Ok((masks.clone().with_stage(MaskStage::Aligned), PermutationMap::identity(classes, bins)));
    }
    let series = BinSeries::new(masks);
    let candidates = permutations(classes);
    let identity: Vec<usize> = (0..classes).collect();

    let variances: Vec<f64> = (0..bins).map(|f| bin_variance(&series, f)).collect();
    let mut order: Vec<usize> = (0..bins).collect();
    order.sort_by(|&a, &b| variances[b].total_cmp(&variances[a]).then(a.cmp(&b)));
    let anchor = order[0];

    let mut perms = vec![identity.clone(); bins];
    let mut centroid: Vec<Vec<f64>> = (0..classes).map(|k| series.series(anchor, k).to_vec()).collect();
    for &f in &order[1..] {
        let (best, _) = best_permutation(&series, f, &centroid, &candidates);
        perms[f] = candidates[best].clone();
        for (dst, &src) in perms[f].iter().enumerate() {
            for (acc, v) in centroid[dst].iter_mut().zip(series.series(f, src)) {
                *acc += v;
            }
        }
    }

    for _ in 0..MAX_SWEEPS {
        let centroid = centroids_of(&series, &perms);
        let mut changed = false;
        for &f in &order {
            let (best, score) = best_permutation(&series, f, &centroid, &candidates);
            let current: f64 = perms[f]
                .iter()
                .enumerate()
                .map(|(dst, &src)| correlation(series.series(f, src), &centroid[dst]))
                .sum();
            if score > current + 1e-12 && candidates[best] != perms[f] {
                perms[f] = candidates[best].clone();
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    // Never return a labeling that scores below the input.
    let input = vec![identity; bins];
    if score_of(&series, &input) > score_of(&series, &perms) {
        perms = input;
    }

    // Relabel so the anchor bin keeps its input labels.
    let anchor_perm = perms[anchor].clone();
    for p in perms.iter_mut() {
        *p = (0..classes).map(|k| p[inverse_index(&anchor_perm, k)]).collect();
    }
    let map = PermutationMap::new(perms)?;
    let aligned = map.apply(masks)?.with_stage(MaskStage::Aligned);
    Ok((aligned, map))
}

/// Position of class `a` within `perm`, i.e. the output class that receives it.
fn inverse_index(perm: &[usize], a: usize) -> usize {
    perm.iter().position(|&x| x == a).expect("permutation contains every class")
}

/// Sum over bins and classes of the correlation between each bin's mask and
/// the class centroid (mean over bins). Higher means more consistent labels.
pub fn alignment_score(masks: &MaskSet) -> Result<f64> {
    check_input(masks)?;
    let identity = PermutationMap::identity(masks.classes(), masks.bins());
    Ok(score_of(&BinSeries::new(masks), identity.as_slice()))
}

fn score_of(series: &BinSeries, perms: &[Vec<usize>]) -> f64 {
    let centroid = centroids_of(series, perms);
    perms
        .iter()
        .enumerate()
        .map(|(f, p)| {
            p.iter()
                .enumerate()
                .map(|(dst, &src)| correlation(series.series(f, src), &centroid[dst]))
                .sum::<f64>()
        })
        .sum()
}
