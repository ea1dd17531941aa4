//! Affinity loss `|E E^T - C C^T|_F^2 / N^2` evaluated through its low-rank
//! expansion, so the `N x N` affinity matrices are never formed.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::masks::MaskSet;

/// One-hot class assignment per slot (t-major), i.e. the rows of `C`.
/// Slots marked inactive are left out of the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetAssignment {
    labels: Vec<usize>,
    classes: usize,
    active: Option<Vec<bool>>,
}

impl TargetAssignment {
    pub fn new(labels: Vec<usize>, classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            labels,
            classes,
            active: None,
        })
    }

    pub fn with_active(mut self, active: Vec<bool>) -> Result<Self> {
        if active.len() != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} activity flags for {} slots",
                active.len(),
                self.labels.len()
            )));
        }
        self.active = Some(active);
        Ok(self)
    }

    pub fn is_active(&self, n: usize) -> bool {
        self.active.as_ref().is_none_or(|a| a[n])
    }

    pub fn active_count(&self) -> usize {
        match &self.active {
            Some(a) => a.iter().filter(|&&v| v).count(),
            None => self.labels.len(),
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Dense `N x K` one-hot matrix.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut c = Array2::zeros((self.labels.len(), self.classes));
        for (n, &k) in self.labels.iter().enumerate() {
            c[[n, k]] = 1.0;
        }
        c
    }

    pub(crate) fn class_counts(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.classes];
        for (n, &k) in self.labels.iter().enumerate() {
            if self.is_active(n) {
                counts[k] += 1.0;
            }
        }
        counts
    }

    /// Slots of frames `start..start + len` for an utterance with `bins` bins.
    pub fn crop(&self, bins: usize, start: usize, len: usize) -> Self {
        Self {
            labels: self.labels[start * bins..(start + len) * bins].to_vec(),
            classes: self.classes,
            active: self.active.as_ref().map(|a| a[start * bins..(start + len) * bins].to_vec()),
        }
    }
}

/// Per-slot argmax of the teacher masks; ties go to the lowest class index.
pub fn harden_targets(masks: &MaskSet) -> TargetAssignment {
    TargetAssignment {
        labels: masks.argmax_labels(),
        classes: masks.classes(),
        active: None,
    }
}

/// `E^T C` over active slots: column `k` sums the embeddings of class `k`.
fn class_sums(embeddings: &ArrayView2<f64>, targets: &TargetAssignment) -> Array2<f64> {
    let mut s = Array2::zeros((embeddings.ncols(), targets.classes));
    for (n, (row, &k)) in embeddings.axis_iter(Axis(0)).zip(&targets.labels).enumerate() {
        if targets.is_active(n) {
            let mut col = s.column_mut(k);
            col += &row;
        }
    }
    s
}

/// `E^T E` over active slots.
fn gram(embeddings: &ArrayView2<f64>, targets: &TargetAssignment) -> Array2<f64> {
    match &targets.active {
        None => embeddings.t().dot(embeddings),
        Some(active) => {
            let mut g = Array2::zeros((embeddings.ncols(), embeddings.ncols()));
            for (row, _) in embeddings.axis_iter(Axis(0)).zip(active).filter(|(_, &a)| a) {
                let r = row.view().insert_axis(Axis(1));
                g += &r.dot(&r.t());
            }
            g
        }
    }
}

fn check_rows(embeddings: &ArrayView2<f64>, targets: &TargetAssignment) -> Result<()> {
    if embeddings.nrows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} embedding rows but {} target rows",
            embeddings.nrows(),
            targets.len()
        )));
    }
    if embeddings.nrows() == 0 {
        return Err(Error::Shape("loss needs at least one slot".into()));
    }
    Ok(())
}

/// `(|E^T E|^2 - 2 |E^T C|^2 + |C^T C|^2) / N^2` over the `N` active slots;
/// zero when no slot is active.
pub fn dc_loss(embeddings: ArrayView2<f64>, targets: &TargetAssignment) -> Result<f64> {
    check_rows(&embeddings, targets)?;
    let n = targets.active_count() as f64;
    if n == 0.0 {
        return Ok(0.0);
    }
    let ee = gram(&embeddings, targets);
    let ec = class_sums(&embeddings, targets);
    let cc: f64 = targets.class_counts().iter().map(|c| c * c).sum();
    let sq = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>();
    let loss = (sq(&ee) - 2.0 * sq(&ec) + cc) / (n * n);
    // Rounding can dip a hair below zero; NaN passes through.
    Ok(if loss < 0.0 { 0.0 } else { loss })
}

/// Gradient of [`dc_loss`] with respect to the embedding matrix:
/// `4 (E (E^T E) - C (C^T E)) / N^2` on active rows, zero elsewhere.
pub fn dc_loss_grad(embeddings: ArrayView2<f64>, targets: &TargetAssignment) -> Result<Array2<f64>> {
    check_rows(&embeddings, targets)?;
    let n = targets.active_count() as f64;
    if n == 0.0 {
        return Ok(Array2::zeros(embeddings.raw_dim()));
    }
    let ee = gram(&embeddings, targets);
    let ec = class_sums(&embeddings, targets);
    let mut grad = embeddings.dot(&ee);
    for (i, (mut g, &k)) in grad.axis_iter_mut(Axis(0)).zip(&targets.labels).enumerate() {
        if targets.is_active(i) {
            g -= &ec.column(k);
        } else {
            g.fill(0.0);
        }
    }
    grad *= 4.0 / (n * n);
    Ok(grad)
}

/// Back-propagates `grad` (w.r.t. `v = u / |u|`, row-wise) to the
/// unnormalized rows `u`: `(g - v (v^T g)) / |u|`.
pub fn normalize_rows_backward(normalized: ArrayView2<f64>, norms: &[f64], grad: ArrayView2<f64>) -> Array2<f64> {
    let mut out = grad.to_owned();
    for ((mut g, v), &norm) in out.axis_iter_mut(Axis(0)).zip(normalized.axis_iter(Axis(0))).zip(norms) {
        let proj = g.dot(&v);
        g.scaled_add(-proj, &v);
        g /= norm;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, e: usize) -> Array2<f64> {
        let mut m = Array2::from_shape_fn((n, e), |_| rng.random_range(-1.0f64..1.0));
        for mut r in m.axis_iter_mut(Axis(0)) {
            let norm = r.dot(&r).sqrt();
            r /= norm;
        }
        m
    }

    fn materialized(e: &Array2<f64>, c: &Array2<f64>) -> f64 {
        let d = e.dot(&e.t()) - c.dot(&c.t());
        let n = e.nrows() as f64;
        d.iter().map(|v| v * v).sum::<f64>() / (n * n)
    }

    #[test]
    fn zero_at_the_targets() {
        let t = TargetAssignment::new(vec![0, 1, 1, 2, 0], 3).unwrap();
        let e = t.to_dense();
        assert_eq!(dc_loss(e.view(), &t).unwrap(), 0.0);
        let g = dc_loss_grad(e.view(), &t).unwrap();
        assert!(g.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn tiny_instance_matches_materialized_affinities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = random_unit_rows(&mut rng, 4, 2);
        let t = TargetAssignment::new(vec![0, 1, 1, 0], 2).unwrap();
        let expected = materialized(&e, &t.to_dense());
        assert!((dc_loss(e.view(), &t).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn identical_embeddings_balanced_classes() {
        // E E^T is all ones, C C^T is block-diagonal: half the entries differ.
        let n = 10;
        let mut e = Array2::zeros((n, 3));
        e.column_mut(1).fill(1.0);
        let t = TargetAssignment::new((0..n).map(|i| i % 2).collect(), 2).unwrap();
        let oracle = materialized(&e, &t.to_dense());
        assert!((oracle - 0.5).abs() < 1e-15);
        assert!((dc_loss(e.view(), &t).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn class_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = random_unit_rows(&mut rng, 30, 4);
        let labels: Vec<usize> = (0..30).map(|_| rng.random_range(0..3)).collect();
        let relabeled: Vec<usize> = labels.iter().map(|&l| [2, 0, 1][l]).collect();
        let a = dc_loss(e.view(), &TargetAssignment::new(labels, 3).unwrap()).unwrap();
        let b = dc_loss(e.view(), &TargetAssignment::new(relabeled, 3).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn inactive_slots_drop_out_of_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = random_unit_rows(&mut rng, 12, 3);
        let labels: Vec<usize> = (0..12).map(|_| rng.random_range(0..3)).collect();
        let active: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
        let keep: Vec<usize> = (0..12).filter(|&i| active[i]).collect();
        let t = TargetAssignment::new(labels.clone(), 3).unwrap().with_active(active.clone()).unwrap();
        let sub_e = e.select(Axis(0), &keep);
        let sub_t = TargetAssignment::new(keep.iter().map(|&i| labels[i]).collect(), 3).unwrap();
        assert!((dc_loss(e.view(), &t).unwrap() - materialized(&sub_e, &sub_t.to_dense())).abs() < 1e-12);
        let g = dc_loss_grad(e.view(), &t).unwrap();
        let sub_g = dc_loss_grad(sub_e.view(), &sub_t).unwrap();
        for (r, &i) in keep.iter().enumerate() {
            for j in 0..3 {
                assert!((g[[i, j]] - sub_g[[r, j]]).abs() < 1e-14);
            }
        }
        assert!((0..12).filter(|&i| !active[i]).all(|i| g.row(i).iter().all(|&v| v == 0.0)));
        let none = TargetAssignment::new(labels, 3).unwrap().with_active(vec![false; 12]).unwrap();
        assert_eq!(dc_loss(e.view(), &none).unwrap(), 0.0);
        assert!(TargetAssignment::new(vec![0; 3], 1).unwrap().with_active(vec![true; 2]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = random_unit_rows(&mut rng, 6, 3);
        let t = TargetAssignment::new(vec![0, 1, 2, 0, 1, 1], 3).unwrap();
        let g = dc_loss_grad(e.view(), &t).unwrap();
        let eps = 1e-6;
        for i in 0..6 {
            for j in 0..3 {
                let mut p = e.clone();
                p[[i, j]] += eps;
                let mut m = e.clone();
                m[[i, j]] -= eps;
                let fd = (dc_loss(p.view(), &t).unwrap() - dc_loss(m.view(), &t).unwrap()) / (2.0 * eps);
                assert!((fd - g[[i, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn normalization_backward_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random_unit_rows(&mut rng, 8, 5);
        let g = Array2::from_shape_fn((8, 5), |_| rng.random_range(-1.0..1.0));
        let norms = vec![2.5; 8];
        let back = normalize_rows_backward(v.view(), &norms, g.view());
        for (b, r) in back.axis_iter(Axis(0)).zip(v.axis_iter(Axis(0))) {
            assert!(b.dot(&r).abs() < 1e-12);
        }
    }

    #[test]
    fn row_mismatch_is_an_error() {
        let e = Array2::<f64>::zeros((3, 2));
        let t = TargetAssignment::new(vec![0, 1], 2).unwrap();
        assert!(dc_loss(e.view(), &t).is_err());
        assert!(dc_loss_grad(e.view(), &t).is_err());
    }

    #[test]
    fn hardening() {
        use crate::masks::MaskStage;
        // Three slots, three classes: (0.9, .05, .05), (0.5, 0.5, 0), one-hot class 2.
        let values = vec![0.9, 0.5, 0.0, 0.05, 0.5, 0.0, 0.05, 0.0, 1.0];
        let m = MaskSet::new(values, 3, 1, 3, MaskStage::Aligned).unwrap();
        let t = harden_targets(&m);
        assert_eq!(t.labels(), &[0, 0, 2]);
        let again = harden_targets(&MaskSet::one_hot(t.labels(), 3, 1, 3, MaskStage::Aligned).unwrap());
        assert_eq!(again, t);
    }
}
