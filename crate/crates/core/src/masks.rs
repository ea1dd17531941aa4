//! Per-class time-frequency masks, stored `K x T x F`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{write_atomic, TensorFile};

/// Tolerance for `sum_k mask = 1` and the `[0, 1]` range.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Where in the pipeline a mask set was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskStage {
    /// Mixture-model posteriors before permutation alignment.
    Raw,
    /// After frequency permutation alignment.
    Aligned,
    /// Output of a prediction path (k-means or refined mixture model).
    Final,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    values: Vec<f64>,
    classes: usize,
    frames: usize,
    bins: usize,
    stage: MaskStage,
}

impl MaskSet {
    /// Builds a mask set and checks the simplex constraint at every slot.
    pub fn new(values: Vec<f64>, classes: usize, frames: usize, bins: usize, stage: MaskStage) -> Result<Self> {
        let masks = Self::from_raw(values, classes, frames, bins, stage)?;
        masks.check_simplex(SIMPLEX_TOL)?;
        Ok(masks)
    }

    /// Shape-checked construction without the simplex check.
    pub(crate) fn from_raw(
        values: Vec<f64>,
        classes: usize,
        frames: usize,
        bins: usize,
        stage: MaskStage,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidArgument("mask set needs at least one class".into()));
        }
        if values.len() != classes * frames * bins {
            return Err(Error::Shape(format!(
                "{} mask values for {classes}x{frames}x{bins}",
                values.len()
            )));
        }
        Ok(Self {
            values,
            classes,
            frames,
            bins,
            stage,
        })
    }

    pub fn uniform(classes: usize, frames: usize, bins: usize, stage: MaskStage) -> Self {
        Self {
            values: vec![1.0 / classes as f64; classes * frames * bins],
            classes,
            frames,
            bins,
            stage,
        }
    }

    /// One-hot masks from per-slot labels in t-major order.
    pub fn one_hot(labels: &[usize], classes: usize, frames: usize, bins: usize, stage: MaskStage) -> Result<Self> {
        if labels.len() != frames * bins {
            return Err(Error::Shape(format!(
                "{} labels for {frames}x{bins} slots",
                labels.len()
            )));
        }
        let mut values = vec![0.0; classes * frames * bins];
        for (n, &k) in labels.iter().enumerate() {
            if k >= classes {
                return Err(Error::InvalidArgument(format!("label {k} out of range for {classes} classes")));
            }
            values[k * frames * bins + n] = 1.0;
        }
        Self::from_raw(values, classes, frames, bins, stage)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn stage(&self) -> MaskStage {
        self.stage
    }

    pub fn with_stage(mut self, stage: MaskStage) -> Self {
        self.stage = stage;
        self
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn index(&self, k: usize, t: usize, f: usize) -> usize {
        (k * self.frames + t) * self.bins + f
    }

    #[inline]
    pub fn get(&self, k: usize, t: usize, f: usize) -> f64 {
        self.values[self.index(k, t, f)]
    }

    /// The `T x F` mask of class `k`.
    pub fn class_mask(&self, k: usize) -> &[f64] {
        let n = self.frames * self.bins;
        &self.values[k * n..(k + 1) * n]
    }

    /// Largest violation of the simplex constraint over all slots.
    pub fn simplex_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for t in 0..self.frames {
            for f in 0..self.bins {
                let mut sum = 0.0;
                for k in 0..self.classes {
                    let v = self.get(k, t, f);
                    if !v.is_finite() {
                        return f64::INFINITY;
                    }
                    worst = worst.max(-v).max(v - 1.0);
                    sum += v;
                }
                worst = worst.max((sum - 1.0).abs());
            }
        }
        worst
    }

    pub fn check_simplex(&self, tol: f64) -> Result<()> {
        let defect = self.simplex_defect();
        if defect > tol {
            return Err(Error::InvalidArgument(format!(
                "masks violate the simplex constraint by {defect:e}"
            )));
        }
        Ok(())
    }

    /// Per-slot argmax label, ties resolved toward the lowest class index.
    pub fn argmax_labels(&self) -> Vec<usize> {
        let mut labels = vec![0; self.frames * self.bins];
        for t in 0..self.frames {
            for f in 0..self.bins {
                let mut best = 0;
                for k in 1..self.classes {
                    if self.get(k, t, f) > self.get(best, t, f) {
                        best = k;
                    }
                }
                labels[t * self.bins + f] = best;
            }
        }
        labels
    }

    /// Output class `k` at bin `f` takes input class `perms[f][k]`.
    pub fn permute_per_frequency(&self, perms: &[Vec<usize>]) -> Result<Self> {
        if perms.len() != self.bins {
            return Err(Error::Shape(format!("{} permutations for {} bins", perms.len(), self.bins)));
        }
        let mut out = self.clone();
        for (f, perm) in perms.iter().enumerate() {
            for (k, &src) in perm.iter().enumerate() {
                for t in 0..self.frames {
                    let v = self.get(src, t, f);
                    let i = out.index(k, t, f);
                    out.values[i] = v;
                }
            }
        }
        Ok(out)
    }

    /// Reorders classes globally: output class `k` is input class `order[k]`.
    pub fn permute_classes(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.classes {
            return Err(Error::Shape("class order length mismatch".into()));
        }
        let n = self.frames * self.bins;
        let mut values = Vec::with_capacity(self.values.len());
        for &src in order {
            values.extend_from_slice(&self.values[src * n..(src + 1) * n]);
        }
        Self::from_raw(values, self.classes, self.frames, self.bins, self.stage)
    }

    pub fn to_tensor(&self) -> TensorFile {
        TensorFile::real(
            vec![self.classes, self.frames, self.bins],
            self.values.iter().map(|&v| v as f32).collect(),
        )
        .expect("mask dims always match payload")
    }

    pub fn from_tensor(tensor: &TensorFile, stage: MaskStage) -> Result<Self> {
        let values = tensor
            .as_real()
            .ok_or_else(|| Error::Shape("mask tensors must be real32".into()))?;
        let [k, t, f] = tensor.dims[..] else {
            return Err(Error::Shape(format!("mask tensor must be 3-D, got {:?}", tensor.dims)));
        };
        Self::new(values.iter().map(|&v| f64::from(v)).collect(), k, t, f, stage)
    }

    /// Writes class `k` as an 8-bit binary PGM, low frequencies at the bottom.
    pub fn write_pgm(&self, k: usize, path: &Path) -> Result<()> {
        if k >= self.classes {
            return Err(Error::InvalidArgument(format!("class {k} out of range")));
        }
        let mut bytes = format!("P5\n{} {}\n255\n", self.frames, self.bins).into_bytes();
        for f in (0..self.bins).rev() {
            for t in 0..self.frames {
                bytes.push((self.get(k, t, f).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        write_atomic(path, |mut file| {
            file.write_all(&bytes).map_err(|e| Error::io(path, e))
        })
    }
}
