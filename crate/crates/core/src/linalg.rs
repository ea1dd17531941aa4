//! Small dense complex matrices for per-frequency spatial statistics.
//!
//! Sizes are the number of microphones, so everything here is plain
//! row-major storage and textbook O(D^3) algorithms.

use num_complex::Complex;

use crate::C64;

/// Square complex matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    dim: usize,
    data: Vec<C64>,
}

impl CMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![C64::new(0.0, 0.0); dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<C64>]) -> Self {
        let dim = rows.len();
        assert!(rows.iter().all(|r| r.len() == dim), "matrix must be square");
        Self {
            dim,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_vec(dim: usize, data: Vec<C64>) -> Self {
        assert_eq!(data.len(), dim * dim);
        Self { dim, data }
    }

    /// `v v^H`.
    pub fn outer(v: &[C64]) -> Self {
        let dim = v.len();
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                m[(i, j)] = v[i] * v[j].conj();
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim).map(|i| self[(i, i)]).sum()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|z| *z *= s);
    }

    pub fn add_diagonal(&mut self, s: f64) {
        for i in 0..self.dim {
            self[(i, i)] += s;
        }
    }

    /// `self += w * v v^H`, touching only the lower triangle and diagonal.
    /// Call [`CMatrix::mirror_lower`] once accumulation is finished.
    pub fn rank1_update_lower(&mut self, w: f64, v: &[C64]) {
        let d = self.dim;
        for i in 0..d {
            let vi = v[i] * w;
            let row = &mut self.data[i * d..i * d + i + 1];
            for (j, entry) in row.iter_mut().enumerate() {
                *entry += vi * v[j].conj();
            }
        }
    }

    /// Fills the upper triangle from the lower one so the result is Hermitian.
    pub fn mirror_lower(&mut self) {
        let d = self.dim;
        for i in 0..d {
            self.data[i * d + i].im = 0.0;
            for j in 0..i {
                self.data[j * d + i] = self.data[i * d + j].conj();
            }
        }
    }

    /// `(A + A^H) / 2`.
    pub fn hermitize(&mut self) {
        let d = self.dim;
        for i in 0..d {
            self.data[i * d + i].im = 0.0;
            for j in 0..i {
                let avg = (self.data[i * d + j] + self.data[j * d + i].conj()) * 0.5;
                self.data[i * d + j] = avg;
                self.data[j * d + i] = avg.conj();
            }
        }
    }

    /// Largest `|A - A^H|` entry.
    pub fn hermitian_defect(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                worst = worst.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        worst
    }

    pub fn matvec(&self, v: &[C64]) -> Vec<C64> {
        let d = self.dim;
        (0..d)
            .map(|i| (0..d).map(|j| self.data[i * d + j] * v[j]).sum())
            .collect()
    }

    pub fn matmul(&self, other: &CMatrix) -> CMatrix {
        let d = self.dim;
        assert_eq!(d, other.dim);
        let mut out = CMatrix::zeros(d);
        for i in 0..d {
            for k in 0..d {
                let a = self.data[i * d + k];
                for j in 0..d {
                    out.data[i * d + j] += a * other.data[k * d + j];
                }
            }
        }
        out
    }

    /// `v^H A v`, real part (exact for Hermitian `A`).
    pub fn quad_form(&self, v: &[C64]) -> f64 {
        let av = self.matvec(v);
        v.iter().zip(&av).map(|(a, b)| (a.conj() * b).re).sum()
    }

    pub fn column(&self, j: usize) -> Vec<C64> {
        (0..self.dim).map(|i| self[(i, j)]).collect()
    }

    pub fn cholesky(&self) -> Option<Cholesky> {
        Cholesky::new(self)
    }
}

impl std::ops::Index<(usize, usize)> for CMatrix {
    type Output = C64;
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.dim + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.dim + j]
    }
}

/// Lower Cholesky factor `L` with `A = L L^H` of a Hermitian PD matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    dim: usize,
    l: Vec<C64>,
}

impl Cholesky {
    pub fn new(a: &CMatrix) -> Option<Self> {
        let d = a.dim;
        let mut l = vec![C64::new(0.0, 0.0); d * d];
        for j in 0..d {
            let mut diag = a[(j, j)].re;
            for k in 0..j {
                diag -= l[j * d + k].norm_sqr();
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return None;
            }
            let ljj = diag.sqrt();
            l[j * d + j] = C64::new(ljj, 0.0);
            for i in j + 1..d {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[i * d + k] * l[j * d + k].conj();
                }
                l[i * d + j] = s / ljj;
            }
        }
        Some(Self { dim: d, l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `log det A`.
    pub fn log_det(&self) -> f64 {
        (0..self.dim).map(|i| self.l[i * self.dim + i].re.ln()).sum::<f64>() * 2.0
    }

    /// Solves `L x = b` in place.
    pub fn forward_sub(&self, x: &mut [C64]) {
        let d = self.dim;
        for i in 0..d {
            let mut s = x[i];
            for k in 0..i {
                s -= self.l[i * d + k] * x[k];
            }
            x[i] = s / self.l[i * d + i].re;
        }
    }

    /// Solves `L^H x = b` in place.
    pub fn backward_sub(&self, x: &mut [C64]) {
        let d = self.dim;
        for i in (0..d).rev() {
            let mut s = x[i];
            for k in i + 1..d {
                s -= self.l[k * d + i].conj() * x[k];
            }
            x[i] = s / self.l[i * d + i].re;
        }
    }

    /// `v^H A^{-1} v` using `scratch` (length `dim`) as workspace.
    pub fn inv_quad_form(&self, v: &[C64], scratch: &mut [C64]) -> f64 {
        scratch.copy_from_slice(v);
        self.forward_sub(scratch);
        scratch.iter().map(Complex::norm_sqr).sum()
    }

    pub fn solve(&self, b: &[C64]) -> Vec<C64> {
        let mut x = b.to_vec();
        self.forward_sub(&mut x);
        self.backward_sub(&mut x);
        x
    }

    /// `A^{-1} B`, column by column.
    pub fn solve_matrix(&self, b: &CMatrix) -> CMatrix {
        let d = self.dim;
        let mut out = CMatrix::zeros(d);
        for j in 0..d {
            let col = self.solve(&b.column(j));
            for i in 0..d {
                out[(i, j)] = col[i];
            }
        }
        out
    }

    pub fn inverse(&self) -> CMatrix {
        self.solve_matrix(&CMatrix::identity(self.dim))
    }
}
