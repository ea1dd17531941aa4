//! Complex angular central Gaussian mixture model (cACGMM) fitted per
//! frequency bin with EM.
//!
//! Observations are the unit-normalized microphone vectors `y / |y|`. Each
//! class `k` at bin `f` has a weight `pi_kf` and a Hermitian shape matrix
//! `B_kf`; the class density on the complex unit sphere is
//!
//! ```text
//! cACG(y; B) = (D-1)! / (2 pi^D det B) * (y^H B^-1 y)^-D
//! ```
//!
//! Bins are fitted independently (in parallel), which is exactly why the
//! resulting class indices are inconsistent across frequency; see
//! [`crate::permalign`].

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{CMatrix, Cholesky};
use crate::masks::{MaskSet, MaskStage};
use crate::stft::MultichannelStft;
use crate::C64;

/// Observations with `|y| < DEGENERATE_NORM` are flagged and excluded.
pub const DEGENERATE_NORM: f64 = 1e-10;
/// Diagonal loading added to every shape matrix after trace normalization.
pub const SHAPE_RIDGE: f64 = 1e-8;
/// Weight given to a class that lost all responsibility at a bin.
pub const WEIGHT_FLOOR: f64 = 1e-6;
const EMPTY_CLASS_MASS: f64 = 1e-12;

/// Unit-norm observation vectors, stored frequency-major (`F x T x D`) so
/// each bin's data is contiguous.
#[derive(Debug, Clone)]
pub struct NormalizedObservations {
    values: Vec<C64>,
    degenerate: Vec<bool>,
    frames: usize,
    bins: usize,
    channels: usize,
}

impl NormalizedObservations {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, t: usize, f: usize) -> &[C64] {
        let start = (f * self.frames + t) * self.channels;
        &self.values[start..start + self.channels]
    }

    pub fn is_degenerate(&self, t: usize, f: usize) -> bool {
        self.degenerate[f * self.frames + t]
    }

    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|&&d| d).count()
    }

    fn bin(&self, f: usize) -> BinObs<'_> {
        let n = self.frames * self.channels;
        BinObs {
            values: &self.values[f * n..(f + 1) * n],
            degenerate: &self.degenerate[f * self.frames..(f + 1) * self.frames],
            channels: self.channels,
        }
    }
}

pub fn normalize_observations(y: &MultichannelStft) -> NormalizedObservations {
    let (frames, bins, channels) = (y.frames(), y.bins(), y.channels());
    let mut values = vec![C64::new(0.0, 0.0); frames * bins * channels];
    let mut degenerate = vec![false; frames * bins];
    for f in 0..bins {
        for t in 0..frames {
            let v = y.slot(t, f);
            let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            let out = &mut values[(f * frames + t) * channels..(f * frames + t + 1) * channels];
            if norm < DEGENERATE_NORM {
                degenerate[f * frames + t] = true;
            } else {
                for (o, z) in out.iter_mut().zip(v) {
                    *o = z / norm;
                }
            }
        }
    }
    NormalizedObservations {
        values,
        degenerate,
        frames,
        bins,
        channels,
    }
}

/// Mixture parameters: weights `K x F` and shape matrices `K x F`.
#[derive(Debug, Clone, PartialEq)]
pub struct CacgmmState {
    weights: Vec<f64>,
    shapes: Vec<CMatrix>,
    classes: usize,
    bins: usize,
}

impl CacgmmState {
    /// Uniform weights and identity shapes.
    pub fn initial(classes: usize, bins: usize, channels: usize) -> Self {
        Self {
            weights: vec![1.0 / classes as f64; classes * bins],
            shapes: vec![CMatrix::identity(channels); classes * bins],
            classes,
            bins,
        }
    }

    pub fn from_parts(weights: Vec<f64>, shapes: Vec<CMatrix>, classes: usize, bins: usize) -> Result<Self> {
        if weights.len() != classes * bins || shapes.len() != classes * bins {
            return Err(Error::Shape("state needs K x F weights and shapes".into()));
        }
        let dim = shapes.first().map(CMatrix::dim).unwrap_or(0);
        if shapes.iter().any(|b| b.dim() != dim) {
            return Err(Error::Shape("all shape matrices must have the same size".into()));
        }
        for f in 0..bins {
            let sum: f64 = (0..classes).map(|k| weights[k * bins + f]).sum();
            if (sum - 1.0).abs() > 1e-6 || (0..classes).any(|k| weights[k * bins + f] < 0.0) {
                return Err(Error::InvalidArgument(format!("weights at bin {f} are not a distribution")));
            }
        }
        Ok(Self {
            weights,
            shapes,
            classes,
            bins,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn weight(&self, k: usize, f: usize) -> f64 {
        self.weights[k * self.bins + f]
    }

    pub fn shape(&self, k: usize, f: usize) -> &CMatrix {
        &self.shapes[k * self.bins + f]
    }

    fn bin_params(&self, f: usize) -> BinParams {
        BinParams {
            weights: (0..self.classes).map(|k| self.weight(k, f)).collect(),
            shapes: (0..self.classes).map(|k| self.shape(k, f).clone()).collect(),
        }
    }

    fn from_bins(bins: Vec<BinParams>, classes: usize) -> Self {
        let nb = bins.len();
        let mut weights = vec![0.0; classes * nb];
        let mut shapes = vec![CMatrix::zeros(0); classes * nb];
        for (f, p) in bins.into_iter().enumerate() {
            for (k, (w, b)) in p.weights.into_iter().zip(p.shapes).enumerate() {
                weights[k * nb + f] = w;
                shapes[k * nb + f] = b;
            }
        }
        Self {
            weights,
            shapes,
            classes,
            bins: nb,
        }
    }
}

fn log_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

/// `log[(D-1)! / (2 pi^D det B)]`.
fn log_normalizer(dim: usize, chol: &Cholesky) -> f64 {
    log_factorial(dim - 1) - 2f64.ln() - dim as f64 * PI.ln() - chol.log_det()
}

/// Log density of the complex angular central Gaussian at the unit vector `y`.
pub fn cacg_log_pdf(y: &[C64], shape: &CMatrix) -> Result<f64> {
    if y.len() != shape.dim() {
        return Err(Error::Shape("observation and shape dimensions differ".into()));
    }
    let chol = shape
        .cholesky()
        .ok_or_else(|| Error::Numerical("shape matrix is not positive definite".into()))?;
    let mut scratch = vec![C64::new(0.0, 0.0); y.len()];
    let quad = chol.inv_quad_form(y, &mut scratch);
    Ok(log_normalizer(y.len(), &chol) - y.len() as f64 * quad.ln())
}

struct BinObs<'a> {
    values: &'a [C64],
    degenerate: &'a [bool],
    channels: usize,
}

impl BinObs<'_> {
    fn frames(&self) -> usize {
        self.degenerate.len()
    }

    fn get(&self, t: usize) -> &[C64] {
        &self.values[t * self.channels..(t + 1) * self.channels]
    }
}

#[derive(Debug, Clone)]
struct BinParams {
    weights: Vec<f64>,
    shapes: Vec<CMatrix>,
}

/// Result of an E-step on one bin.
struct BinPosterior {
    /// `K x T`, class-major.
    gamma: Vec<f64>,
    /// `y^H B_k^-1 y`, `K x T`, reused by the next M-step.
    quad: Vec<f64>,
    loglik_sum: f64,
    valid: usize,
}

fn bin_e_step(obs: &BinObs, params: &BinParams) -> Result<BinPosterior> {
    let classes = params.weights.len();
    let frames = obs.frames();
    let dim = obs.channels;
    let chols = params
        .shapes
        .iter()
        .map(|b| {
            b.cholesky()
                .ok_or_else(|| Error::Numerical("shape matrix lost positive definiteness".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let offsets: Vec<f64> = chols
        .iter()
        .zip(&params.weights)
        .map(|(c, &w)| w.ln() + log_normalizer(dim, c))
        .collect();

    let mut gamma = vec![0.0; classes * frames];
    let mut quad = vec![1.0; classes * frames];
    let mut logp = vec![0.0; classes];
    let mut scratch = vec![C64::new(0.0, 0.0); dim];
    let mut loglik_sum = 0.0;
    let mut valid = 0;
    for t in 0..frames {
        if obs.degenerate[t] {
            for k in 0..classes {
                gamma[k * frames + t] = 1.0 / classes as f64;
            }
            continue;
        }
        let y = obs.get(t);
        let mut max = f64::NEG_INFINITY;
        for k in 0..classes {
            let q = chols[k].inv_quad_form(y, &mut scratch);
            quad[k * frames + t] = q;
            logp[k] = offsets[k] - dim as f64 * q.ln();
            max = max.max(logp[k]);
        }
        let mut sum = 0.0;
        for lp in logp.iter_mut() {
            *lp = (*lp - max).exp();
            sum += *lp;
        }
        for k in 0..classes {
            gamma[k * frames + t] = logp[k] / sum;
        }
        loglik_sum += max + sum.ln();
        valid += 1;
    }
    Ok(BinPosterior {
        gamma,
        quad,
        loglik_sum,
        valid,
    })
}

/// One M-step on a bin. `quad` holds `y^H B_prev^-1 y` for the previous shapes.
fn bin_m_step(obs: &BinObs, gamma: &[f64], quad: &[f64], prev: &BinParams) -> BinParams {
    let classes = prev.weights.len();
    let frames = obs.frames();
    let dim = obs.channels;
    let valid = obs.degenerate.iter().filter(|&&d| !d).count();
    if valid == 0 {
        return prev.clone();
    }
    let mut weights = vec![0.0; classes];
    let mut shapes = Vec::with_capacity(classes);
    for k in 0..classes {
        let g = &gamma[k * frames..(k + 1) * frames];
        let q = &quad[k * frames..(k + 1) * frames];
        let mut mass = 0.0;
        let mut acc = CMatrix::zeros(dim);
        for t in 0..frames {
            if obs.degenerate[t] || g[t] <= 0.0 {
                continue;
            }
            mass += g[t];
            acc.rank1_update_lower(g[t] / q[t], obs.get(t));
        }
        if mass <= EMPTY_CLASS_MASS {
            weights[k] = WEIGHT_FLOOR;
            shapes.push(prev.shapes[k].clone());
            continue;
        }
        weights[k] = mass / valid as f64;
        acc.mirror_lower();
        acc.hermitize();
        let trace = acc.trace().re;
        if !(trace > 0.0) || !trace.is_finite() {
            shapes.push(prev.shapes[k].clone());
            continue;
        }
        // The D / sum(gamma) prefactor cancels against the trace normalization.
        acc.scale(dim as f64 / trace);
        acc.add_diagonal(SHAPE_RIDGE);
        shapes.push(acc);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    BinParams { weights, shapes }
}

fn check_state(obs: &NormalizedObservations, state: &CacgmmState) -> Result<()> {
    if state.bins != obs.bins {
        return Err(Error::Shape(format!("state has {} bins, data has {}", state.bins, obs.bins)));
    }
    if state.shapes.iter().any(|b| b.dim() != obs.channels) {
        return Err(Error::Shape("shape matrix size differs from channel count".into()));
    }
    Ok(())
}

fn check_masks(obs: &NormalizedObservations, masks: &MaskSet) -> Result<()> {
    if masks.frames() != obs.frames || masks.bins() != obs.bins {
        return Err(Error::Shape(format!(
            "masks are {}x{}, observations {}x{}",
            masks.frames(),
            masks.bins(),
            obs.frames,
            obs.bins
        )));
    }
    masks.check_simplex(crate::masks::SIMPLEX_TOL)
}

fn bin_gamma(masks: &MaskSet, f: usize) -> Vec<f64> {
    let (classes, frames) = (masks.classes(), masks.frames());
    let mut g = vec![0.0; classes * frames];
    for k in 0..classes {
        for t in 0..frames {
            g[k * frames + t] = masks.get(k, t, f);
        }
    }
    g
}

fn gather_masks(posteriors: &[Vec<f64>], classes: usize, frames: usize, stage: MaskStage) -> MaskSet {
    let bins = posteriors.len();
    let mut values = vec![0.0; classes * frames * bins];
    for (f, g) in posteriors.iter().enumerate() {
        for k in 0..classes {
            for t in 0..frames {
                values[(k * frames + t) * bins + f] = g[k * frames + t];
            }
        }
    }
    MaskSet::from_raw(values, classes, frames, bins, stage).expect("posterior shape is consistent")
}

/// Class posteriors `gamma_ktf` for the current parameters.
pub fn e_step(obs: &NormalizedObservations, state: &CacgmmState) -> Result<MaskSet> {
    check_state(obs, state)?;
    let posteriors = (0..obs.bins)
        .into_par_iter()
        .map(|f| bin_e_step(&obs.bin(f), &state.bin_params(f)).map(|p| p.gamma))
        .collect::<Result<Vec<_>>>()?;
    Ok(gather_masks(&posteriors, state.classes, obs.frames, MaskStage::Raw))
}

/// Weight and shape updates given posteriors; `prev_state` supplies the
/// shapes used in the `1 / (y^H B^-1 y)` reweighting.
pub fn m_step(obs: &NormalizedObservations, masks: &MaskSet, prev_state: &CacgmmState) -> Result<CacgmmState> {
    check_state(obs, prev_state)?;
    check_masks(obs, masks)?;
    if masks.classes() != prev_state.classes {
        return Err(Error::Shape("mask and state class counts differ".into()));
    }
    let bins = (0..obs.bins)
        .into_par_iter()
        .map(|f| {
            let prev = prev_state.bin_params(f);
            let bin = obs.bin(f);
            let quad = prev_quad(&bin, &prev)?;
            Ok(bin_m_step(&bin, &bin_gamma(masks, f), &quad, &prev))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CacgmmState::from_bins(bins, prev_state.classes))
}

fn prev_quad(obs: &BinObs, prev: &BinParams) -> Result<Vec<f64>> {
    let frames = obs.frames();
    let mut quad = vec![1.0; prev.shapes.len() * frames];
    let mut scratch = vec![C64::new(0.0, 0.0); obs.channels];
    for (k, b) in prev.shapes.iter().enumerate() {
        let chol = b
            .cholesky()
            .ok_or_else(|| Error::Numerical("previous shape matrix is not positive definite".into()))?;
        for t in 0..frames {
            if !obs.degenerate[t] {
                quad[k * frames + t] = chol.inv_quad_form(obs.get(t), &mut scratch);
            }
        }
    }
    Ok(quad)
}

/// Mean log mixture density over non-degenerate slots.
pub fn log_likelihood(obs: &NormalizedObservations, state: &CacgmmState) -> Result<f64> {
    check_state(obs, state)?;
    let (sum, count) = (0..obs.bins)
        .into_par_iter()
        .map(|f| bin_e_step(&obs.bin(f), &state.bin_params(f)).map(|p| (p.loglik_sum, p.valid)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold((0.0, 0usize), |(s, c), (a, b)| (s + a, c + b));
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Per-slot symmetric Dirichlet(1) masks drawn in t-major slot order.
pub fn random_masks(classes: usize, frames: usize, bins: usize, seed: u64) -> MaskSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; classes * frames * bins];
    let mut draw = vec![0.0; classes];
    for t in 0..frames {
        for f in 0..bins {
            for d in draw.iter_mut() {
                let e: f64 = Exp1.sample(&mut rng);
                *d = e.max(f64::MIN_POSITIVE);
            }
            let sum: f64 = draw.iter().sum();
            for (k, d) in draw.iter().enumerate() {
                values[(k * frames + t) * bins + f] = d / sum;
            }
        }
    }
    MaskSet::from_raw(values, classes, frames, bins, MaskStage::Raw).expect("shape is consistent")
}

#[derive(Debug, Clone)]
pub enum Initialization {
    /// Symmetric Dirichlet(1) masks from the given seed.
    Random { seed: u64 },
    /// Start from existing masks, e.g. the student's k-means output.
    Masks(MaskSet),
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub state: CacgmmState,
    pub masks: MaskSet,
    /// Mean log-likelihood after each M-step.
    pub loglik_trace: Vec<f64>,
}

/// Fits a `classes`-component cACGMM to every frequency bin of `y`.
///
/// Starts with an M-step on the initial masks (identity shapes as the
/// reweighting reference), then alternates E and M steps. The returned
/// masks are the posteriors under the final parameters.
pub fn em_fit(y: &MultichannelStft, classes: usize, init: Initialization, iterations: usize) -> Result<EmFit> {
    em_fit_with(y, classes, init, iterations, |_, _| {})
}

/// Like [`em_fit`], calling `observe(iteration, masks)` with the posteriors
/// after every E-step.
pub fn em_fit_with(
    y: &MultichannelStft,
    classes: usize,
    init: Initialization,
    iterations: usize,
    mut observe: impl FnMut(usize, &MaskSet),
) -> Result<EmFit> {
    if classes < 2 {
        return Err(Error::InvalidArgument("the mixture needs at least two classes".into()));
    }
    if iterations == 0 {
        return Err(Error::InvalidArgument("at least one EM iteration is required".into()));
    }
    if classes > y.frames() {
        return Err(Error::InvalidArgument(format!(
            "{classes} classes cannot be estimated from {} frames",
            y.frames()
        )));
    }
    let obs = normalize_observations(y);
    let init_masks = match init {
        Initialization::Random { seed } => random_masks(classes, obs.frames, obs.bins, seed),
        Initialization::Masks(m) => {
            check_masks(&obs, &m)?;
            if m.classes() != classes {
                return Err(Error::Shape(format!(
                    "initial masks have {} classes, expected {classes}",
                    m.classes()
                )));
            }
            m
        }
    };

    let mut params: Vec<BinParams> = vec![
        BinParams {
            weights: vec![1.0 / classes as f64; classes],
            shapes: vec![CMatrix::identity(obs.channels); classes],
        };
        obs.bins
    ];
    let mut gammas: Vec<Vec<f64>> = (0..obs.bins).map(|f| bin_gamma(&init_masks, f)).collect();
    let mut quads: Vec<Vec<f64>> = vec![vec![1.0; classes * obs.frames]; obs.bins];
    let mut trace = Vec::with_capacity(iterations);

    for it in 0..iterations {
        let results = (0..obs.bins)
            .into_par_iter()
            .map(|f| {
                let bin = obs.bin(f);
                let next = bin_m_step(&bin, &gammas[f], &quads[f], &params[f]);
                let post = bin_e_step(&bin, &next)?;
                Ok((next, post))
            })
            .collect::<Result<Vec<_>>>()?;
        let (mut sum, mut count) = (0.0, 0usize);
        for (f, (next, post)) in results.into_iter().enumerate() {
            sum += post.loglik_sum;
            count += post.valid;
            params[f] = next;
            gammas[f] = post.gamma;
            quads[f] = post.quad;
        }
        let ll = if count == 0 { 0.0 } else { sum / count as f64 };
        if !ll.is_finite() {
            return Err(Error::Numerical(format!("log-likelihood became {ll} at iteration {it}")));
        }
        trace.push(ll);
        observe(it, &gather_masks(&gammas, classes, obs.frames, MaskStage::Raw));
    }

    Ok(EmFit {
        state: CacgmmState::from_bins(params, classes),
        masks: gather_masks(&gammas, classes, obs.frames, MaskStage::Raw),
        loglik_trace: trace,
    })
}
