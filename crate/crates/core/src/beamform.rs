//! Mask-driven spatial covariance estimation and Souden MVDR beamforming.

use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::masks::MaskSet;
use crate::stft::MultichannelStft;
use crate::C64;

pub const INTER_RIDGE: f64 = 1e-8;
pub const LAMBDA_FLOOR: f64 = 1e-10;
const TIE_TOL: f64 = 1e-12;

/// Mask-weighted spatial covariance per frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdEstimate {
    pub matrices: Vec<CMatrix>,
    /// Bins where the mask had no weight and the unweighted average was used.
    pub fallback_bins: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsdPair {
    pub target: PsdEstimate,
    pub inter: PsdEstimate,
}

/// `sum_t m_tf y_tf y_tf^H / sum_t m_tf` for every bin; `mask` is `T x F`.
pub fn estimate_psd(y: &MultichannelStft, mask: &[f64]) -> Result<PsdEstimate> {
    let (frames, bins, dim) = (y.frames(), y.bins(), y.channels());
    if mask.len() != frames * bins {
        return Err(Error::Shape(format!("{} mask values for {frames}x{bins} slots", mask.len())));
    }
    if mask.iter().any(|m| !(0.0..=1.0).contains(m)) {
        return Err(Error::InvalidArgument("mask values must lie in [0, 1]".into()));
    }
    let mut matrices = Vec::with_capacity(bins);
    let mut fallback_bins = Vec::new();
    for f in 0..bins {
        let total: f64 = (0..frames).map(|t| mask[t * bins + f]).sum();
        let uniform = total <= 0.0;
        if uniform {
            fallback_bins.push(f);
        }
        let mut phi = CMatrix::zeros(dim);
        for t in 0..frames {
            let w = if uniform { 1.0 } else { mask[t * bins + f] };
            if w > 0.0 {
                phi.rank1_update_lower(w, y.slot(t, f));
            }
        }
        phi.mirror_lower();
        phi.scale(1.0 / if uniform { frames as f64 } else { total });
        phi.hermitize();
        matrices.push(phi);
    }
    if !fallback_bins.is_empty() {
        log::warn!("mask is empty at {} bins; using unweighted covariance there", fallback_bins.len());
    }
    Ok(PsdEstimate { matrices, fallback_bins })
}

/// Pointwise complement `1 - M` of class `k`.
pub fn interference_mask(masks: &MaskSet, k: usize) -> Vec<f64> {
    masks.class_mask(k).iter().map(|m| (1.0 - m).clamp(0.0, 1.0)).collect()
}

pub fn estimate_psd_pair(y: &MultichannelStft, masks: &MaskSet, k: usize) -> Result<PsdPair> {
    if masks.frames() != y.frames() || masks.bins() != y.bins() {
        return Err(Error::Shape("masks and STFT disagree in shape".into()));
    }
    Ok(PsdPair {
        target: estimate_psd(y, masks.class_mask(k))?,
        inter: estimate_psd(y, &interference_mask(masks, k))?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvdrVector {
    pub w: Vec<C64>,
    /// `trace(inv(Phi_inter) Phi_target)` fell below the floor; `w` is zero.
    pub degenerate: bool,
}

/// `w = inv(Phi_inter) Phi_target u_ref / trace(inv(Phi_inter) Phi_target)`.
pub fn mvdr_souden(phi_target: &CMatrix, phi_inter: &CMatrix, reference: usize) -> Result<MvdrVector> {
    let dim = phi_target.dim();
    if phi_inter.dim() != dim {
        return Err(Error::Shape("target and interference covariances differ in size".into()));
    }
    if reference >= dim {
        return Err(Error::InvalidArgument(format!("reference {reference} out of range for {dim} channels")));
    }
    let mut inter = phi_inter.clone();
    inter.add_diagonal(INTER_RIDGE * inter.trace().re.max(0.0) / dim as f64);
    let chol = inter
        .cholesky()
        .ok_or_else(|| Error::Numerical("interference covariance is not positive definite".into()))?;
    let phi = chol.solve_matrix(phi_target);
    let lambda = phi.trace().re;
    if !(lambda > LAMBDA_FLOOR) {
        log::debug!("degenerate target covariance (lambda = {lambda:e})");
        return Ok(MvdrVector {
            w: vec![C64::new(0.0, 0.0); dim],
            degenerate: true,
        });
    }
    Ok(MvdrVector {
        w: phi.column(reference).into_iter().map(|z| z / lambda).collect(),
        degenerate: false,
    })
}

fn power(w: &[C64], phi: &CMatrix) -> f64 {
    let pw = phi.matvec(w);
    w.iter().zip(&pw).map(|(a, b)| (a.conj() * b).re).sum()
}

fn beamformers_for_reference(pair: &PsdPair, reference: usize) -> Result<Vec<MvdrVector>> {
    pair.target
        .matrices
        .iter()
        .zip(&pair.inter.matrices)
        .map(|(t, i)| mvdr_souden(t, i, reference))
        .collect()
}

/// Expected output SNR `sum_f w^H Phi_t w / sum_f w^H Phi_i w` for every
/// candidate reference; returns the argmax (ties to the lowest index) and
/// the beamformers built for it.
pub fn select_reference(pair: &PsdPair) -> Result<(usize, Vec<MvdrVector>, Vec<f64>)> {
    let dim = pair.target.matrices.first().map(CMatrix::dim).unwrap_or(0);
    if dim == 0 {
        return Err(Error::Shape("no covariance matrices".into()));
    }
    let mut best: Option<(usize, Vec<MvdrVector>)> = None;
    let mut best_snr = f64::NEG_INFINITY;
    let mut snrs = Vec::with_capacity(dim);
    for r in 0..dim {
        let ws = beamformers_for_reference(pair, r)?;
        let (num, den) = ws
            .iter()
            .zip(pair.target.matrices.iter().zip(&pair.inter.matrices))
            .fold((0.0, 0.0), |(n, d), (w, (t, i))| (n + power(&w.w, t), d + power(&w.w, i)));
        let snr = if den > 0.0 {
            num / den
        } else if num > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        snrs.push(snr);
        if best.is_none() || snr > best_snr * (1.0 + TIE_TOL) {
            best_snr = snr;
            best = Some((r, ws));
        }
    }
    let (r, ws) = best.expect("at least one channel");
    Ok((r, ws, snrs))
}

/// Time-invariant beamformers `K x F x D` with one reference channel per class.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerBank {
    weights: Vec<C64>,
    classes: usize,
    bins: usize,
    channels: usize,
    reference: Vec<usize>,
    degenerate_bins: Vec<Vec<usize>>,
}

impl BeamformerBank {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reference(&self, k: usize) -> usize {
        self.reference[k]
    }

    /// Beamformer of class `k`, `F x D`.
    pub fn class_weights(&self, k: usize) -> &[C64] {
        let n = self.bins * self.channels;
        &self.weights[k * n..(k + 1) * n]
    }

    pub fn degenerate_bins(&self, k: usize) -> &[usize] {
        &self.degenerate_bins[k]
    }
}

/// MVDR beamformer for every mask class, each with its own reference.
pub fn build_beamformers(y: &MultichannelStft, masks: &MaskSet) -> Result<BeamformerBank> {
    let mut weights = Vec::with_capacity(masks.classes() * y.bins() * y.channels());
    let mut reference = Vec::new();
    let mut degenerate_bins = Vec::new();
    for k in 0..masks.classes() {
        let pair = estimate_psd_pair(y, masks, k)?;
        let (r, ws, _) = select_reference(&pair)?;
        reference.push(r);
        degenerate_bins.push(ws.iter().enumerate().filter(|(_, w)| w.degenerate).map(|(f, _)| f).collect());
        weights.extend(ws.into_iter().flat_map(|w| w.w));
    }
    Ok(BeamformerBank {
        weights,
        classes: masks.classes(),
        bins: y.bins(),
        channels: y.channels(),
        reference,
        degenerate_bins,
    })
}

/// `z_tf = w_f^H y_tf`; `w` is `F x D`.
pub fn apply_beamformer(w: &[C64], y: &MultichannelStft) -> Result<MultichannelStft> {
    let (frames, bins, dim) = (y.frames(), y.bins(), y.channels());
    if w.len() != bins * dim {
        return Err(Error::Shape(format!("{} weights for {bins} bins x {dim} channels", w.len())));
    }
    let mut values = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        for f in 0..bins {
            let wf = &w[f * dim..(f + 1) * dim];
            values.push(wf.iter().zip(y.slot(t, f)).map(|(a, b)| a.conj() * b).sum());
        }
    }
    MultichannelStft::from_parts(values, frames, 1, y.sample_rate(), y.config())
}

/// `M_tf * Y_tf,ref`; `mask` is `T x F`.
pub fn apply_mask(mask: &[f64], y: &MultichannelStft, reference: usize) -> Result<MultichannelStft> {
    let (frames, bins) = (y.frames(), y.bins());
    if mask.len() != frames * bins {
        return Err(Error::Shape(format!("{} mask values for {frames}x{bins} slots", mask.len())));
    }
    if reference >= y.channels() {
        return Err(Error::InvalidArgument(format!("reference channel {reference} out of range")));
    }
    let values = (0..frames * bins)
        .map(|n| y.get(n / bins, n % bins, reference) * mask[n])
        .collect();
    MultichannelStft::from_parts(values, frames, 1, y.sample_rate(), y.config())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::StftConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_stft(frames: usize, bins: usize, dim: usize, seed: u64) -> MultichannelStft {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..frames * bins * dim)
            .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        MultichannelStft::from_parts(values, frames, dim, 8000, StftConfig::new(2 * (bins - 1), 1).unwrap()).unwrap()
    }

    #[test]
    fn closed_form_rank_one() {
        let d = [c(1.0, 0.0), c(0.0, 1.0)];
        let target = CMatrix::outer(&d);
        for sigma2 in [0.01, 1.0, 30.0] {
            let mut inter = CMatrix::identity(2);
            inter.scale(sigma2);
            let w = mvdr_souden(&target, &inter, 0).unwrap().w;
            assert!((w[0] - c(0.5, 0.0)).norm() < 1e-10);
            assert!((w[1] - c(0.0, 0.5)).norm() < 1e-10);
            let resp: C64 = w.iter().zip(&d).map(|(a, b)| a.conj() * b).sum();
            assert!((resp - d[0]).norm() < 1e-10);
        }
    }

    #[test]
    fn target_scaling_is_harmless() {
        let y = random_stft(20, 3, 3, 1);
        let est = estimate_psd(&y, &vec![1.0; 60]).unwrap();
        let mut scaled = est.matrices[1].clone();
        scaled.scale(4.2);
        let inter = &est.matrices[2];
        let a = mvdr_souden(&est.matrices[1], inter, 1).unwrap().w;
        let b = mvdr_souden(&scaled, inter, 1).unwrap().w;
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).norm() < 1e-10);
        }
    }

    #[test]
    fn zero_target_is_degenerate() {
        let r = mvdr_souden(&CMatrix::zeros(2), &CMatrix::identity(2), 0).unwrap();
        assert!(r.degenerate);
        assert!(r.w.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn psd_matches_double_loop() {
        let (frames, bins, dim) = (6, 3, 2);
        let y = random_stft(frames, bins, dim, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask: Vec<f64> = (0..frames * bins).map(|_| rng.random_range(0.0..1.0)).collect();
        let est = estimate_psd(&y, &mask).unwrap();
        for f in 0..bins {
            let total: f64 = (0..frames).map(|t| mask[t * bins + f]).sum();
            for i in 0..dim {
                for j in 0..dim {
                    let mut acc = c(0.0, 0.0);
                    for t in 0..frames {
                        acc += y.get(t, f, i) * y.get(t, f, j).conj() * mask[t * bins + f];
                    }
                    assert!((est.matrices[f][(i, j)] - acc / total).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_frame_and_empty_masks() {
        let y = random_stft(4, 2, 2, 4);
        let mut mask = vec![0.0; 8];
        mask[2 * 2] = 1.0;
        let est = estimate_psd(&y, &mask).unwrap();
        let expect = CMatrix::outer(y.slot(2, 0));
        for (a, b) in est.matrices[0].as_slice().iter().zip(expect.as_slice()) {
            assert!((a - b).norm() < 1e-12);
        }
        assert_eq!(est.fallback_bins, vec![1]);
    }

    #[test]
    fn complement_masks() {
        let m = MaskSet::new(vec![1.0, 0.3, 0.0, 0.7], 2, 1, 2, crate::masks::MaskStage::Final).unwrap();
        assert_eq!(interference_mask(&m, 0), vec![0.0, 0.7]);
        assert!((interference_mask(&m, 1)[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn reference_selection() {
        // Target attenuated on the second sensor.
        let d = [c(1.0, 0.0), c(0.1, 0.0)];
        let pair = PsdPair {
            target: PsdEstimate {
                matrices: vec![CMatrix::outer(&d); 3],
                fallback_bins: vec![],
            },
            inter: PsdEstimate {
                matrices: vec![CMatrix::identity(2); 3],
                fallback_bins: vec![],
            },
        };
        assert_eq!(select_reference(&pair).unwrap().0, 0);
        let sym = PsdPair {
            target: PsdEstimate {
                matrices: vec![CMatrix::identity(2)],
                fallback_bins: vec![],
            },
            inter: pair.inter.clone(),
        };
        assert_eq!(select_reference(&sym).unwrap().0, 0);
        let mono = PsdPair {
            target: PsdEstimate {
                matrices: vec![CMatrix::identity(1)],
                fallback_bins: vec![],
            },
            inter: PsdEstimate {
                matrices: vec![CMatrix::identity(1)],
                fallback_bins: vec![],
            },
        };
        assert_eq!(select_reference(&mono).unwrap().0, 0);
    }

    #[test]
    fn selector_and_masks() {
        let y = random_stft(5, 3, 2, 5);
        let mut w = vec![c(0.0, 0.0); 6];
        for f in 0..3 {
            w[f * 2] = c(1.0, 0.0);
        }
        let z = apply_beamformer(&w, &y).unwrap();
        let y0 = y.select_channel(0).unwrap();
        assert_eq!(z.values(), y0.values());
        let zero = apply_beamformer(&[c(0.0, 0.0); 6], &y).unwrap();
        assert!(zero.values().iter().all(|v| v.norm() == 0.0));
        let ones = apply_mask(&[1.0; 15], &y, 1).unwrap();
        assert_eq!(ones.values(), y.select_channel(1).unwrap().values());
        let checker: Vec<f64> = (0..15).map(|n| (n % 2) as f64).collect();
        let sel = apply_mask(&checker, &y, 0).unwrap();
        for n in 0..15 {
            let expect = if n % 2 == 1 { y0.values()[n] } else { c(0.0, 0.0) };
            assert_eq!(sel.values()[n], expect);
        }
    }

    #[test]
    fn bank_shapes() {
        let y = random_stft(10, 3, 3, 6);
        let masks = crate::cacgmm::random_masks(2, 10, 3, 1);
        let bank = build_beamformers(&y, &masks).unwrap();
        assert_eq!(bank.class_weights(1).len(), 9);
        assert!(bank.reference(0) < 3);
        assert!(bank.class_weights(0).iter().all(|z| z.is_finite()));
    }
}
