//! Invasive SDR on simulated mixtures, speaker-to-class matching and SI-SDR.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::beamform::{apply_beamformer, apply_mask, BeamformerBank};
use crate::error::{Error, Result};
use crate::masks::MaskSet;
use crate::mixsim::MixtureScene;
use crate::stft::{istft, stft, MultichannelStft, StftConfig};

/// Ratios are capped at +100 dB (and floored at -100 dB).
pub const SDR_CAP_DB: f64 = 100.0;
pub const MAX_PERMUTATION_CLASSES: usize = 4;
const MAX_ASSIGNMENT_CLASSES: usize = 8;

/// `10 log10(num / den)` with `den` floored at `1e-10 num`.
fn power_ratio_db(num: f64, den: f64) -> Result<f64> {
    if !(num > 0.0) {
        return Err(Error::InvalidArgument("target power is zero".into()));
    }
    Ok((10.0 * (num / den.max(num * 1e-10)).log10()).min(SDR_CAP_DB))
}

fn energy(x: &MultichannelStft) -> f64 {
    x.values().iter().map(|z| z.norm_sqr()).sum()
}

/// Mask applied separately to the target image and to the interference
/// (other images plus noise) at channel `reference`.
pub fn invasive_sdr_mask(
    mask: &[f64],
    target: &MultichannelStft,
    interference: &MultichannelStft,
    reference: usize,
) -> Result<f64> {
    target.check_same_shape(interference)?;
    let num = energy(&apply_mask(mask, target, reference)?);
    let den = energy(&apply_mask(mask, interference, reference)?);
    power_ratio_db(num, den)
}

/// Beamformer (`F x D`) applied separately to target and interference.
pub fn invasive_sdr_bf(w: &[crate::C64], target: &MultichannelStft, interference: &MultichannelStft) -> Result<f64> {
    target.check_same_shape(interference)?;
    if w.iter().all(|z| z.norm_sqr() == 0.0) {
        return Err(Error::InvalidArgument("beamformer is identically zero".into()));
    }
    let num = energy(&apply_beamformer(w, target)?);
    let den = energy(&apply_beamformer(w, interference)?);
    power_ratio_db(num, den)
}

/// Assignment of speakers (rows) to distinct classes (columns) maximizing
/// the summed score. `result.0[s]` is the class of speaker `s`.
pub fn best_assignment(scores: &[Vec<f64>]) -> Result<(Vec<usize>, Vec<f64>)> {
    let rows = scores.len();
    let cols = scores.first().map(Vec::len).unwrap_or(0);
    if rows == 0 || scores.iter().any(|r| r.len() != cols) || cols < rows {
        return Err(Error::Shape(format!("cannot match {rows} speakers to {cols} classes")));
    }
    if cols > MAX_ASSIGNMENT_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "exhaustive matching limited to {MAX_ASSIGNMENT_CLASSES} classes"
        )));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..cols).permutations(rows) {
        let total: f64 = perm.iter().enumerate().map(|(s, &c)| scores[s][c]).sum();
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, perm));
        }
    }
    let (_, perm) = best.expect("at least one assignment");
    let values = perm.iter().enumerate().map(|(s, &c)| scores[s][c]).collect();
    Ok((perm, values))
}

/// Exhaustive best permutation of a square score matrix, `K <= 4`.
pub fn best_permutation(scores: &[Vec<f64>]) -> Result<(Vec<usize>, Vec<f64>)> {
    let k = scores.len();
    if scores.iter().any(|r| r.len() != k) {
        return Err(Error::Shape("score matrix must be square".into()));
    }
    if k > MAX_PERMUTATION_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "permutation search limited to {MAX_PERMUTATION_CLASSES} classes, got {k}"
        )));
    }
    best_assignment(scores)
}

/// Scale-invariant SDR in dB, capped at +-100 dB.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let ref_energy: f64 = reference.iter().map(|v| v * v).sum();
    if !(ref_energy > 0.0) {
        return Err(Error::InvalidArgument("reference signal is silent".into()));
    }
    let alpha = estimate.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / ref_energy;
    let target = alpha * alpha * ref_energy;
    let residual: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| (e - alpha * r).powi(2))
        .sum();
    if !(target > 0.0) {
        return Ok(-SDR_CAP_DB);
    }
    Ok(power_ratio_db(target, residual)?.max(-SDR_CAP_DB))
}

/// Ground-truth STFTs of one simulated mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneStfts {
    pub images: Vec<MultichannelStft>,
    pub noise: MultichannelStft,
    pub num_samples: usize,
}

impl SceneStfts {
    pub fn new(images: Vec<MultichannelStft>, noise: MultichannelStft, num_samples: usize) -> Result<Self> {
        for img in &images {
            img.check_same_shape(&noise)?;
        }
        if images.is_empty() {
            return Err(Error::InvalidArgument("no source images".into()));
        }
        Ok(Self {
            images,
            noise,
            num_samples,
        })
    }

    pub fn from_scene(scene: &MixtureScene, config: StftConfig) -> Result<Self> {
        let images = scene
            .source_images
            .iter()
            .map(|img| stft(img, config))
            .collect::<Result<Vec<_>>>()?;
        Self::new(images, stft(&scene.noise_image, config)?, scene.observation.num_samples())
    }

    /// Everything except source `k`.
    pub fn interference(&self, k: usize) -> Result<MultichannelStft> {
        let mut acc = self.noise.clone();
        for (j, img) in self.images.iter().enumerate() {
            if j != k {
                acc = acc.add(img)?;
            }
        }
        Ok(acc)
    }

    pub fn observation(&self) -> Result<MultichannelStft> {
        self.interference(usize::MAX)
    }
}

/// How the separated signals were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractionMode {
    Mask,
    Mvdr,
}

pub enum Extraction<'a> {
    Mask { masks: &'a MaskSet, reference: usize },
    Mvdr(&'a BeamformerBank),
    /// Every class is the unprocessed reference channel.
    PassThrough { classes: usize, reference: usize },
}

impl Extraction<'_> {
    pub fn mode(&self) -> ExtractionMode {
        match self {
            Extraction::Mask { .. } | Extraction::PassThrough { .. } => ExtractionMode::Mask,
            Extraction::Mvdr(_) => ExtractionMode::Mvdr,
        }
    }

    fn classes(&self) -> usize {
        match self {
            Extraction::Mask { masks, .. } => masks.classes(),
            Extraction::Mvdr(bank) => bank.classes(),
            Extraction::PassThrough { classes, .. } => *classes,
        }
    }

    fn input_reference(&self) -> usize {
        match self {
            Extraction::Mask { reference, .. } | Extraction::PassThrough { reference, .. } => *reference,
            Extraction::Mvdr(_) => 0,
        }
    }

    fn separate(&self, k: usize, signal: &MultichannelStft) -> Result<MultichannelStft> {
        match self {
            Extraction::Mask { masks, reference } => apply_mask(masks.class_mask(k), signal, *reference),
            Extraction::Mvdr(bank) => apply_beamformer(bank.class_weights(k), signal),
            Extraction::PassThrough { reference, .. } => signal.select_channel(*reference),
        }
    }

    fn sdr(&self, k: usize, target: &MultichannelStft, interference: &MultichannelStft) -> Result<f64> {
        match self {
            Extraction::Mask { masks, reference } => invasive_sdr_mask(masks.class_mask(k), target, interference, *reference),
            Extraction::Mvdr(bank) => invasive_sdr_bf(bank.class_weights(k), target, interference),
            Extraction::PassThrough { reference, .. } => {
                invasive_sdr_mask(&vec![1.0; target.frames() * target.bins()], target, interference, *reference)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerScore {
    pub speaker: usize,
    pub class: usize,
    pub input_sdr_db: f64,
    pub output_sdr_db: f64,
    pub gain_db: f64,
    pub si_sdr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub id: String,
    pub input_sdr_db: f64,
    pub output_sdr_db: f64,
    pub gain_db: f64,
    /// Class chosen for each speaker.
    pub permutation: Vec<usize>,
    pub speakers: Vec<SpeakerScore>,
}

/// Invasive SDR of every speaker against every class, matched by the best
/// injective speaker-to-class assignment.
pub fn evaluate_mixture(id: &str, scene: &SceneStfts, extraction: &Extraction<'_>, with_si_sdr: bool) -> Result<EvalEntry> {
    let speakers = scene.images.len();
    let classes = extraction.classes();
    let interference: Vec<MultichannelStft> = (0..speakers).map(|s| scene.interference(s)).collect::<Result<_>>()?;
    let ones = vec![1.0; scene.noise.frames() * scene.noise.bins()];
    let reference = extraction.input_reference();
    let mut scores = vec![vec![0.0; classes]; speakers];
    for s in 0..speakers {
        for (c, score) in scores[s].iter_mut().enumerate() {
            *score = match extraction.sdr(c, &scene.images[s], &interference[s]) {
                Ok(v) => v,
                Err(Error::InvalidArgument(_)) => -SDR_CAP_DB,
                Err(e) => return Err(e),
            };
        }
    }
    let (perm, outputs) = best_assignment(&scores)?;
    let observation = if with_si_sdr { Some(scene.observation()?) } else { None };
    let details = (0..speakers)
        .map(|s| {
            let input = invasive_sdr_mask(&ones, &scene.images[s], &interference[s], reference)?;
            let si = match &observation {
                Some(obs) => {
                    let est = istft(&extraction.separate(perm[s], obs)?, scene.num_samples)?;
                    let reference_signal = istft(&scene.images[s].select_channel(reference)?, scene.num_samples)?;
                    Some(si_sdr(est.channel(0), reference_signal.channel(0))?)
                }
                None => None,
            };
            Ok(SpeakerScore {
                speaker: s,
                class: perm[s],
                input_sdr_db: input,
                output_sdr_db: outputs[s],
                gain_db: outputs[s] - input,
                si_sdr_db: si,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = |f: fn(&SpeakerScore) -> f64| details.iter().map(f).sum::<f64>() / speakers as f64;
    let input_sdr_db = mean(|d| d.input_sdr_db);
    let output_sdr_db = mean(|d| d.output_sdr_db);
    Ok(EvalEntry {
        id: id.to_string(),
        input_sdr_db,
        output_sdr_db,
        gain_db: output_sdr_db - input_sdr_db,
        permutation: perm,
        speakers: details,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics; NaN for an empty slice.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excluded {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: ExtractionMode,
    pub count: usize,
    pub input_sdr_db: MeanStd,
    pub output_sdr_db: MeanStd,
    pub gain_db: MeanStd,
    pub entries: Vec<EvalEntry>,
    pub excluded: Vec<Excluded>,
}

impl EvalReport {
    pub fn from_results(mode: ExtractionMode, results: Vec<(String, Result<EvalEntry>)>) -> Self {
        let mut entries = Vec::new();
        let mut excluded = Vec::new();
        for (id, r) in results {
            match r {
                Ok(e) => entries.push(e),
                Err(e) => {
                    log::warn!("{id}: excluded from evaluation: {e}");
                    excluded.push(Excluded { id, reason: e.to_string() })
                }
            }
        }
        let column = |f: fn(&EvalEntry) -> f64| MeanStd::of(&entries.iter().map(f).collect::<Vec<_>>());
        Self {
            mode,
            count: entries.len(),
            input_sdr_db: column(|e| e.input_sdr_db),
            output_sdr_db: column(|e| e.output_sdr_db),
            gain_db: column(|e| e.gain_db),
            entries,
            excluded,
        }
    }

    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::tensor_io::write_atomic(path.as_ref(), |file| Ok(serde_json::to_writer_pretty(file, self)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::C64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(values: Vec<C64>, frames: usize, channels: usize) -> MultichannelStft {
        let bins = values.len() / frames / channels;
        MultichannelStft::from_parts(values, frames, channels, 8000, StftConfig::new(2 * (bins - 1), 1).unwrap()).unwrap()
    }

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn hand_computed_mask_sdr() {
        // 2 frames x 2 bins, one channel.
        let target = single(vec![c(1.0), c(2.0), c(0.0), c(1.0)], 2, 1);
        let inter = single(vec![c(0.5), c(0.0), c(1.0), c(1.0)], 2, 1);
        let mask = [1.0, 0.5, 0.0, 1.0];
        // target: 1 + (0.5*2)^2 + 0 + 1 = 3; interference: 0.25 + 0 + 0 + 1 = 1.25
        let expect = 10.0 * (3.0f64 / 1.25).log10();
        assert!((invasive_sdr_mask(&mask, &target, &inter, 0).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn disjoint_support_is_capped() {
        let target = single(vec![c(1.0), c(0.0), c(2.0), c(0.0)], 2, 1);
        let inter = single(vec![c(0.0), c(3.0), c(0.0), c(1.0)], 2, 1);
        let mask = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(invasive_sdr_mask(&mask, &target, &inter, 0).unwrap(), SDR_CAP_DB);
    }

    #[test]
    fn silent_target_is_an_error() {
        let target = single(vec![c(0.0); 4], 2, 1);
        let inter = single(vec![c(1.0); 4], 2, 1);
        assert!(invasive_sdr_mask(&[1.0; 4], &target, &inter, 0).is_err());
    }

    #[test]
    fn beamformer_sdr_is_scale_invariant_and_selector_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rand_stft = || single((0..3 * 2 * 2).map(|_| C64::new(rng.random(), rng.random())).collect(), 3, 2);
        let target = rand_stft();
        let inter = rand_stft();
        let w: Vec<C64> = vec![C64::new(0.3, -0.2), C64::new(1.0, 0.5), C64::new(-0.7, 0.1), C64::new(0.2, 0.2)];
        let scaled: Vec<C64> = w.iter().map(|z| z * C64::new(-2.0, 3.0)).collect();
        let a = invasive_sdr_bf(&w, &target, &inter).unwrap();
        let b = invasive_sdr_bf(&scaled, &target, &inter).unwrap();
        assert!((a - b).abs() < 1e-9);
        let selector = vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(1.0, 0.0), C64::new(0.0, 0.0)];
        let input = invasive_sdr_mask(&[1.0; 6], &target, &inter, 0).unwrap();
        assert!((invasive_sdr_bf(&selector, &target, &inter).unwrap() - input).abs() < 1e-9);
        assert!(invasive_sdr_bf(&[C64::new(0.0, 0.0); 4], &target, &inter).is_err());
    }

    #[test]
    fn null_steering_beats_the_reference_channel() {
        // Anechoic two-sensor toy: interferer arrives with steering (1, -1).
        let frames = 50;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut target = Vec::new();
        let mut inter = Vec::new();
        for _ in 0..frames {
            for _ in 0..2 {
                let s = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let i = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let n0 = C64::new(rng.random_range(-0.01..0.01), 0.0);
                let n1 = C64::new(rng.random_range(-0.01..0.01), 0.0);
                target.extend([s, s]);
                inter.extend([i + n0, -i + n1]);
            }
        }
        let target = single(target, frames, 2);
        let inter = single(inter, frames, 2);
        let null = vec![C64::new(0.5, 0.0); 4];
        let selector = vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(1.0, 0.0), C64::new(0.0, 0.0)];
        assert!(invasive_sdr_bf(&null, &target, &inter).unwrap() > invasive_sdr_bf(&selector, &target, &inter).unwrap() + 20.0);
    }

    #[test]
    fn permutations() {
        let diag = vec![vec![10.0, 1.0], vec![2.0, 9.0]];
        assert_eq!(best_permutation(&diag).unwrap().0, vec![0, 1]);
        let anti = vec![vec![1.0, 10.0], vec![9.0, 2.0]];
        assert_eq!(best_permutation(&anti).unwrap(), (vec![1, 0], vec![10.0, 9.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let (p, v) = best_permutation(&m).unwrap();
        let best = (0..3)
            .permutations(3)
            .map(|q| (0..3).map(|s| m[s][q[s]]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(v.iter().sum::<f64>(), best);
        assert_eq!((0..3).map(|s| m[s][p[s]]).sum::<f64>(), best);
        assert!(best_permutation(&vec![vec![0.0; 5]; 5]).is_err());
        let rect = vec![vec![1.0, 5.0, 2.0], vec![0.0, 6.0, 3.0]];
        // (1, 2) and (2, 1) tie at 8; the first in lexicographic order wins.
        assert_eq!(best_assignment(&rect).unwrap().0, vec![1, 2]);
    }

    #[test]
    fn si_sdr_cases() {
        let r: Vec<f64> = (0..64).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        assert_eq!(si_sdr(&r, &r).unwrap(), SDR_CAP_DB);
        let twice: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&twice, &r).unwrap(), SDR_CAP_DB);
        // Orthogonal noise of equal power: alternate signs over pairs.
        let a = [1.0, 1.0, 1.0, 1.0];
        let n = [1.0, -1.0, 1.0, -1.0];
        let e: Vec<f64> = a.iter().zip(&n).map(|(x, y)| x + y).collect();
        assert!(si_sdr(&e, &a).unwrap().abs() < 1e-12);
        assert!(si_sdr(&a, &[0.0; 4]).is_err());
    }

    #[test]
    fn pass_through_has_zero_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rand_stft = || single((0..4 * 3 * 2).map(|_| C64::new(rng.random(), rng.random())).collect(), 4, 2);
        let scene = SceneStfts::new(vec![rand_stft(), rand_stft()], rand_stft(), 1).unwrap();
        let entry = evaluate_mixture("m", &scene, &Extraction::PassThrough { classes: 3, reference: 1 }, true).unwrap();
        for s in &entry.speakers {
            assert!(s.gain_db.abs() < 1e-9);
        }
        let report = EvalReport::from_results(
            ExtractionMode::Mask,
            vec![("m".into(), Ok(entry)), ("bad".into(), Err(Error::Config("missing".into())))],
        );
        assert_eq!(report.count, 1);
        assert_eq!(report.excluded.len(), 1);
        assert!(report.gain_db.mean.abs() < 1e-9);
    }
}
