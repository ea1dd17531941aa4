//! Shoebox-room image-method simulator producing reverberant multichannel
//! mixtures together with their per-source images and noise image.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{read_wav, write_wav, AudioBuffer, WavEncoding};
use crate::C64;

pub type Vec3 = [f64; 3];

/// Half-width of the fractional-delay kernel (81 taps in total).
const KERNEL_HALF: isize = 40;

/// Cutoff of the high-pass applied to every impulse response.
const HIGHPASS_HZ: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub dimensions: Vec3,
    pub t60: f64,
    pub speed_of_sound: f64,
    pub sample_rate: u32,
}

impl RoomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dimensions.iter().any(|&l| !(l > 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "room dimensions must exceed 1 m, got {:?}",
                self.dimensions
            )));
        }
        if !(self.t60 > 0.0) || !(self.speed_of_sound > 0.0) || self.sample_rate == 0 {
            return Err(Error::InvalidArgument("t60, speed of sound and sample rate must be positive".into()));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.dimensions.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dimensions;
        2.0 * (x * y + x * z + y * z)
    }

    /// Eyring's reflection coefficient (pressure) for uniform absorption.
    pub fn eyring_reflection_coefficient(&self) -> f64 {
        let k = 24.0 * 10f64.ln() / self.speed_of_sound;
        // ln(1 - alpha) = -k V / (S T60), beta = sqrt(1 - alpha)
        (-0.5 * k * self.volume() / (self.surface() * self.t60)).exp()
    }

    /// Uniform wall reflection coefficient (pressure) whose image-model
    /// energy envelope decays by 60 dB in `t60`, measured like a T20: line
    /// fit to the Schroeder curve between -5 and -25 dB.
    ///
    /// A ray along unit direction `u` meets `c * sum_i |u_i| / L_i` walls per
    /// second, so the envelope is the direction average of
    /// `exp(-g * rate(u) * t)` with `g = -2 c ln(beta)`. The fitted decay time
    /// scales as `1 / g`, so one evaluation at `g = 1` fixes `beta`.
    pub fn reflection_coefficient(&self) -> f64 {
        let tau = unit_envelope_decay_time(&self.dimensions);
        (-tau / (2.0 * self.speed_of_sound * self.t60)).exp()
    }

    /// RIR length used by [`render_scene`].
    pub fn rir_length(&self) -> usize {
        (self.t60 * self.sample_rate as f64 * 1.2).ceil() as usize
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        p.iter().zip(&self.dimensions).all(|(&c, &l)| c > 0.0 && c < l)
    }
}

/// T20-extrapolated decay time of the direction-averaged envelope
/// `exp(-rate(u) * t)`, with `rate(u) = sum_i |u_i| / L_i`.
fn unit_envelope_decay_time(dims: &Vec3) -> f64 {
    const DIRECTIONS: usize = 1024;
    const GRID: usize = 400;
    let golden = PI * (3.0 - 5f64.sqrt());
    let rates: Vec<f64> = (0..DIRECTIONS)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / DIRECTIONS as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            (r * phi.cos()).abs() / dims[0] + (r * phi.sin()).abs() / dims[1] + z.abs() / dims[2]
        })
        .collect();
    // Schroeder integral of each exponential in closed form.
    let edc = |t: f64| rates.iter().map(|&q| (-q * t).exp() / q).sum::<f64>();
    let e0 = edc(0.0);
    let db = |t: f64| 10.0 * (edc(t) / e0).log10();
    let mut end = dims.iter().cloned().fold(0.0, f64::max);
    while db(end) > -25.0 {
        end *= 2.0;
    }
    let pts: Vec<(f64, f64)> = (0..=GRID)
        .map(|i| end * i as f64 / GRID as f64)
        .map(|t| (t, db(t)))
        .filter(|&(_, v)| (-25.0..=-5.0).contains(&v))
        .collect();
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mv = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - mv)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    -60.0 * var / cov
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub room: RoomSpec,
    pub array_center: Vec3,
    pub mic_positions: Vec<Vec3>,
    pub source_positions: Vec<Vec3>,
    pub snr_db: f64,
    /// Dry source signals, one mono buffer per source.
    #[serde(skip)]
    pub dry_sources: Vec<AudioBuffer>,
}

impl SceneSpec {
    pub fn num_mics(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn num_sources(&self) -> usize {
        self.source_positions.len()
    }

    /// Smallest azimuth difference between any two sources as seen from the
    /// array center, in degrees.
    pub fn min_source_separation_deg(&self) -> f64 {
        let az: Vec<f64> = self
            .source_positions
            .iter()
            .map(|p| (p[1] - self.array_center[1]).atan2(p[0] - self.array_center[0]))
            .collect();
        let mut best = 180.0f64;
        for i in 0..az.len() {
            for j in i + 1..az.len() {
                let mut d = (az[i] - az[j]).abs().to_degrees() % 360.0;
                if d > 180.0 {
                    d = 360.0 - d;
                }
                best = best.min(d);
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub room_min: Vec3,
    pub room_max: Vec3,
    pub t60_range: [f64; 2],
    pub snr_range: [f64; 2],
    pub mics: usize,
    pub array_radius: f64,
    pub sources: usize,
    pub min_separation_deg: f64,
    /// Minimum distance of array and sources from every wall.
    pub wall_margin: f64,
    pub min_source_distance: f64,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub speed_of_sound: f64,
    pub max_order: usize,
    pub max_attempts: usize,
    /// Directory of WAV files used as dry sources; speech-like signals are
    /// synthesized when absent.
    pub source_dir: Option<PathBuf>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            room_min: [4.0, 4.0, 2.5],
            room_max: [8.0, 8.0, 3.5],
            t60_range: [0.2, 0.5],
            snr_range: [20.0, 30.0],
            mics: 6,
            array_radius: 0.1,
            sources: 2,
            min_separation_deg: 15.0,
            wall_margin: 0.5,
            min_source_distance: 1.0,
            duration_s: 3.2,
            sample_rate: 8000,
            speed_of_sound: 343.0,
            max_order: 10,
            max_attempts: 1000,
            source_dir: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(what));
        for i in 0..3 {
            if !(self.room_min[i] > 1.0 && self.room_min[i] <= self.room_max[i]) {
                return bad(format!("room range on axis {i} is invalid"));
            }
            if self.room_min[i] <= 2.0 * self.wall_margin + if i < 2 { 2.0 * self.array_radius } else { 0.0 } {
                return bad(format!("room axis {i} leaves no space inside the wall margin"));
            }
        }
        if !(self.t60_range[0] > 0.0 && self.t60_range[0] <= self.t60_range[1]) {
            return bad("t60_range".into());
        }
        if self.snr_range[0] > self.snr_range[1] {
            return bad("snr_range".into());
        }
        if self.mics == 0 || self.sources == 0 {
            return bad("need at least one microphone and one source".into());
        }
        if self.mics > 1 && !(self.array_radius > 0.0) {
            return bad("array_radius must be positive".into());
        }
        if !(self.duration_s > 0.0) || self.sample_rate == 0 {
            return bad("duration and sample rate must be positive".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoomImpulseResponse {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
}

impl RoomImpulseResponse {
    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureScene {
    pub observation: AudioBuffer,
    pub source_images: Vec<AudioBuffer>,
    pub noise_image: AudioBuffer,
    pub spec: SceneSpec,
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

fn distance(a: &Vec3, b: &Vec3) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Draws a random scene geometry and dry sources. Deterministic in `seed`.
pub fn sample_scene(seed: u64, cfg: &SimConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = cfg.wall_margin;
    for _ in 0..cfg.max_attempts {
        let dims: Vec3 = std::array::from_fn(|i| uniform(&mut rng, [cfg.room_min[i], cfg.room_max[i]]));
        let room = RoomSpec {
            dimensions: dims,
            t60: uniform(&mut rng, cfg.t60_range),
            speed_of_sound: cfg.speed_of_sound,
            sample_rate: cfg.sample_rate,
        };
        let r = cfg.array_radius;
        let z_range = [m, (dims[2] - m).min(2.0).max(m)];
        let center = [
            uniform(&mut rng, [m + r, dims[0] - m - r]),
            uniform(&mut rng, [m + r, dims[1] - m - r]),
            uniform(&mut rng, z_range),
        ];
        let mics: Vec<Vec3> = (0..cfg.mics)
            .map(|d| {
                let phi = 2.0 * PI * d as f64 / cfg.mics as f64;
                [center[0] + r * phi.cos(), center[1] + r * phi.sin(), center[2]]
            })
            .collect();
        let sources: Vec<Vec3> = (0..cfg.sources)
            .map(|_| {
                [
                    uniform(&mut rng, [m, dims[0] - m]),
                    uniform(&mut rng, [m, dims[1] - m]),
                    uniform(&mut rng, z_range),
                ]
            })
            .collect();
        let snr_db = uniform(&mut rng, cfg.snr_range);
        let spec = SceneSpec {
            seed,
            room,
            array_center: center,
            mic_positions: mics,
            source_positions: sources,
            snr_db,
            dry_sources: Vec::new(),
        };
        let far_enough = spec
            .source_positions
            .iter()
            .all(|s| distance(s, &center) >= cfg.min_source_distance);
        if far_enough && (cfg.sources < 2 || spec.min_source_separation_deg() >= cfg.min_separation_deg) {
            let dry = dry_sources(&mut rng, cfg)?;
            return Ok(SceneSpec { dry_sources: dry, ..spec });
        }
    }
    Err(Error::Geometry {
        attempts: cfg.max_attempts,
        reason: format!(
            "no placement of {} sources {}° apart and {} m from the array",
            cfg.sources, cfg.min_separation_deg, cfg.min_source_distance
        ),
    })
}

fn dry_sources(rng: &mut ChaCha8Rng, cfg: &SimConfig) -> Result<Vec<AudioBuffer>> {
    let n = cfg.num_samples();
    match &cfg.source_dir {
        None => (0..cfg.sources)
            .map(|_| {
                let seed = rng.random();
                AudioBuffer::mono(synthesize_speech(seed, n, cfg.sample_rate), cfg.sample_rate)
            })
            .collect(),
        Some(dir) => {
            let files = list_wavs(dir)?;
            (0..cfg.sources)
                .map(|_| {
                    let path = files.choose(rng).expect("list_wavs returns a non-empty list");
                    let wav = read_wav(path)?;
                    if wav.sample_rate() != cfg.sample_rate {
                        return Err(Error::InvalidArgument(format!(
                            "{} has sample rate {}, expected {}",
                            path.display(),
                            wav.sample_rate(),
                            cfg.sample_rate
                        )));
                    }
                    let mut x = wav.channel(0).to_vec();
                    if x.len() > n {
                        let start = rng.random_range(0..=x.len() - n);
                        x = x[start..start + n].to_vec();
                    } else {
                        x.resize(n, 0.0);
                    }
                    AudioBuffer::mono(x, cfg.sample_rate)
                })
                .collect()
        }
    }
}

fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no WAV files in {}", dir.display())));
    }
    Ok(files)
}

/// Speaker traits that stay fixed over one utterance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voice {
    pub f0: f64,
    /// Multiplies every formant frequency (vocal tract length).
    pub formant_scale: f64,
    /// Harmonic roll-off exponent.
    pub tilt: f64,
}

impl Voice {
    /// Low or high register with equal probability.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let high = rng.random_bool(0.5);
        let (f0, formant_scale) = if high {
            (rng.random_range(170.0..260.0), rng.random_range(1.1..1.25))
        } else {
            (rng.random_range(85.0..150.0), rng.random_range(0.85..1.0))
        };
        Self {
            f0,
            formant_scale,
            tilt: rng.random_range(0.5..1.5),
        }
    }
}

/// Speech-like test signal: syllables of formant-shaped harmonics with a
/// gliding fundamental, separated by short and occasional long pauses.
/// Normalized to unit RMS.
pub fn synthesize_speech(seed: u64, num_samples: usize, sample_rate: u32) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = sample_rate as f64;
    let nyquist = fs / 2.0;
    let voice = Voice::sample(&mut rng);
    let mut out = vec![0.0; num_samples];
    let mut pos = (rng.random_range(0.0..0.3) * fs) as usize;
    while pos < num_samples {
        let len = (rng.random_range(0.12..0.35) * fs) as usize;
        let f0_start = voice.f0 * rng.random_range(0.9..1.1);
        let f0_end = f0_start * rng.random_range(0.92..1.08);
        let formants = [
            (rng.random_range(300.0..900.0), rng.random_range(60.0..120.0), 1.0),
            (rng.random_range(900.0..2400.0), rng.random_range(80.0..160.0), 0.5),
            (rng.random_range(2400.0..3300.0), rng.random_range(120.0..220.0), 0.25),
        ]
        .map(|(fc, bw, g)| (fc * voice.formant_scale, bw * voice.formant_scale, g));
        let harmonics = (nyquist * 0.95 / f0_start.max(f0_end)) as usize;
        let amps: Vec<f64> = (1..=harmonics)
            .map(|h| {
                let f = h as f64 * f0_start;
                let envelope = 0.02
                    + formants
                        .iter()
                        .map(|&(fc, bw, g)| g * (-0.5 * ((f - fc) / bw).powi(2)).exp())
                        .sum::<f64>();
                envelope * (1.0 + f / 1000.0).powf(-voice.tilt)
            })
            .collect();
        let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let gain = rng.random_range(0.5..1.0);
        let end = (pos + len).min(num_samples);
        let mut phase0 = 0.0;
        for (i, sample) in out[pos..end].iter_mut().enumerate() {
            let u = i as f64 / len as f64;
            let f0 = f0_start + (f0_end - f0_start) * u;
            phase0 += 2.0 * PI * f0 / fs;
            let env = (PI * u).sin().powi(2);
            let v: f64 = amps
                .iter()
                .zip(&phases)
                .enumerate()
                .map(|(h, (a, p))| a * ((h + 1) as f64 * phase0 + p).sin())
                .sum();
            *sample += gain * env * v;
        }
        let pause = if rng.random_bool(0.2) {
            rng.random_range(0.25..0.6)
        } else {
            rng.random_range(0.03..0.15)
        };
        pos = end + (pause * fs) as usize;
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / num_samples.max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

fn kernel_value(x: f64) -> f64 {
    let half = KERNEL_HALF as f64 + 0.5;
    if x.abs() >= half {
        return 0.0;
    }
    let window = 0.5 * (1.0 + (PI * x / half).cos());
    let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
    window * sinc
}

/// Adds a fractionally delayed pulse of amplitude `amp` at `delay` samples.
/// The kernel is scaled to unit energy so the pulse energy does not depend
/// on the sub-sample position.
fn add_pulse(taps: &mut [f64], delay: f64, amp: f64) {
    let center = delay.round() as isize;
    let kernel: [f64; 2 * KERNEL_HALF as usize + 1] =
        std::array::from_fn(|j| kernel_value((center - KERNEL_HALF + j as isize) as f64 - delay));
    let scale = amp / kernel.iter().map(|k| k * k).sum::<f64>().sqrt();
    let len = taps.len() as isize;
    for (j, k) in kernel.iter().enumerate() {
        let i = center - KERNEL_HALF + j as isize;
        if (0..len).contains(&i) {
            taps[i as usize] += scale * k;
        }
    }
}

/// Image-method impulse response of length [`RoomSpec::rir_length`]:
/// a pulse of amplitude `beta^reflections / (4 pi r)` at delay `r / c`
/// per image, with at most `max_order` wall reflections. The reflected part
/// is high-passed at 50 Hz.
pub fn image_method_rir(room: &RoomSpec, source: &Vec3, mic: &Vec3, max_order: usize) -> Result<RoomImpulseResponse> {
    image_method_rir_with_length(room, source, mic, max_order, room.rir_length())
}

pub fn image_method_rir_with_length(
    room: &RoomSpec,
    source: &Vec3,
    mic: &Vec3,
    max_order: usize,
    length: usize,
) -> Result<RoomImpulseResponse> {
    room.validate()?;
    if !room.contains(source) || !room.contains(mic) {
        return Err(Error::InvalidArgument("source and microphone must lie inside the room".into()));
    }
    if distance(source, mic) < 1e-9 {
        return Err(Error::InvalidArgument("source and microphone coincide".into()));
    }
    let fs = room.sample_rate as f64;
    let c = room.speed_of_sound;
    let beta = room.reflection_coefficient();
    let max_dist = (length as f64 + KERNEL_HALF as f64) * c / fs;
    let mut direct = vec![0.0; length];
    let mut taps = vec![0.0; length];
    let order = max_order as i64;
    let reach: Vec<i64> = room
        .dimensions
        .iter()
        .map(|&l| ((max_dist / (2.0 * l)).ceil() as i64 + 1).min(order))
        .collect();
    // Per axis: image coordinate and reflection count for lattice index n and parity q.
    let axis = |i: usize, n: i64, q: i64| -> (f64, i64) {
        let pos = (1 - 2 * q) as f64 * source[i] + 2.0 * n as f64 * room.dimensions[i];
        (pos - mic[i], (n - q).abs() + n.abs())
    };
    for nx in -reach[0]..=reach[0] {
        for qx in 0..2 {
            let (dx, rx) = axis(0, nx, qx);
            if rx > order || dx.abs() > max_dist {
                continue;
            }
            for ny in -reach[1]..=reach[1] {
                for qy in 0..2 {
                    let (dy, ry) = axis(1, ny, qy);
                    if rx + ry > order || dx.hypot(dy) > max_dist {
                        continue;
                    }
                    for nz in -reach[2]..=reach[2] {
                        for qz in 0..2 {
                            let (dz, rz) = axis(2, nz, qz);
                            let refl = rx + ry + rz;
                            let r = (dx * dx + dy * dy + dz * dz).sqrt();
                            if refl > order || r > max_dist {
                                continue;
                            }
                            let amp = beta.powi(refl as i32) / (4.0 * PI * r);
                            let buf = if refl == 0 { &mut direct } else { &mut taps };
                            add_pulse(buf, r / c * fs, amp);
                        }
                    }
                }
            }
        }
    }
    remove_dc(&mut taps, fs);
    taps.iter_mut().zip(&direct).for_each(|(t, d)| *t += d);
    Ok(RoomImpulseResponse {
        taps,
        sample_rate: room.sample_rate,
    })
}

/// One-pole DC blocker, `y[n] = x[n] - x[n-1] + R y[n-1]`, applied to the
/// reflections. With positive reflection coefficients they otherwise sum to
/// a large, slowly decaying offset.
fn remove_dc(taps: &mut [f64], fs: f64) {
    let r = (-2.0 * PI * HIGHPASS_HZ / fs).exp();
    let (mut prev_x, mut prev_y) = (0.0, 0.0);
    for v in taps.iter_mut() {
        let y = *v - prev_x + r * prev_y;
        prev_x = *v;
        prev_y = y;
        *v = y;
    }
}

/// Linear convolution truncated to `x.len()` samples, via FFT.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; x.len()];
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |v: &[f64]| {
        let mut buf: Vec<C64> = v.iter().map(|&s| C64::new(s, 0.0)).collect();
        buf.resize(n, C64::new(0.0, 0.0));
        buf
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(u, v)| *u *= v);
    inv.process(&mut a);
    a[..x.len()].iter().map(|z| z.re / n as f64).collect()
}

/// Convolves each dry source with its RIRs and adds white Gaussian noise at
/// the scene SNR, measured over all channels and sources.
pub fn render_scene(scene: &SceneSpec, max_order: usize) -> Result<MixtureScene> {
    if scene.dry_sources.len() != scene.num_sources() {
        return Err(Error::Shape(format!(
            "{} dry sources for {} positions",
            scene.dry_sources.len(),
            scene.num_sources()
        )));
    }
    let fs = scene.room.sample_rate;
    let n = scene.dry_sources.first().map(AudioBuffer::num_samples).unwrap_or(0);
    for (k, dry) in scene.dry_sources.iter().enumerate() {
        if dry.num_samples() != n || dry.sample_rate() != fs {
            return Err(Error::Shape(format!("dry source {k} does not match length/sample rate")));
        }
        if dry.energy() == 0.0 {
            return Err(Error::InvalidArgument(format!("dry source {k} is silent")));
        }
    }
    let images: Vec<AudioBuffer> = scene
        .dry_sources
        .iter()
        .zip(&scene.source_positions)
        .map(|(dry, pos)| {
            let channels = scene
                .mic_positions
                .iter()
                .map(|mic| {
                    let rir = image_method_rir(&scene.room, pos, mic, max_order)?;
                    Ok(convolve(dry.channel(0), &rir.taps))
                })
                .collect::<Result<Vec<_>>>()?;
            AudioBuffer::new(channels, fs)
        })
        .collect::<Result<_>>()?;
    let signal_energy: f64 = images.iter().map(AudioBuffer::energy).sum();
    if signal_energy == 0.0 {
        return Err(Error::InvalidArgument("source images are silent".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    rng.set_stream(1);
    let mut noise: Vec<Vec<f64>> = (0..scene.num_mics())
        .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let noise_energy: f64 = noise.iter().flatten().map(|v| v * v).sum();
    let gain = (signal_energy / noise_energy / 10f64.powf(scene.snr_db / 10.0)).sqrt();
    noise.iter_mut().flatten().for_each(|v| *v *= gain);
    let noise = AudioBuffer::new(noise, fs)?;
    let observation: Vec<Vec<f64>> = (0..scene.num_mics())
        .map(|d| {
            (0..n)
                .map(|i| images.iter().map(|img| img.channel(d)[i]).sum::<f64>() + noise.channel(d)[i])
                .collect()
        })
        .collect();
    Ok(MixtureScene {
        observation: AudioBuffer::new(observation, fs)?,
        source_images: images,
        noise_image: noise,
        spec: scene.clone(),
    })
}

/// One rendered scene as listed in a corpus manifest. Paths are relative to
/// the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub observation: PathBuf,
    #[serde(default)]
    pub images: Vec<PathBuf>,
    #[serde(default)]
    pub noise: Option<PathBuf>,
    #[serde(default)]
    pub scene: Option<SceneSpec>,
    #[serde(default)]
    pub t60: Option<f64>,
    #[serde(default)]
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::tensor_io::write_atomic(path.as_ref(), |file| Ok(serde_json::to_writer_pretty(file, self)?))
    }
}

/// Writes `<id>_mix.wav`, `<id>_img<k>.wav` and `<id>_noise.wav` into `dir`.
pub fn write_scene(scene: &MixtureScene, dir: &Path, id: &str, encoding: WavEncoding) -> Result<ManifestEntry> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let observation = PathBuf::from(format!("{id}_mix.wav"));
    write_wav(&scene.observation, dir.join(&observation), encoding)?;
    let mut images = Vec::new();
    for (k, img) in scene.source_images.iter().enumerate() {
        let name = PathBuf::from(format!("{id}_img{k}.wav"));
        write_wav(img, dir.join(&name), encoding)?;
        images.push(name);
    }
    let noise = PathBuf::from(format!("{id}_noise.wav"));
    write_wav(&scene.noise_image, dir.join(&noise), encoding)?;
    Ok(ManifestEntry {
        id: id.to_string(),
        observation,
        images,
        noise: Some(noise),
        scene: Some(scene.spec.clone()),
        t60: Some(scene.spec.room.t60),
        snr_db: Some(scene.spec.snr_db),
    })
}
