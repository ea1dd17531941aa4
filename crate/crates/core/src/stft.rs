//! Multichannel short-time Fourier transform with overlap-add inverse.
//!
//! The signal is padded with `dft_size - shift` zeros in front (and at least
//! as many at the end), so every input sample is covered by the full set of
//! overlapping frames. The inverse divides by the accumulated squared window,
//! which makes `istft(stft(x)) == x` up to rounding for any valid config.

use std::f64::consts::PI;

use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::AudioBuffer;
use crate::C64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    /// Square root of the periodic Hann window, used for analysis and synthesis.
    #[default]
    SqrtHann,
    Rectangular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub dft_size: usize,
    pub shift: usize,
    #[serde(default)]
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            dft_size: 512,
            shift: 128,
            window: Window::SqrtHann,
        }
    }
}

impl StftConfig {
    pub fn new(dft_size: usize, shift: usize) -> Result<Self> {
        let cfg = Self {
            dft_size,
            shift,
            window: Window::SqrtHann,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dft_size < 2 || self.dft_size % 2 != 0 {
            return Err(Error::Config(format!("dft_size {} must be even and >= 2", self.dft_size)));
        }
        if self.shift == 0 || self.shift > self.dft_size || self.dft_size % self.shift != 0 {
            return Err(Error::Config(format!(
                "shift {} must divide dft_size {}",
                self.shift, self.dft_size
            )));
        }
        if self.window == Window::SqrtHann && self.shift == self.dft_size {
            // The periodic Hann window is zero at the frame start.
            return Err(Error::Config("sqrt-Hann window needs overlapping frames".into()));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.dft_size / 2 + 1
    }

    fn pad(&self) -> usize {
        self.dft_size - self.shift
    }

    /// Frames produced for a signal of `num_samples` samples.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        (num_samples + self.pad()).div_ceil(self.shift)
    }

    pub fn window_samples(&self) -> Vec<f64> {
        let n = self.dft_size;
        match self.window {
            Window::SqrtHann => (0..n)
                .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).sqrt())
                .collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

/// Complex STFT tensor of shape `T x F x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelStft {
    values: Vec<C64>,
    frames: usize,
    bins: usize,
    channels: usize,
    sample_rate: u32,
    config: StftConfig,
}

impl MultichannelStft {
    pub fn from_parts(
        values: Vec<C64>,
        frames: usize,
        channels: usize,
        sample_rate: u32,
        config: StftConfig,
    ) -> Result<Self> {
        config.validate()?;
        let bins = config.num_bins();
        if values.len() != frames * bins * channels {
            return Err(Error::Shape(format!(
                "{} values for {frames}x{bins}x{channels} STFT",
                values.len()
            )));
        }
        if values.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidArgument("STFT values must be finite".into()));
        }
        Ok(Self {
            values,
            frames,
            bins,
            channels,
            sample_rate,
            config,
        })
    }

    pub fn zeros(frames: usize, channels: usize, sample_rate: u32, config: StftConfig) -> Self {
        let bins = config.num_bins();
        Self {
            values: vec![C64::new(0.0, 0.0); frames * bins * channels],
            frames,
            bins,
            channels,
            sample_rate,
            config,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [C64] {
        &mut self.values
    }

    pub fn get(&self, t: usize, f: usize, d: usize) -> C64 {
        self.values[(t * self.bins + f) * self.channels + d]
    }

    /// The `D`-vector observed at slot `(t, f)`.
    pub fn slot(&self, t: usize, f: usize) -> &[C64] {
        let start = (t * self.bins + f) * self.channels;
        &self.values[start..start + self.channels]
    }

    pub fn slot_mut(&mut self, t: usize, f: usize) -> &mut [C64] {
        let start = (t * self.bins + f) * self.channels;
        &mut self.values[start..start + self.channels]
    }

    /// Single-channel STFT holding channel `d`.
    pub fn select_channel(&self, d: usize) -> Result<Self> {
        if d >= self.channels {
            return Err(Error::InvalidArgument(format!("channel {d} out of range")));
        }
        let values = self.values.iter().skip(d).step_by(self.channels).copied().collect();
        Ok(Self {
            values,
            frames: self.frames,
            bins: self.bins,
            channels: 1,
            sample_rate: self.sample_rate,
            config: self.config,
        })
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let mut out = self.clone();
        out.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a += b);
        Ok(out)
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if (self.frames, self.bins, self.channels) != (other.frames, other.bins, other.channels) {
            return Err(Error::Shape(format!(
                "STFT shapes {}x{}x{} and {}x{}x{} differ",
                self.frames, self.bins, self.channels, other.frames, other.bins, other.channels
            )));
        }
        Ok(())
    }
}

pub fn stft(audio: &AudioBuffer, config: StftConfig) -> Result<MultichannelStft> {
    config.validate()?;
    let n = audio.num_samples();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot transform an empty signal".into()));
    }
    let (size, shift, pad) = (config.dft_size, config.shift, config.pad());
    let bins = config.num_bins();
    let frames = config.num_frames(n);
    let channels = audio.num_channels();
    let window = config.window_samples();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(size);

    let padded_len = (frames - 1) * shift + size;
    let mut values = vec![C64::new(0.0, 0.0); frames * bins * channels];
    let mut padded = vec![0.0; padded_len];
    let mut buf = vec![C64::new(0.0, 0.0); size];
    for (d, signal) in audio.channels().iter().enumerate() {
        padded.iter_mut().for_each(|x| *x = 0.0);
        padded[pad..pad + n].copy_from_slice(signal);
        for t in 0..frames {
            let frame = &padded[t * shift..t * shift + size];
            for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&window) {
                *b = C64::new(x * w, 0.0);
            }
            fft.process(&mut buf);
            for (f, &v) in buf[..bins].iter().enumerate() {
                values[(t * bins + f) * channels + d] = v;
            }
        }
    }
    MultichannelStft::from_parts(values, frames, channels, audio.sample_rate(), config)
}

pub fn istft(spec: &MultichannelStft, num_samples: usize) -> Result<AudioBuffer> {
    let config = spec.config;
    let expected = config.num_frames(num_samples);
    if num_samples == 0 || expected != spec.frames {
        return Err(Error::Shape(format!(
            "{} frames cannot reconstruct {num_samples} samples (expected {expected} frames)",
            spec.frames
        )));
    }
    let (size, shift, pad) = (config.dft_size, config.shift, config.pad());
    let bins = spec.bins;
    let frames = spec.frames;
    let window = config.window_samples();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(size);

    let out_len = (frames - 1) * shift + size;
    let mut norm = vec![0.0; out_len];
    for t in 0..frames {
        for (i, w) in window.iter().enumerate() {
            norm[t * shift + i] += w * w;
        }
    }

    let mut buf = vec![C64::new(0.0, 0.0); size];
    let mut channels = Vec::with_capacity(spec.channels);
    for d in 0..spec.channels {
        let mut acc = vec![0.0; out_len];
        for t in 0..frames {
            for f in 0..bins {
                buf[f] = spec.get(t, f, d);
            }
            for f in bins..size {
                buf[f] = buf[size - f].conj();
            }
            ifft.process(&mut buf);
            for (i, (b, w)) in buf.iter().zip(&window).enumerate() {
                acc[t * shift + i] += b.re * w / size as f64;
            }
        }
        let signal = acc[pad..pad + num_samples]
            .iter()
            .zip(&norm[pad..pad + num_samples])
            .map(|(x, n)| if *n > 1e-12 { x / n } else { 0.0 })
            .collect();
        channels.push(signal);
    }
    AudioBuffer::new(channels, spec.sample_rate)
}
