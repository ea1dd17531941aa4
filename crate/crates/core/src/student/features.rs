use crate::error::{Error, Result};
use crate::stft::MultichannelStft;

const LOG_FLOOR: f64 = 1e-8;

/// Standardized log-magnitude spectrogram, `T x F`, t-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    values: Vec<f64>,
    frames: usize,
    bins: usize,
}

impl FeatureField {
    pub fn new(values: Vec<f64>, frames: usize, bins: usize) -> Result<Self> {
        if values.len() != frames * bins {
            return Err(Error::Shape(format!("{} features for {frames}x{bins}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("features must be finite".into()));
        }
        Ok(Self { values, frames, bins })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }

    /// Frames `start..start + len`.
    pub fn crop(&self, start: usize, len: usize) -> Self {
        Self {
            values: self.values[start * self.bins..(start + len) * self.bins].to_vec(),
            frames: len,
            bins: self.bins,
        }
    }
}

/// `log(|Y| + 1e-8)`, standardized to zero mean and unit variance over the
/// whole utterance. A constant spectrogram maps to all zeros.
pub fn extract_features(y1: &MultichannelStft) -> Result<FeatureField> {
    if y1.channels() != 1 {
        return Err(Error::Shape(format!(
            "features are computed from one channel, got {}",
            y1.channels()
        )));
    }
    let mut values: Vec<f64> = y1.values().iter().map(|z| (z.norm() + LOG_FLOOR).ln()).collect();
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = if var > 1e-12 { var.sqrt() } else { 1.0 };
    values.iter_mut().for_each(|v| *v = (*v - mean) / scale);
    FeatureField::new(values, y1.frames(), y1.bins())
}

/// Slots whose power is within `range_db` of the loudest slot (t-major).
pub fn active_slots(y1: &MultichannelStft, range_db: f64) -> Result<Vec<bool>> {
    if y1.channels() != 1 {
        return Err(Error::Shape(format!(
            "activity is computed from one channel, got {}",
            y1.channels()
        )));
    }
    if !(range_db >= 0.0) {
        return Err(Error::InvalidArgument(format!("dynamic range {range_db} dB must be non-negative")));
    }
    let power: Vec<f64> = y1.values().iter().map(|z| z.norm_sqr()).collect();
    let floor = power.iter().cloned().fold(0.0, f64::max) * 10f64.powf(-range_db / 10.0);
    Ok(power.iter().map(|&p| p > 0.0 && p >= floor).collect())
}
