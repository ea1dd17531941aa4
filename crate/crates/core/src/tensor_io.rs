//! Audio and tensor persistence.
//!
//! Tensor container layout (little-endian throughout):
//!
//! ```text
//! magic    8 bytes  "BSSTNSR\0"
//! version  u32      1
//! dtype    u32      1 = real32, 2 = complex64 (interleaved re/im f32 pairs)
//! ndim     u32
//! dims     ndim x u64
//! payload  row-major values
//! ```
//!
//! All writers go through a temporary file in the destination directory and
//! rename it into place, so a reader never observes a half-written file.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex32;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"BSSTNSR\0";
pub const TENSOR_VERSION: u32 = 1;

/// Multichannel time-domain signal, one `Vec` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("audio buffer needs at least one channel".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        let len = samples[0].len();
        if samples.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("all channels must have the same length".into()));
        }
        if samples.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("audio samples must be finite".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn zeros(channels: usize, len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![vec![0.0; len]; channels.max(1)], sample_rate)
    }

    pub fn num_channels(&self) -> usize {
        self.samples.len()
    }

    pub fn num_samples(&self) -> usize {
        self.samples[0].len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.samples[c]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.samples
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().flatten().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().flatten().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Single-channel buffer holding a copy of channel `c`.
    pub fn select_channel(&self, c: usize) -> Result<Self> {
        let ch = self
            .samples
            .get(c)
            .ok_or_else(|| Error::InvalidArgument(format!("channel {c} out of range")))?;
        Self::mono(ch.clone(), self.sample_rate)
    }
}

/// Sample encoding used when writing a WAV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Header {
            path: path.into(),
            reason: "zero channels".into(),
        });
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding {
                path: path.into(),
                reason: format!("{fmt:?} with {bits} bits per sample"),
            })
        }
    };
    let frames = interleaved.len() / channels;
    let mut samples = vec![Vec::with_capacity(frames); channels];
    for frame in interleaved.chunks_exact(channels) {
        for (c, &v) in frame.iter().enumerate() {
            samples[c].push(v);
        }
    }
    AudioBuffer::new(samples, spec.sample_rate).map_err(|e| Error::Header {
        path: path.into(),
        reason: e.to_string(),
    })
}

pub fn write_wav(buffer: &AudioBuffer, path: impl AsRef<Path>, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: buffer.num_channels() as u16,
        sample_rate: buffer.sample_rate(),
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => hound::SampleFormat::Int,
            WavEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    write_atomic(path, |file| {
        let mut writer =
            hound::WavWriter::new(BufWriter::new(file), spec).map_err(|e| wav_error(path, e))?;
        for i in 0..buffer.num_samples() {
            for ch in buffer.channels() {
                let v = ch[i];
                match encoding {
                    WavEncoding::Pcm16 => {
                        let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                        writer.write_sample(q)
                    }
                    WavEncoding::Float32 => writer.write_sample(v as f32),
                }
                .map_err(|e| wav_error(path, e))?;
            }
        }
        writer.finalize().map_err(|e| wav_error(path, e))
    })
}

fn wav_error(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::io(path, e),
        hound::Error::Unsupported => Error::UnsupportedEncoding {
            path: path.into(),
            reason: "unsupported WAV format".into(),
        },
        other => Error::Header {
            path: path.into(),
            reason: other.to_string(),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    Real32,
    Complex64,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::Real32 => 1,
            DType::Complex64 => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(DType::Real32),
            2 => Some(DType::Complex64),
            _ => None,
        }
    }

    /// Bytes per element.
    pub fn width(self) -> usize {
        match self {
            DType::Real32 => 4,
            DType::Complex64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Real(Vec<f32>),
    Complex(Vec<Complex32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::Real(v) => v.len(),
            TensorData::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::Real(_) => DType::Real32,
            TensorData::Complex(_) => DType::Complex64,
        }
    }
}

/// In-memory image of a tensor file.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn real(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::Real(values))
    }

    pub fn complex(dims: Vec<usize>, values: Vec<Complex32>) -> Result<Self> {
        Self::new(dims, TensorData::Complex(values))
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn as_real(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::Real(v) => Some(v),
            TensorData::Complex(_) => None,
        }
    }

    pub fn as_complex(&self) -> Option<&[Complex32]> {
        match &self.data {
            TensorData::Complex(v) => Some(v),
            TensorData::Real(_) => None,
        }
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &TensorFile) -> Result<()> {
    let path = path.as_ref();
    let expected: usize = tensor.dims.iter().product();
    if expected != tensor.data.len() {
        return Err(Error::Shape(format!(
            "dims {:?} inconsistent with {} values",
            tensor.dims,
            tensor.data.len()
        )));
    }
    let mut bytes = Vec::with_capacity(20 + 8 * tensor.dims.len() + expected * tensor.dtype().width());
    bytes.extend_from_slice(TENSOR_MAGIC);
    bytes.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    bytes.extend_from_slice(&tensor.dtype().code().to_le_bytes());
    bytes.extend_from_slice(&(tensor.dims.len() as u32).to_le_bytes());
    for &d in &tensor.dims {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match &tensor.data {
        TensorData::Real(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
        TensorData::Complex(v) => v.iter().for_each(|z| {
            bytes.extend_from_slice(&z.re.to_le_bytes());
            bytes.extend_from_slice(&z.im.to_le_bytes());
        }),
    }
    write_atomic(path, |file| {
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|err| match err {
        DecodeError::Header(reason) => Error::Header {
            path: path.into(),
            reason,
        },
        DecodeError::Truncated { expected, found } => Error::Truncated {
            path: path.into(),
            expected,
            found,
        },
    })
}

enum DecodeError {
    Header(String),
    Truncated { expected: usize, found: usize },
}

fn decode_tensor(bytes: &[u8]) -> std::result::Result<TensorFile, DecodeError> {
    let header = |reason: &str| DecodeError::Header(reason.to_string());
    if bytes.len() < 20 {
        return Err(header("file shorter than fixed header"));
    }
    if &bytes[..8] != TENSOR_MAGIC {
        return Err(header("bad magic bytes"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != TENSOR_VERSION {
        return Err(DecodeError::Header(format!("unsupported version {version}")));
    }
    let dtype = DType::from_code(u32_at(12))
        .ok_or_else(|| DecodeError::Header(format!("unknown dtype code {}", u32_at(12))))?;
    let ndim = u32_at(16) as usize;
    let dims_end = 20 + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(header("file shorter than dims table"));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut count: usize = 1;
    for i in 0..ndim {
        let off = 20 + 8 * i;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let d = usize::try_from(d).map_err(|_| header("dimension exceeds address space"))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| header("element count overflows"))?;
        dims.push(d);
    }
    let payload = &bytes[dims_end..];
    let expected = count
        .checked_mul(dtype.width())
        .ok_or_else(|| header("payload size overflows"))?;
    if payload.len() != expected {
        return Err(DecodeError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let f32_at = |off: usize| f32::from_le_bytes(payload[off..off + 4].try_into().unwrap());
    let data = match dtype {
        DType::Real32 => TensorData::Real((0..count).map(|i| f32_at(4 * i)).collect()),
        DType::Complex64 => TensorData::Complex(
            (0..count)
                .map(|i| Complex32::new(f32_at(8 * i), f32_at(8 * i + 4)))
                .collect(),
        ),
    };
    Ok(TensorFile { dims, data })
}

/// Writes through a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, body: impl FnOnce(File) -> Result<()>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = temp_sibling(path);
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    if let Err(e) = body(file) {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}
