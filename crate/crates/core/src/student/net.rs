use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::FeatureField;
use super::loss::{dc_loss, dc_loss_grad, normalize_rows_backward, TargetAssignment};
use crate::error::{Error, Result};
use crate::tensor_io::{read_tensor, write_atomic, write_tensor, TensorFile};

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub bins: usize,
    pub embedding_dim: usize,
    pub hidden: usize,
    /// Frames of context on each side.
    pub context: usize,
}

impl NetConfig {
    pub fn new(bins: usize) -> Self {
        Self {
            bins,
            embedding_dim: 20,
            hidden: 256,
            context: 2,
        }
    }

    pub fn input_dim(&self) -> usize {
        (2 * self.context + 1) * self.bins
    }

    pub fn output_dim(&self) -> usize {
        self.bins * self.embedding_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || self.embedding_dim == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("degenerate network shape {self:?}")));
        }
        Ok(())
    }
}

/// Weights of the three dense layers, or gradients/velocities of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

impl NetParams {
    pub fn zeros(config: &NetConfig) -> Self {
        let (i, h, o) = (config.input_dim(), config.hidden, config.output_dim());
        Self {
            w1: Array2::zeros((i, h)),
            b1: Array1::zeros(h),
            w2: Array2::zeros((h, h)),
            b2: Array1::zeros(h),
            w3: Array2::zeros((h, o)),
            b3: Array1::zeros(o),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
            w3: Array2::zeros(self.w3.raw_dim()),
            b3: Array1::zeros(self.b3.raw_dim()),
        }
    }

    pub fn slices(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().expect("parameters are contiguous"),
            self.b1.as_slice().expect("parameters are contiguous"),
            self.w2.as_slice().expect("parameters are contiguous"),
            self.b2.as_slice().expect("parameters are contiguous"),
            self.w3.as_slice().expect("parameters are contiguous"),
            self.b3.as_slice().expect("parameters are contiguous"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().expect("parameters are contiguous"),
            self.b1.as_slice_mut().expect("parameters are contiguous"),
            self.w2.as_slice_mut().expect("parameters are contiguous"),
            self.b2.as_slice_mut().expect("parameters are contiguous"),
            self.w3.as_slice_mut().expect("parameters are contiguous"),
            self.b3.as_slice_mut().expect("parameters are contiguous"),
        ]
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn norm(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().flat_map(|s| s.iter()).all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.slices_mut().into_iter().flat_map(|x| x.iter_mut()).for_each(|v| *v *= s);
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, s: f64, other: &Self) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += s * y);
        }
    }

    fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    fn unflatten(config: &NetConfig, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(config);
        if flat.len() != p.len() {
            return Err(Error::Shape(format!(
                "{} parameters stored, network needs {}",
                flat.len(),
                p.len()
            )));
        }
        let mut offset = 0;
        for s in p.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(p)
    }
}

/// Unit-norm embeddings, `T x F x E`, stored as a `(T*F) x E` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingField {
    values: Array2<f64>,
    frames: usize,
    bins: usize,
}

impl EmbeddingField {
    pub fn new(values: Array2<f64>, frames: usize, bins: usize) -> Result<Self> {
        if values.nrows() != frames * bins {
            return Err(Error::Shape(format!(
                "{} embeddings for {frames}x{bins} slots",
                values.nrows()
            )));
        }
        Ok(Self { values, frames, bins })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn get(&self, t: usize, f: usize) -> ndarray::ArrayView1<'_, f64> {
        self.values.row(t * self.bins + f)
    }

    /// Largest deviation of any embedding norm from one.
    pub fn norm_defect(&self) -> f64 {
        self.values
            .axis_iter(Axis(0))
            .map(|r| (r.dot(&r).sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

struct Activations {
    x: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    /// Normalized embeddings, `(T*F) x E`.
    v: Array2<f64>,
    norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Descriptor {
    format: String,
    config: NetConfig,
    seed: u64,
    parameters: usize,
}

const DESCRIPTOR_FORMAT: &str = "udc-student-mlp";

/// Frame-wise embedding network: context window, two tanh layers, a linear
/// `F*E` output and per-slot unit normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentNet {
    config: NetConfig,
    seed: u64,
    params: NetParams,
}

impl StudentNet {
    /// Glorot-uniform weights, zero biases.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = NetParams::zeros(&config);
        for w in [&mut params.w1, &mut params.w2, &mut params.w3] {
            let (fan_in, fan_out) = w.dim();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-limit..limit));
        }
        Ok(Self { config, seed, params })
    }

    pub fn from_params(config: NetConfig, seed: u64, params: NetParams) -> Result<Self> {
        config.validate()?;
        if params.w1.dim() != (config.input_dim(), config.hidden)
            || params.w2.dim() != (config.hidden, config.hidden)
            || params.w3.dim() != (config.hidden, config.output_dim())
            || params.b1.len() != config.hidden
            || params.b2.len() != config.hidden
            || params.b3.len() != config.output_dim()
        {
            return Err(Error::Shape("parameter shapes do not match the network config".into()));
        }
        if !params.is_finite() {
            return Err(Error::InvalidArgument("network parameters must be finite".into()));
        }
        Ok(Self { config, seed, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &NetParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NetParams {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, feats: &FeatureField) -> Result<()> {
        if feats.bins() != self.config.bins {
            return Err(Error::Shape(format!(
                "network expects {} bins, features have {}",
                self.config.bins,
                feats.bins()
            )));
        }
        if feats.frames() == 0 {
            return Err(Error::Shape("no frames to embed".into()));
        }
        Ok(())
    }

    /// Stacks `2c+1` neighbouring frames per row, replicating the edge frames.
    fn context_input(&self, feats: &FeatureField) -> Array2<f64> {
        let (t_len, f_len, c) = (feats.frames(), feats.bins(), self.config.context as isize);
        let mut x = Array2::zeros((t_len, self.config.input_dim()));
        for (t, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
            let row = row.as_slice_mut().expect("rows are contiguous");
            for (j, off) in (-c..=c).enumerate() {
                let src = (t as isize + off).clamp(0, t_len as isize - 1) as usize;
                row[j * f_len..(j + 1) * f_len].copy_from_slice(feats.frame(src));
            }
        }
        x
    }

    fn activations(&self, feats: &FeatureField) -> Result<Activations> {
        self.check_input(feats)?;
        let p = &self.params;
        let x = self.context_input(feats);
        let mut h1 = x.dot(&p.w1) + &p.b1;
        h1.mapv_inplace(f64::tanh);
        let mut h2 = h1.dot(&p.w2) + &p.b2;
        h2.mapv_inplace(f64::tanh);
        let u = h2.dot(&p.w3) + &p.b3;
        let slots = feats.frames() * feats.bins();
        let mut v = u
            .into_shape_with_order((slots, self.config.embedding_dim))
            .expect("output rows are F*E wide");
        let mut norms = Vec::with_capacity(slots);
        for mut r in v.axis_iter_mut(Axis(0)) {
            let n = r.dot(&r).sqrt().max(NORM_FLOOR);
            r /= n;
            norms.push(n);
        }
        Ok(Activations { x, h1, h2, v, norms })
    }

    pub fn forward(&self, feats: &FeatureField) -> Result<EmbeddingField> {
        let a = self.activations(feats)?;
        let field = EmbeddingField::new(a.v, feats.frames(), feats.bins())?;
        debug_assert!(field.norm_defect() < 1e-6);
        Ok(field)
    }

    pub fn loss(&self, feats: &FeatureField, targets: &TargetAssignment) -> Result<f64> {
        let a = self.activations(feats)?;
        dc_loss(a.v.view(), targets)
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, feats: &FeatureField, targets: &TargetAssignment) -> Result<(f64, NetParams)> {
        let a = self.activations(feats)?;
        let loss = dc_loss(a.v.view(), targets)?;
        let g_v = dc_loss_grad(a.v.view(), targets)?;
        let g_u = normalize_rows_backward(a.v.view(), &a.norms, g_v.view());
        let g_u = g_u
            .into_shape_with_order((feats.frames(), self.config.output_dim()))
            .expect("slot rows regroup into frames");

        let p = &self.params;
        let w3 = a.h2.t().dot(&g_u);
        let b3 = g_u.sum_axis(Axis(0));
        let mut g_h2 = g_u.dot(&p.w3.t());
        Zip::from(&mut g_h2).and(&a.h2).for_each(|g, &h| *g *= 1.0 - h * h);
        let w2 = a.h1.t().dot(&g_h2);
        let b2 = g_h2.sum_axis(Axis(0));
        let mut g_h1 = g_h2.dot(&p.w2.t());
        Zip::from(&mut g_h1).and(&a.h1).for_each(|g, &h| *g *= 1.0 - h * h);
        let w1 = a.x.t().dot(&g_h1);
        let b1 = g_h1.sum_axis(Axis(0));
        Ok((loss, NetParams { w1, b1, w2, b2, w3, b3 }))
    }

    fn descriptor_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the flattened parameters as a real32 tensor and a JSON
    /// descriptor next to it (same stem, `.json`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let flat: Vec<f32> = self.params.flatten().iter().map(|&v| v as f32).collect();
        write_tensor(path, &TensorFile::real(vec![flat.len()], flat)?)?;
        let desc = Descriptor {
            format: DESCRIPTOR_FORMAT.into(),
            config: self.config,
            seed: self.seed,
            parameters: self.params.len(),
        };
        let desc_path = Self::descriptor_path(path);
        write_atomic(&desc_path, |file| Ok(serde_json::to_writer_pretty(file, &desc)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let desc_path = Self::descriptor_path(path);
        let text = std::fs::read_to_string(&desc_path).map_err(|e| Error::io(&desc_path, e))?;
        let desc: Descriptor = serde_json::from_str(&text)?;
        if desc.format != DESCRIPTOR_FORMAT {
            return Err(Error::Header {
                path: desc_path,
                reason: format!("unknown network format {:?}", desc.format),
            });
        }
        let tensor = read_tensor(path)?;
        let flat: Vec<f64> = tensor
            .as_real()
            .ok_or_else(|| Error::Header {
                path: path.to_path_buf(),
                reason: "network parameters must be real32".into(),
            })?
            .iter()
            .map(|&v| v as f64)
            .collect();
        let params = NetParams::unflatten(&desc.config, &flat)?;
        Self::from_params(desc.config, desc.seed, params)
    }
}
