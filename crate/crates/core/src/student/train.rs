use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{extract_features, FeatureField};
use super::loss::TargetAssignment;
use super::net::{NetParams, StudentNet};
use crate::clustering::{kmeans, labels_to_masks, nearest_centroid};
use crate::error::{Error, Result};
use crate::masks::MaskSet;
use crate::stft::MultichannelStft;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Steps between validation passes.
    pub eval_interval: usize,
    pub validation_fraction: f64,
    /// Training crops are this many frames long.
    pub chunk_frames: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            momentum: 0.9,
            clip_norm: 5.0,
            batch_size: 4,
            max_steps: 2000,
            patience: 5,
            eval_interval: 50,
            validation_fraction: 0.1,
            chunk_frames: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("invalid training config: {what}")));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm");
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.patience == 0 || self.chunk_frames == 0 {
            return bad("batch_size, eval_interval, patience and chunk_frames must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub features: FeatureField,
    pub targets: TargetAssignment,
}

impl TrainingExample {
    pub fn new(features: FeatureField, targets: TargetAssignment) -> Result<Self> {
        if targets.len() != features.frames() * features.bins() {
            return Err(Error::Shape(format!(
                "{} targets for {}x{} features",
                targets.len(),
                features.frames(),
                features.bins()
            )));
        }
        Ok(Self { features, targets })
    }

    fn crop(&self, start: usize, len: usize) -> Self {
        let bins = self.features.bins();
        Self {
            features: self.features.crop(start, len),
            targets: self.targets.crop(bins, start, len),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    /// Mean minibatch loss since the previous entry (`None` at step 0).
    pub train_loss: Option<f64>,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
    pub best_step: usize,
    pub best_validation_loss: f64,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

fn mean_loss(net: &StudentNet, examples: &[&TrainingExample]) -> Result<f64> {
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|ex| net.loss(&ex.features, &ex.targets))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Splits indices into (train, validation). With a zero fraction the
/// training set doubles as the validation set.
fn split(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    if fraction == 0.0 {
        return Ok((idx.clone(), idx));
    }
    let n_val = ((n as f64 * fraction).round() as usize).max(1);
    if n_val >= n {
        return Err(Error::Config(format!("{n} examples leave nothing to train on")));
    }
    let train = idx.split_off(n_val);
    Ok((train, idx))
}

/// Minibatch SGD with momentum and gradient-norm clipping on the affinity
/// loss. Returns the parameters with the lowest validation loss.
pub fn train(net: StudentNet, corpus: &[TrainingExample], cfg: &TrainConfig) -> Result<(StudentNet, TrainLog)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty training corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_idx, val_idx) = split(corpus.len(), cfg.validation_fraction, &mut rng)?;
    let validation: Vec<&TrainingExample> = val_idx.iter().map(|&i| &corpus[i]).collect();

    let mut net = net;
    let mut velocity = net.params().zeros_like();
    let mut best = net.clone();
    let mut best_loss = mean_loss(&net, &validation)?;
    let mut best_step = 0;
    let mut entries = vec![TrainLogEntry {
        step: 0,
        train_loss: None,
        validation_loss: best_loss,
    }];
    let mut since_best = 0;
    let mut running = (0.0, 0usize);
    let mut stopped_early = false;
    let mut steps_run = 0;

    for step in 1..=cfg.max_steps {
        let batch: Vec<TrainingExample> = (0..cfg.batch_size)
            .map(|_| {
                let ex = &corpus[train_idx[rng.random_range(0..train_idx.len())]];
                let frames = ex.features.frames();
                if frames > cfg.chunk_frames {
                    let start = rng.random_range(0..=frames - cfg.chunk_frames);
                    ex.crop(start, cfg.chunk_frames)
                } else {
                    ex.clone()
                }
            })
            .collect();
        let results: Vec<(f64, NetParams)> = batch
            .par_iter()
            .map(|ex| net.loss_and_grad(&ex.features, &ex.targets))
            .collect::<Result<_>>()?;
        let mut grad = net.params().zeros_like();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            grad.add_scaled(1.0, g);
        }
        let scale = 1.0 / results.len() as f64;
        loss *= scale;
        grad.scale(scale);
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("minibatch loss {loss}, gradient norm {}", grad.norm()),
            });
        }
        let norm = grad.norm();
        if norm > cfg.clip_norm {
            grad.scale(cfg.clip_norm / norm);
        }
        velocity.scale(cfg.momentum);
        velocity.add_scaled(-cfg.learning_rate, &grad);
        net.params_mut().add_scaled(1.0, &velocity);
        running = (running.0 + loss, running.1 + 1);
        steps_run = step;

        if step % cfg.eval_interval == 0 || step == cfg.max_steps {
            let val = mean_loss(&net, &validation)?;
            if !val.is_finite() {
                return Err(Error::Diverged {
                    step,
                    reason: format!("validation loss {val}"),
                });
            }
            entries.push(TrainLogEntry {
                step,
                train_loss: Some(running.0 / running.1 as f64),
                validation_loss: val,
            });
            log::debug!("step {step}: train {:.5} validation {val:.5}", running.0 / running.1 as f64);
            running = (0.0, 0);
            if val < best_loss {
                best_loss = val;
                best_step = step;
                best = net.clone();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    stopped_early = step < cfg.max_steps;
                    break;
                }
            }
        }
    }

    Ok((
        best,
        TrainLog {
            entries,
            best_step,
            best_validation_loss: best_loss,
            steps_run,
            stopped_early,
            train_indices: train_idx,
            validation_indices: val_idx,
        },
    ))
}

/// Embeds the single-channel spectrum and clusters the embeddings into
/// `classes` one-hot masks. With `active`, only the flagged slots are
/// clustered and every other slot joins its nearest centroid.
pub fn predict_masks(
    net: &StudentNet,
    y1: &MultichannelStft,
    classes: usize,
    restarts: usize,
    seed: u64,
    active: Option<&[bool]>,
) -> Result<MaskSet> {
    let feats = extract_features(y1)?;
    let emb = net.forward(&feats)?;
    let labels = match active {
        None => kmeans(emb.matrix(), classes, restarts, seed)?.labels,
        Some(active) => {
            if active.len() != emb.matrix().nrows() {
                return Err(Error::Shape(format!(
                    "{} activity flags for {} slots",
                    active.len(),
                    emb.matrix().nrows()
                )));
            }
            let rows: Vec<usize> = (0..active.len()).filter(|&n| active[n]).collect();
            let result = kmeans(emb.matrix().select(Axis(0), &rows).view(), classes, restarts, seed)?;
            nearest_centroid(emb.matrix(), result.centroids.view())?
        }
    };
    labels_to_masks(&labels, emb.frames(), emb.bins(), classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::student::NetConfig;

    fn toy_corpus(n: usize, frames: usize, bins: usize, seed: u64) -> Vec<TrainingExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut feats = Vec::new();
                let mut labels = Vec::new();
                for _ in 0..frames {
                    for f in 0..bins {
                        let loud = rng.random_bool(0.5);
                        feats.push(if loud { 1.0 } else { -1.0 } + rng.random_range(-0.2..0.2) + 0.01 * f as f64);
                        labels.push(loud as usize);
                    }
                }
                TrainingExample::new(
                    FeatureField::new(feats, frames, bins).unwrap(),
                    TargetAssignment::new(labels, 2).unwrap(),
                )
                .unwrap()
            })
            .collect()
    }

    fn small_net(bins: usize, seed: u64) -> StudentNet {
        StudentNet::new(
            NetConfig {
                bins,
                embedding_dim: 4,
                hidden: 16,
                context: 1,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let corpus = toy_corpus(6, 8, 5, 1);
        let net = small_net(5, 2);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_steps: 20,
            eval_interval: 5,
            chunk_frames: 4,
            validation_fraction: 0.3,
            ..TrainConfig::default()
        };
        let (out, log) = train(net.clone(), &corpus, &cfg).unwrap();
        assert_eq!(out, net);
        let first = log.entries[0].validation_loss;
        assert!(log.entries.iter().all(|e| e.validation_loss == first));
    }

    #[test]
    fn returns_best_checkpoint_and_is_deterministic() {
        let corpus = toy_corpus(8, 10, 6, 3);
        let cfg = TrainConfig {
            learning_rate: 0.5,
            max_steps: 60,
            eval_interval: 10,
            patience: 3,
            chunk_frames: 6,
            validation_fraction: 0.25,
            seed: 11,
            ..TrainConfig::default()
        };
        let (a, log) = train(small_net(6, 4), &corpus, &cfg).unwrap();
        let (b, _) = train(small_net(6, 4), &corpus, &cfg).unwrap();
        assert_eq!(a, b);
        let last = log.entries.last().unwrap().validation_loss;
        assert!(log.best_validation_loss <= last);
        assert!(log.entries.iter().all(|e| e.validation_loss >= log.best_validation_loss));
        let val: Vec<&TrainingExample> = log.validation_indices.iter().map(|&i| &corpus[i]).collect();
        assert!((mean_loss(&a, &val).unwrap() - log.best_validation_loss).abs() < 1e-12);
        assert!(log.train_indices.iter().all(|i| !log.validation_indices.contains(i)));
    }

    #[test]
    fn diverging_run_reports_the_step() {
        let corpus = toy_corpus(4, 6, 4, 5);
        let mut net = small_net(4, 6);
        net.params_mut().w1[[0, 0]] = f64::NAN;
        let cfg = TrainConfig {
            max_steps: 5,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(net, &corpus, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn invalid_configs() {
        let corpus = toy_corpus(1, 4, 3, 0);
        let net = small_net(3, 0);
        let cfg = TrainConfig::default();
        assert!(train(net.clone(), &corpus, &cfg).is_err());
        assert!(train(net.clone(), &[], &TrainConfig { validation_fraction: 0.0, ..cfg.clone() }).is_err());
        assert!(TrainConfig { batch_size: 0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn activity_restricted_clustering_labels_every_slot() {
        use crate::stft::StftConfig;
        use crate::C64;
        let (frames, bins) = (6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values: Vec<C64> =
            (0..frames * bins).map(|_| C64::new(rng.random_range(0.1..3.0), 0.0)).collect();
        let y = MultichannelStft::from_parts(values, frames, 1, 8000, StftConfig::new(8, 4).unwrap()).unwrap();
        let net = small_net(bins, 1);
        let full = predict_masks(&net, &y, 2, 3, 0, None).unwrap();
        let all = predict_masks(&net, &y, 2, 3, 0, Some(&vec![true; frames * bins])).unwrap();
        assert_eq!(full, all);
        let mut active = vec![false; frames * bins];
        active[..12].iter_mut().for_each(|a| *a = true);
        let part = predict_masks(&net, &y, 2, 3, 0, Some(&active)).unwrap();
        part.check_simplex(1e-12).unwrap();
        assert_eq!((part.classes(), part.frames(), part.bins()), (2, frames, bins));
        assert!(predict_masks(&net, &y, 2, 3, 0, Some(&[true; 3])).is_err());
    }
}
