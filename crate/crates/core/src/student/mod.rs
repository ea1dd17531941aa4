//! Deep clustering student.
//!
//! The student maps the log spectrum of a single channel to one unit-norm
//! embedding per time-frequency slot. It is trained so that the embedding
//! affinity matrix `E E^T` matches the affinity `C C^T` of hardened teacher
//! masks. Nothing in this module ever sees a clean source signal: the only
//! supervision is the teacher's mask, and early stopping watches the same
//! teacher-derived loss on held-out mixtures.

mod features;
mod loss;
mod net;
mod train;

pub use features::{active_slots, extract_features, FeatureField};
pub use loss::{dc_loss, dc_loss_grad, harden_targets, normalize_rows_backward, TargetAssignment};
pub use net::{EmbeddingField, NetConfig, NetParams, StudentNet};
pub use train::{predict_masks, train, TrainConfig, TrainLog, TrainLogEntry, TrainingExample};
