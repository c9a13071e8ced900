//! The speech encoder: CNN waveform front end, transformer stack, projection
//! and label-similarity head, span masking, the dual masked/unmasked
//! cross-entropy objective, manual backward pass and Adam training.

pub mod checkpoint;
mod config;
mod loss;
mod mask;
mod model;
pub mod nn;
mod optim;
mod params;
mod train;

use std::path::Path;

pub use config::{EncoderConfig, HeadKind, CNN_KERNELS, CNN_STRIDES};
pub use loss::{log_softmax, masked_pred_loss, LossOutput};
pub use mask::{mask_spans, MaskSpec};
pub use model::{backward, cnn_forward, forward, ForwardOutput, Model, Tape};
pub use optim::{AdamConfig, AdamState};
pub use params::Params;
pub use train::{aligned_len, batch_gradients, evaluate, train_step, Example, StepMetrics, TrainConfig, MAX_ALIGN_GAP};

use crate::error::{Error, Result};

impl Model {
    pub fn save(&self, path: &Path, opt: Option<&AdamState>) -> Result<()> {
        checkpoint::save(path, &self.config, &self.params, opt)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<AdamState>)> {
        let loaded = checkpoint::load::<EncoderConfig>(path)?;
        let model = Model::from_params(loaded.config, loaded.params)?;
        if let Some(o) = &loaded.optimizer {
            if o.m.tensors.len() != model.params.tensors.len() {
                return Err(Error::Format("optimizer section does not match model tensors".into()));
            }
        }
        Ok((model, loaded.optimizer))
    }
}
