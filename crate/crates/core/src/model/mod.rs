//! Convolutional encoder/decoder, MLP heads, initialization and checkpoints.
//!
//! Encoder block `C_k`: conv3×3(k) → batchnorm → leaky-ReLU(0.2) → maxpool2.
//! Decoder block `CD_k`: conv3×3(k) → batchnorm → leaky-ReLU(0.2) → upsample2.
//! The decoder ends with a plain 3×3 convolution to one channel. The latent
//! is the flattened (channel-major) output of the last encoder block.

mod checkpoint;
mod forward;
mod head;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{LneError, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use forward::{apply_bn_updates, decode, decode_on, encode, encode_on, BnUpdate, Mode, BN_EPS, BN_MOMENTUM};
pub use head::{head_forward, head_forward_on, init_head, softmax, FeatureMode, HeadConfig};
pub use params::{init_params, is_decay_exempt, is_trainable, Bound, ModelParams};

/// Encoder/decoder layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    /// Square input side length.
    pub input_size: usize,
    pub slope: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            encoder_channels: vec![16, 32, 64, 16],
            decoder_channels: vec![64, 32, 16, 16],
            input_size: 32,
            slope: 0.2,
        }
    }
}

impl Architecture {
    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() || self.decoder_channels.is_empty() {
            return Err(LneError::Config("channel lists must be non-empty".into()));
        }
        if self.encoder_channels.len() != self.decoder_channels.len() {
            return Err(LneError::Config(format!(
                "{} encoder blocks but {} decoder blocks; the decoder must undo every pooling",
                self.encoder_channels.len(),
                self.decoder_channels.len()
            )));
        }
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return Err(LneError::Config("channel counts must be positive".into()));
        }
        let f = 1usize << self.encoder_channels.len();
        if self.input_size == 0 || !self.input_size.is_multiple_of(f) || self.input_size / f == 0 {
            return Err(LneError::Config(format!(
                "input size {} must be a positive multiple of {f}",
                self.input_size
            )));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(LneError::Config(format!("leaky-relu slope {} outside (0,1)", self.slope)));
        }
        Ok(())
    }

    /// Side length of the bottleneck feature map.
    pub fn latent_side(&self) -> usize {
        self.input_size >> self.encoder_channels.len()
    }

    pub fn latent_channels(&self) -> usize {
        *self.encoder_channels.last().expect("validated")
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_channels() * self.latent_side() * self.latent_side()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_latent_is_64() {
        let a = Architecture::default();
        a.validate().unwrap();
        assert_eq!(a.latent_dim(), 64);
        assert_eq!(a.clone().with_input_size(64).latent_dim(), 256);
        assert_eq!(a.with_input_size(48).latent_dim(), 144);
    }

    #[test]
    fn indivisible_sizes_are_rejected() {
        assert!(Architecture::default().with_input_size(40).validate().is_err());
        let lopsided = Architecture {
            decoder_channels: vec![8],
            ..Default::default()
        };
        assert!(lopsided.validate().is_err());
    }
}
