//! Architecture constants. The defaults match the reference architecture:
//! a 4-layer 5x5 flow encoder at 48 channels, slot width 48, a 5-layer
//! {5,3,3,3,3} image-condition encoder at 24 channels, and a 6-layer slot
//! decoder whose first five layers each concatenate one condition level.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Slot width K.
    pub slot_dim: usize,
    /// Flow-encoder output channels per layer.
    pub enc_channels: usize,
    /// Flow-encoder kernel sizes.
    pub enc_kernels: Vec<usize>,
    /// Condition-encoder output channels per layer.
    pub cond_channels: usize,
    /// Condition-encoder kernel sizes; its length is the pyramid depth.
    pub cond_kernels: Vec<usize>,
    /// Slot-decoder width of the intermediate layers.
    pub dec_channels: usize,
    /// Slot-decoder kernel sizes, head excluded.
    pub dec_kernels: Vec<usize>,
    /// Head kernel size (4 output channels; 3 for the adversary).
    pub head_kernel: usize,
    /// Hidden width of the per-slot update perceptron.
    pub mlp_hidden: usize,
    /// Binding iterations used by default.
    pub slot_iters: usize,
    /// When false the decoder ignores the image: the plain flow-autoencoder
    /// baseline. The condition pyramid is neither computed nor concatenated.
    pub conditional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            slot_dim: 48,
            enc_channels: 48,
            enc_kernels: vec![5, 5, 5, 5],
            cond_channels: 24,
            cond_kernels: vec![5, 3, 3, 3, 3],
            dec_channels: 48,
            dec_kernels: vec![5, 3, 3, 3, 3],
            head_kernel: 3,
            mlp_hidden: 96,
            slot_iters: 3,
            conditional: true,
        }
    }
}

impl ModelConfig {
    /// A deliberately small variant for tests and gradient checks.
    pub fn tiny(slot_dim: usize) -> Self {
        ModelConfig {
            slot_dim,
            enc_channels: slot_dim,
            enc_kernels: vec![5, 5, 5, 5],
            cond_channels: (slot_dim / 2).max(2),
            cond_kernels: vec![5, 3, 3, 3, 3],
            dec_channels: slot_dim,
            dec_kernels: vec![5, 3, 3, 3, 3],
            head_kernel: 3,
            mlp_hidden: slot_dim * 2,
            slot_iters: 3,
            conditional: true,
        }
    }

    /// Decoder depth including the head.
    pub fn decoder_layers(&self) -> usize {
        self.dec_kernels.len() + 1
    }

    pub fn validate(&self) -> crate::error::Result<()> {
        use crate::error::DivaError;
        if self.slot_dim == 0 || self.enc_channels == 0 || self.dec_channels == 0 {
            return Err(DivaError::InvalidArgument("zero channel width".into()));
        }
        if self.conditional && self.cond_kernels.len() < self.dec_kernels.len() {
            return Err(DivaError::InvalidArgument(format!(
                "condition pyramid has {} levels but the decoder concatenates {}",
                self.cond_kernels.len(),
                self.dec_kernels.len()
            )));
        }
        for &k in self.enc_kernels.iter().chain(&self.cond_kernels).chain(&self.dec_kernels) {
            if k % 2 == 0 {
                return Err(DivaError::InvalidArgument("kernel sizes must be odd".into()));
            }
        }
        Ok(())
    }
}

/// Numeric constants shared across the stack.
pub mod consts {
    /// Epsilon inside layer normalization.
    pub const LN_EPS: f64 = 1e-5;
    /// Epsilon guarding the per-slot attention normalization.
    pub const ATTN_EPS: f64 = 1e-8;
    /// Tolerance for the mask simplex invariant.
    pub const SIMPLEX_TOL: f64 = 1e-5;
}
