//! The toy class-conditional denoising U-Net used as teacher and student.
//!
//! Topology (latent `4x8x8`, channels `c1=16`, `c2=32` by default):
//!
//! ```text
//! conv_in ─ down1 ─┬─ pool ─ down2 ─┬─ pool ─ mid ─ up2 ─ up1 ─ conv_out
//!                  └──── skip ──────┼──────────────────┘     │
//!                                   └──────── skip ──────────┘
//! ```
//!
//! Down and mid blocks are two conv3x3 layers with a time/class shift added
//! after the first; up blocks upsample, concatenate the skip, merge with a
//! conv1x1 and apply one shifted conv3x3. Every block output is a feature.

mod ops;
mod train;
mod unet;

use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleConfig;
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub use ops::sinusoidal;
pub use train::{
    heldout_mse, heldout_set, synth_image, train_teacher, HeldOut, TeacherConfig, TrainReport,
};
pub use unet::{Grads, ToyUNet, Trace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    Linear,
    TimeEmbed,
}

impl LayerKind {
    pub fn is_conv(self) -> bool {
        matches!(self, LayerKind::Conv3x3 | LayerKind::Conv1x1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub quantizable: bool,
}

impl LayerSpec {
    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv3x3 => vec![self.c_out, self.c_in, 3, 3],
            LayerKind::Conv1x1 => vec![self.c_out, self.c_in, 1, 1],
            LayerKind::Linear | LayerKind::TimeEmbed => vec![self.c_out, self.c_in],
        }
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub size: usize,
    pub channels: [usize; 2],
    pub emb_dim: usize,
    pub n_classes: usize,
    pub schedule: ScheduleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            size: 8,
            channels: [16, 32],
            emb_dim: 32,
            n_classes: 4,
            schedule: ScheduleConfig::default(),
        }
    }
}

/// Layer indices into [`ModelConfig::layers`].
pub mod layer {
    pub const CONV_IN: usize = 0;
    pub const DOWN1: [usize; 3] = [1, 2, 3];
    pub const DOWN2: [usize; 3] = [4, 5, 6];
    pub const MID: [usize; 3] = [7, 8, 9];
    pub const UP2: [usize; 3] = [10, 11, 12];
    pub const UP1: [usize; 3] = [13, 14, 15];
    pub const CONV_OUT: usize = 16;
    pub const TIME_EMBED: usize = 17;
    /// Number of block features exposed for the feature loss.
    pub const FEATURES: usize = 5;
}

impl ModelConfig {
    /// Every parameterised layer in the fixed order used by [`layer`].
    /// Blocks are `[conv1, conv2, temb]` for down/mid and `[merge, conv, temb]` for up.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let [c1, c2] = self.channels;
        let e = self.emb_dim;
        let l = |id: &str, kind, c_in, c_out, quantizable| LayerSpec {
            id: id.to_string(),
            kind,
            c_in,
            c_out,
            quantizable,
        };
        use LayerKind::*;
        vec![
            l("conv_in", Conv3x3, self.in_channels, c1, false),
            l("down1.conv1", Conv3x3, c1, c1, true),
            l("down1.conv2", Conv3x3, c1, c1, true),
            l("down1.temb", Linear, e, c1, true),
            l("down2.conv1", Conv3x3, c1, c2, true),
            l("down2.conv2", Conv3x3, c2, c2, true),
            l("down2.temb", Linear, e, c2, true),
            l("mid.conv1", Conv3x3, c2, c2, true),
            l("mid.conv2", Conv3x3, c2, c2, true),
            l("mid.temb", Linear, e, c2, true),
            l("up2.merge", Conv1x1, 2 * c2, c2, true),
            l("up2.conv", Conv3x3, c2, c2, true),
            l("up2.temb", Linear, e, c2, true),
            l("up1.merge", Conv1x1, c2 + c1, c1, true),
            l("up1.conv", Conv3x3, c1, c1, true),
            l("up1.temb", Linear, e, c1, true),
            l("conv_out", Conv3x3, c1, self.in_channels, false),
            l("time_embed", TimeEmbed, e, e, false),
        ]
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        vec![self.in_channels, self.size, self.size]
    }

    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        if !self.size.is_multiple_of(4) || self.size == 0 {
            return Err(Error::Validation(format!(
                "latent size {} must be a positive multiple of 4",
                self.size
            )));
        }
        if !self.emb_dim.is_multiple_of(2) || self.emb_dim == 0 {
            return Err(Error::Validation(
                "emb_dim must be even and positive".into(),
            ));
        }
        if self.channels.contains(&0) || self.in_channels == 0 || self.n_classes == 0 {
            return Err(Error::Validation(
                "channel and class counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Time-embedding outputs precomputed for every timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEmbedLUT<T = f32> {
    pub table: Tensor<T>,
}

impl<T: Scalar> TimeEmbedLUT<T> {
    pub fn row(&self, t: usize) -> Tensor<T> {
        let e = self.table.shape()[1];
        Tensor::new(vec![e], self.table.data()[t * e..(t + 1) * e].to_vec()).expect("row")
    }
}

/// Optional interception points during a forward pass.
pub trait ForwardHooks<T>: Sync {
    /// Replacement for the input a layer consumes (activation fake-quantization).
    fn layer_input(&self, _layer: usize, _t: usize, _x: &Tensor<T>) -> Option<Tensor<T>> {
        None
    }

    /// Replacement for a conv layer's weight product, bias excluded.
    fn conv(&self, _layer: usize, _x: &Tensor<T>) -> Option<Result<Tensor<T>>> {
        None
    }
}

/// Hooks chained in order: the first to answer wins.
pub struct HookChain<'a, T>(pub Vec<&'a dyn ForwardHooks<T>>);

impl<T: Scalar> ForwardHooks<T> for HookChain<'_, T> {
    fn layer_input(&self, layer: usize, t: usize, x: &Tensor<T>) -> Option<Tensor<T>> {
        self.0.iter().find_map(|h| h.layer_input(layer, t, x))
    }

    fn conv(&self, layer: usize, x: &Tensor<T>) -> Option<Result<Tensor<T>>> {
        self.0.iter().find_map(|h| h.conv(layer, x))
    }
}
