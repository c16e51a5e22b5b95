//! Architecture specs, builders for every network variant, parameter storage
//! and sequence-level forward evaluation.
//!
//! A [`Network`] is a static description: an ordered list of layer records
//! over numbered slots, the parameter inventory, and named taps. Slot 0 is the
//! per-frame input; layer `i` writes slot `i + 1`. Shapes are inferred at
//! build time and exclude the time axis.

mod build;
mod forward;
mod params;
mod spec;

pub use build::{build, build_basic_cnn_rnn, build_fusion, build_multi_rnn, build_resnet_rnn, build_vgg_cnn};
pub use forward::{forward_sequence, sequence_rng, Forward};
pub use params::{init_parameters, spec_from_container, Init, ParamSpec, ParamStore};
pub use spec::{ArchitectureSpec, Backbone, ConvTap, Scale, Variant};

use thiserror::Error;

use crate::tensor::{ContainerError, Padding, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Spec(String),
    #[error("layer `{layer}`: {detail}")]
    Shape { layer: String, detail: String },
    #[error("parameter `{name}`: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter `{0}` missing")]
    MissingParam(String),
    #[error("input frames {found:?} do not match network input {expected:?}")]
    Input { expected: Vec<usize>, found: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Index of a layer output. Slot 0 is the network input.
pub type Slot = usize;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        input: Slot,
        kernel: usize,
        bias: usize,
        stride: usize,
        padding: Padding,
        relu: bool,
    },
    Pool {
        input: Slot,
        k: usize,
        stride: usize,
    },
    Flatten {
        input: Slot,
    },
    Dense {
        input: Slot,
        weight: usize,
        bias: usize,
        relu: bool,
    },
    Dropout {
        input: Slot,
        p: f64,
    },
    /// `relu(a + b)`
    Residual {
        a: Slot,
        b: Slot,
    },
    Concat {
        inputs: Vec<Slot>,
    },
    /// One GRU layer unrolled over time from a zero state.
    Gru {
        input: Slot,
        w: usize,
        u: usize,
        b: usize,
    },
}

/// A recurrent head and the taps that feed it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RnnHead {
    pub name: String,
    pub inputs: Vec<String>,
    pub input_width: usize,
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: ArchitectureSpec,
    params: Vec<ParamSpec>,
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
    taps: Vec<(String, Slot)>,
    heads: Vec<RnnHead>,
}

impl Network {
    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Per-frame input shape `[side, side, channels]`.
    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    /// Per-frame shape of a slot.
    pub fn slot_shape(&self, slot: Slot) -> &[usize] {
        &self.shapes[slot]
    }

    pub fn output_slot(&self) -> Slot {
        self.layers.len()
    }

    pub fn taps(&self) -> &[(String, Slot)] {
        &self.taps
    }

    pub fn tap(&self, name: &str) -> Option<Slot> {
        self.taps.iter().find(|(n, _)| n == name).map(|&(_, s)| s)
    }

    pub fn tap_shape(&self, name: &str) -> Option<&[usize]> {
        self.tap(name).map(|s| self.slot_shape(s))
    }

    pub fn rnn_heads(&self) -> &[RnnHead] {
        &self.heads
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}

#[cfg(test)]
mod tests;
