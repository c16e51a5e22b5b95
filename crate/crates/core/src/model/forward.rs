use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::params::ParamStore;
use super::{Layer, ModelError, Network, Slot};
use crate::data::SequenceBatch;
use crate::tensor::{Activation, Graph, Mode, NodeId, Padding, Tensor};

/// The recorded graph of one sequence's forward pass.
pub struct Forward {
    pub graph: Graph,
    /// Leaf node of each parameter, in [`ParamStore`] order.
    pub params: Vec<NodeId>,
    pub input: NodeId,
    slots: Vec<NodeId>,
}

impl Forward {
    /// `[T, 2]` per-frame predictions.
    pub fn output(&self) -> NodeId {
        *self.slots.last().expect("at least the input slot")
    }

    pub fn slot(&self, slot: Slot) -> NodeId {
        self.slots[slot]
    }

    pub fn value(&self, slot: Slot) -> &Tensor {
        self.graph.value(self.slots[slot])
    }

    /// `[T, ...]` value of a named tap.
    pub fn tap<'a>(&'a self, net: &Network, name: &str) -> Option<&'a Tensor> {
        net.tap(name).map(|s| self.value(s))
    }
}

/// Dropout stream for sequence `index` of optimizer step `step`.
pub fn sequence_rng(seed: u64, step: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index);
    rng
}

impl Network {
    /// Run the network over one sequence of frames `[T, H, W, C]`, starting
    /// every GRU from a zero state.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        params: &ParamStore,
        frames: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward, ModelError> {
        if frames.rank() != 4 || frames.shape()[1..] != *self.input_shape() {
            let mut expected = vec![0];
            expected.extend_from_slice(self.input_shape());
            return Err(ModelError::Input {
                expected,
                found: frames.shape().to_vec(),
            });
        }
        if params.len() != self.params().len() {
            return Err(ModelError::Spec(format!(
                "parameter store holds {} tensors, network declares {}",
                params.len(),
                self.params().len()
            )));
        }
        let steps = frames.shape()[0];
        let mut g = Graph::new();
        let param_nodes: Vec<NodeId> = params.tensors().iter().map(|t| g.leaf(t.clone())).collect();
        let input = g.leaf(frames.clone());
        let mut slots = Vec::with_capacity(self.layers().len() + 1);
        slots.push(input);
        for layer in self.layers() {
            let node = match *layer {
                Layer::Conv {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                    relu,
                } => {
                    debug_assert_eq!(padding, Padding::Same);
                    let y = g.conv2d(
                        slots[input],
                        param_nodes[kernel],
                        Some(param_nodes[bias]),
                        stride,
                        padding,
                    )?;
                    if relu {
                        g.activation(y, Activation::Relu)?
                    } else {
                        y
                    }
                }
                Layer::Pool { input, k, stride } => g.maxpool2d(slots[input], k, stride)?,
                Layer::Flatten { input } => {
                    let width = g.value(slots[input]).len() / steps;
                    g.reshape(slots[input], vec![steps, width])?
                }
                Layer::Dense {
                    input,
                    weight,
                    bias,
                    relu,
                } => {
                    let y = g.dense(slots[input], param_nodes[weight], param_nodes[bias])?;
                    if relu {
                        g.activation(y, Activation::Relu)?
                    } else {
                        y
                    }
                }
                Layer::Dropout { input, p } => g.dropout(slots[input], p, mode, rng)?,
                Layer::Residual { a, b } => {
                    let s = g.add(slots[a], slots[b])?;
                    g.activation(s, Activation::Relu)?
                }
                Layer::Concat { ref inputs } => {
                    let parts: Vec<NodeId> = inputs.iter().map(|&s| slots[s]).collect();
                    g.concat(&parts)?
                }
                Layer::Gru { input, w, u, b } => {
                    let m = params.tensors()[u].shape()[0];
                    let mut h = g.leaf(Tensor::zeros(&[m]));
                    let mut states = Vec::with_capacity(steps);
                    for t in 0..steps {
                        let x = g.row(slots[input], t)?;
                        h = g.gru_step(x, h, param_nodes[w], param_nodes[u], param_nodes[b])?;
                        states.push(h);
                    }
                    g.stack(&states)?
                }
            };
            slots.push(node);
        }
        Ok(Forward {
            graph: g,
            params: param_nodes,
            input,
            slots,
        })
    }
}

/// Per-frame predictions `[B, T, 2]` for a batch. Sequences are independent;
/// sequence `i` draws dropout masks from `sequence_rng(seed, step, i)`.
pub fn forward_sequence(
    net: &Network,
    params: &ParamStore,
    batch: &SequenceBatch,
    mode: Mode,
    seed: u64,
    step: u64,
) -> Result<Tensor, ModelError> {
    let outputs: Vec<Tensor> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = sequence_rng(seed, step, i as u64);
            let fwd = net.forward(params, &batch.sequence_frames(i), mode, &mut rng)?;
            Ok(fwd.graph.value(fwd.output()).clone())
        })
        .collect::<Result<_, ModelError>>()?;
    let steps = batch.steps();
    let mut data = Vec::with_capacity(batch.len() * steps * 2);
    for o in outputs {
        data.extend(o.into_data());
    }
    Ok(Tensor::new(vec![batch.len(), steps, 2], data)?)
}
