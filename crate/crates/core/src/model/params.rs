use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::ArchitectureSpec;
use super::{ModelError, Network};
use crate::tensor::{Container, Tensor};

/// Container attribute prefix for serialized architecture fields.
pub(crate) const ARCH_ATTR: &str = "arch.";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±gain·sqrt(6 / fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    Uniform { bound: f64 },
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Parameter values for one [`Network`], in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the seed bytes then the name
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in seed.to_le_bytes().iter().chain(name.as_bytes()) {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Draw every parameter from its declared initializer.
///
/// Each tensor has its own stream derived from `(seed, name)`, so adding or
/// removing one parameter never perturbs the others.
pub fn init_parameters(net: &Network, seed: u64) -> ParamStore {
    let tensors = net
        .params()
        .iter()
        .map(|p| {
            let mut t = Tensor::zeros(&p.shape);
            let bound = match p.init {
                Init::FanIn { fan_in, gain } => gain * (6.0 / fan_in as f64).sqrt(),
                Init::Uniform { bound } => bound,
                Init::Zeros => 0.0,
            };
            if bound > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &p.name));
                for v in t.data_mut() {
                    *v = rng.gen_range(-bound..bound);
                }
            }
            t
        })
        .collect();
    ParamStore {
        names: net.params().iter().map(|p| p.name.clone()).collect(),
        tensors,
    }
}

impl ParamStore {
    pub fn zeros(net: &Network) -> Self {
        Self {
            names: net.params().iter().map(|p| p.name.clone()).collect(),
            tensors: net.params().iter().map(|p| Tensor::zeros(&p.shape)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Checkpoint: every tensor under its name, plus the architecture as
    /// `arch.*` attributes so the network can be rebuilt from the file alone.
    pub fn to_container(&self, net: &Network) -> Result<Container, ModelError> {
        let mut c = Container::new();
        for (k, v) in net.spec().to_pairs() {
            c.set_attr(&format!("{ARCH_ATTR}{k}"), &v)?;
        }
        for (name, t) in self.iter() {
            c.push(name, t.clone())?;
        }
        Ok(c)
    }

    /// Read every parameter of `net` from `c`, checking shapes by name.
    pub fn from_container(net: &Network, c: &Container) -> Result<Self, ModelError> {
        let mut store = Self::zeros(net);
        for (spec, slot) in net.params().iter().zip(store.tensors.iter_mut()) {
            let t = c
                .get(&spec.name)
                .ok_or_else(|| ModelError::MissingParam(spec.name.clone()))?;
            check_shape(&spec.name, &spec.shape, t)?;
            *slot = t.clone();
        }
        Ok(store)
    }

    /// Overwrite every parameter whose name starts with `prefix` by the
    /// tensor named without the prefix in `c` (a standalone checkpoint).
    /// Returns how many tensors were loaded.
    pub fn load_prefixed(&mut self, c: &Container, prefix: &str) -> Result<usize, ModelError> {
        let mut loaded = 0;
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let Some(local) = name.strip_prefix(prefix) else {
                continue;
            };
            let t = c.get(local).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            check_shape(name, slot.shape(), t)?;
            *slot = t.clone();
            loaded += 1;
        }
        Ok(loaded)
    }
}

fn check_shape(name: &str, expected: &[usize], found: &Tensor) -> Result<(), ModelError> {
    if found.shape() != expected {
        return Err(ModelError::ParamShape {
            name: name.to_string(),
            expected: expected.to_vec(),
            found: found.shape().to_vec(),
        });
    }
    Ok(())
}

/// Rebuild the architecture recorded in a checkpoint's attributes.
pub fn spec_from_container(c: &Container) -> Result<ArchitectureSpec, ModelError> {
    let pairs: Vec<(&str, &str)> = c
        .attrs()
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(ARCH_ATTR).map(|k| (k, v.as_str())))
        .collect();
    if pairs.is_empty() {
        return Err(ModelError::Spec("checkpoint carries no architecture attributes".into()));
    }
    ArchitectureSpec::from_pairs(pairs).map_err(ModelError::Spec)
}
