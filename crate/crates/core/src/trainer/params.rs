use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Declared shape of one learnable tensor. `fan_in == 0` marks a bias.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ParamSpec {
    /// Weight and bias of a `c_in → c_out` convolution with a `k×k` kernel.
    pub(crate) fn conv(prefix: &str, c_in: usize, c_out: usize, k: usize) -> [ParamSpec; 2] {
        [
            ParamSpec {
                path: format!("{prefix}.weight"),
                shape: vec![c_out, c_in, k, k],
                fan_in: c_in * k * k,
            },
            ParamSpec {
                path: format!("{prefix}.bias"),
                shape: vec![c_out],
                fan_in: 0,
            },
        ]
    }
}

/// Every learnable tensor the configuration instantiates.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    crate::encoders::layout(cfg, &mut out);
    crate::csc::layout(cfg, &mut out);
    crate::cri::layout(cfg, &mut out);
    crate::refine::layout(cfg, &mut out);
    out
}

/// Named learnable tensors.
///
/// Reads through [`ModelParams::get`] and [`ModelParams::get_mut`] are
/// counted so callers can prove that a code path consults no weights.
#[derive(Debug)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
    init_seed: u64,
    accesses: AtomicU64,
}

impl Clone for ModelParams {
    fn clone(&self) -> Self {
        ModelParams {
            tensors: self.tensors.clone(),
            init_seed: self.init_seed,
            accesses: AtomicU64::new(0),
        }
    }
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.init_seed == other.init_seed && self.tensors == other.tensors
    }
}

/// Fan-in scaled uniform initialization: weights drawn from
/// `U(-sqrt(3/fan_in), sqrt(3/fan_in))` (standard deviation `1/sqrt(fan_in)`),
/// biases zero. Tensors are drawn in path order from one seeded stream.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut specs = param_layout(cfg);
    specs.sort_by(|a, b| a.path.cmp(&b.path));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for spec in specs {
        let t = if spec.fan_in == 0 {
            Tensor::zeros(spec.shape.clone())?
        } else {
            let bound = (3.0 / spec.fan_in as f64).sqrt();
            Tensor::uniform(spec.shape.clone(), -bound, bound, &mut rng)?
        };
        if tensors.insert(spec.path.clone(), t).is_some() {
            return Err(Error::invalid("init_params", format!("duplicate parameter path {}", spec.path)));
        }
    }
    Ok(ModelParams::from_map(tensors, seed))
}

impl ModelParams {
    pub fn from_map(tensors: BTreeMap<String, Tensor>, init_seed: u64) -> Self {
        ModelParams {
            tensors,
            init_seed,
            accesses: AtomicU64::new(0),
        }
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.accesses.fetch_add(1, Ordering::Relaxed);
        self.tensors
            .get(path)
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.accesses.fetch_add(1, Ordering::Relaxed);
        self.tensors
            .get_mut(path)
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    /// Presence test; not counted as an access.
    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(path.into(), t)
    }

    pub fn remove(&mut self, path: &str) -> Option<Tensor> {
        self.tensors.remove(path)
    }

    /// Uncounted iteration in path order, for persistence and optimizers.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn access_count(&self) -> u64 {
        self.accesses.load(Ordering::Relaxed)
    }

    pub fn reset_access_count(&self) {
        self.accesses.store(0, Ordering::Relaxed);
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::clear_grad);
    }

    /// Confirms that every tensor the configuration needs is present with
    /// the declared shape.
    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        for spec in param_layout(cfg) {
            let Some(t) = self.tensors.get(&spec.path) else {
                return Err(Error::MissingParam(spec.path));
            };
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape(
                    "check_compatible",
                    format!("{} shaped {:?}", spec.path, spec.shape),
                    t.shape(),
                ));
            }
        }
        Ok(())
    }
}
