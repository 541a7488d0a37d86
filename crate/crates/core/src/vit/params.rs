//! Named parameter storage, backbone initialization, and binding of stored
//! parameters onto a tape.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ViTConfig;
use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::{derive_rng, sha256_hex};

/// Standard deviation for biases, CLS token and positional embeddings.
const SMALL_INIT_STD: f64 = 0.02;

/// Parameters keyed by name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name).map(|t| t.as_ref())
    }

    pub fn require(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter `{name}`")))
    }

    /// Mutable access; clones the buffer if a tape still shares it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name).map(Arc::make_mut)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.map
            .remove(name)
            .map(|t| Arc::try_unwrap(t).unwrap_or_else(|t| (*t).clone()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// Number of scalars across the named subset.
    pub fn count(&self, names: impl IntoIterator<Item = impl AsRef<str>>) -> usize {
        names
            .into_iter()
            .filter_map(|n| self.get(n.as_ref()))
            .map(Tensor::len)
            .sum()
    }

    /// Hash over names, shapes and exact bit patterns of the selected parameters.
    pub fn fingerprint(&self, mut select: impl FnMut(&str) -> bool) -> String {
        let mut bytes = Vec::new();
        for (name, t) in self.iter().filter(|(n, _)| select(n)) {
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(0);
            for d in t.shape() {
                bytes.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }
}

/// Names of the parameters that receive optimizer updates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainableMask {
    names: BTreeSet<String>,
}

impl TrainableMask {
    pub fn new(names: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            names: names.into_iter().map(Into::into).collect(),
        }
    }

    /// Every parameter in the store; used for full-model gradient checks.
    pub fn all(store: &ParamStore) -> Self {
        Self::new(store.names())
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Binds stored parameters to leaves of one tape on first use.
pub struct Binder<'a> {
    tape: Tape,
    store: &'a ParamStore,
    mask: &'a TrainableMask,
    bound: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, mask: &'a TrainableMask) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mask,
            bound: BTreeMap::new(),
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(v.clone());
        }
        let value = self.store.require(name)?.clone();
        let v = self.tape.leaf(value, self.mask.contains(name));
        self.bound.insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Gradients for every masked parameter. Masked parameters the loss does
    /// not depend on get zero gradients; a masked name absent from the store
    /// is an error.
    pub fn gradients(&mut self, grads: &Gradients) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for name in self.mask.iter() {
            let v = self.var(name)?;
            let g = grads
                .get(&v)
                .unwrap_or_else(|| Tensor::zeros(v.shape()));
            out.insert(name.to_string(), g);
        }
        Ok(out)
    }
}

/// Canonical backbone parameter names and shapes, including the head.
pub fn parameter_shapes(config: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.embed_dim;
    let hidden = config.mlp_hidden();
    let mut v = vec![
        ("patch_embed.weight".to_string(), vec![config.patch_dim(), d]),
        ("patch_embed.bias".to_string(), vec![d]),
        ("cls_token".to_string(), vec![1, d]),
        ("pos_embed".to_string(), vec![config.num_patches(), d]),
    ];
    for l in 0..config.num_blocks {
        let p = |s: &str| format!("blocks.{l}.{s}");
        v.extend([
            (p("norm1.weight"), vec![d]),
            (p("norm1.bias"), vec![d]),
            (p("attn.qkv.weight"), vec![d, 3 * d]),
            (p("attn.qkv.bias"), vec![3 * d]),
            (p("attn.proj.weight"), vec![d, d]),
            (p("attn.proj.bias"), vec![d]),
            (p("norm2.weight"), vec![d]),
            (p("norm2.bias"), vec![d]),
            (p("mlp.fc1.weight"), vec![d, hidden]),
            (p("mlp.fc1.bias"), vec![hidden]),
            (p("mlp.fc2.weight"), vec![hidden, d]),
            (p("mlp.fc2.bias"), vec![d]),
        ]);
    }
    v.extend([
        ("norm.weight".to_string(), vec![d]),
        ("norm.bias".to_string(), vec![d]),
    ]);
    v.extend(head_shapes(config));
    v
}

pub fn head_shapes(config: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    vec![
        (
            "head.weight".to_string(),
            vec![config.embed_dim, config.num_classes],
        ),
        ("head.bias".to_string(), vec![config.num_classes]),
    ]
}

/// True for parameters of the frozen encoder: everything except the head and
/// the tuning parameters (prompts, gate priors, temperatures).
pub fn is_backbone(name: &str) -> bool {
    !(name.starts_with("head.")
        || name.starts_with("prompt.")
        || name.starts_with("gate.")
        || name.starts_with("temp."))
}

/// Initializes one parameter from a stream keyed by `(seed, name)`, so the
/// value never depends on which other parameters exist.
pub fn init_tensor(seed: u64, name: &str, shape: &[usize]) -> Tensor {
    let mut rng = derive_rng(seed, name);
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = if name.ends_with("norm1.weight")
        || name.ends_with("norm2.weight")
        || name == "norm.weight"
    {
        vec![1.0; numel]
    } else if name.ends_with("norm1.bias") || name.ends_with("norm2.bias") || name == "norm.bias" {
        vec![0.0; numel]
    } else if shape.len() == 2 && name.ends_with(".weight") {
        let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
        (0..numel).map(|_| rng.random_range(-bound..bound)).collect()
    } else {
        let normal = Normal::new(0.0, SMALL_INIT_STD).expect("valid std");
        (0..numel).map(|_| normal.sample(&mut rng)).collect()
    };
    Tensor::new(shape.to_vec(), data).expect("shape from parameter table")
}

/// Seed-deterministic initialization of every backbone and head parameter.
pub fn init_params(config: &ViTConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new();
    for (name, shape) in parameter_shapes(config) {
        let t = init_tensor(seed, &name, &shape);
        store.insert(name, t);
    }
    Ok(store)
}
