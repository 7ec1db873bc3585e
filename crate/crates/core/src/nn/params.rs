use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// Anything that exposes named parameter tensors.
///
/// Parameter paths are `/`-separated and stable for a given architecture, so
/// they double as keys for optimizer state, gradient stores and checkpoints.
pub trait Model {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ArrayViewD<f64>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>));
}

/// Gradients accumulated during a backward pass, keyed by parameter path.
#[derive(Debug, Default, Clone)]
pub struct GradStore {
    grads: BTreeMap<String, ArrayD<f64>>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulate a gradient contribution for `path`.
    pub fn add(&mut self, path: &str, g: ArrayD<f64>) {
        match self.grads.get_mut(path) {
            Some(acc) => *acc += &g,
            None => {
                self.grads.insert(path.to_string(), g);
            }
        }
    }

    pub fn get(&self, path: &str) -> Option<&ArrayD<f64>> {
        self.grads.get(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.grads.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(|s| s.as_str())
    }

    /// Drop every gradient whose path does not satisfy the predicate.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.grads.retain(|k, _| keep(k));
    }

    /// True if any stored gradient contains a non-finite value.
    pub fn any_non_finite(&self) -> bool {
        self.grads
            .values()
            .any(|g| g.iter().any(|v| !v.is_finite()))
    }
}

/// Number of scalar parameters reachable from `model`.
pub fn param_count(model: &dyn Model) -> usize {
    let mut n = 0;
    model.visit_params(&mut |_, v| n += v.len());
    n
}

/// SHA-256 over every parameter whose path starts with `prefix` (empty prefix
/// covers the whole model). The digest folds in path, shape and raw little-
/// endian bytes, so it changes iff some covered value or the structure changes.
pub fn checksum_params(model: &dyn Model, prefix: &str) -> String {
    checksum_params_where(model, |path| path.starts_with(prefix))
}

/// SHA-256 over the parameters selected by the predicate; visit order is
/// architecture-stable, so equal selections hash equal.
pub fn checksum_params_where(model: &dyn Model, keep: impl Fn(&str) -> bool) -> String {
    let mut hasher = Sha256::new();
    model.visit_params(&mut |path, v| {
        if !keep(path) {
            return;
        }
        hasher.update(path.as_bytes());
        hasher.update([0u8]);
        for d in v.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for x in v.iter() {
            hasher.update(x.to_le_bytes());
        }
    });
    to_hex(&hasher.finalize())
}

pub fn to_hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
