//! Named parameter store with seeded initialization, checkpoint glue, and
//! per-forward graph binding.
//!
//! Parameters live outside any graph; each forward pass binds them as leaf
//! tensors into a fresh tape. Initialization is keyed by parameter name so
//! adding or removing parameters never reshuffles the others.

use crate::checkpoint::{Checkpoint, Entry};
use crate::error::{MdgError, Result};
use crate::rng::StreamKey;
use crate::tensor::{Graph, Tensor};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Xavier-uniform over (fan_in, fan_out).
    Xavier(usize, usize),
    /// Gaussian with the given std; used for embeddings.
    Normal(f64),
    /// Explicit initial values.
    Values(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Whether decoupled weight decay applies (embeddings opt out).
    pub decay: bool,
    /// Adam moment accumulators.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    seed: u64,
}

fn name_key(seed: u64, name: &str) -> StreamKey {
    let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV-1a
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    StreamKey::root(seed).child(h)
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            seed,
        }
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init, decay: bool) {
        assert!(
            !self.params.contains_key(name),
            "parameter {name} registered twice"
        );
        let n: usize = shape.iter().product();
        let mut rng = name_key(self.seed, name).stream();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Xavier(fan_in, fan_out) => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.next_range(-limit, limit)).collect()
            }
            Init::Normal(std) => (0..n).map(|_| std * rng.next_normal()).collect(),
            Init::Values(v) => {
                assert_eq!(v.len(), n, "init values length mismatch for {name}");
                v
            }
        };
        self.params.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                data,
                decay,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn assert_finite(&self) -> Result<()> {
        for (name, p) in &self.params {
            if !p.data.iter().all(|v| v.is_finite()) {
                return Err(MdgError::numeric(format!(
                    "parameter {name} contains non-finite values"
                )));
            }
        }
        Ok(())
    }

    /// Bind every parameter as a leaf in `g`. Leaves require gradients on
    /// training graphs and are plain constants on inference graphs.
    pub fn bind(&self, g: &Graph) -> Binding {
        let mut map = BTreeMap::new();
        for (name, p) in &self.params {
            let t = g.tensor(p.data.clone(), &p.shape, true);
            map.insert(name.clone(), t);
        }
        Binding { map }
    }

    /// Collect gradients from a binding, in stable name order. Missing
    /// grads (parameters unused by this graph) come back as zeros.
    pub fn grads_from(&self, binding: &Binding) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, p) in &self.params {
            let g = binding
                .map
                .get(name)
                .and_then(|t| t.grad())
                .unwrap_or_else(|| vec![0.0; p.data.len()]);
            out.insert(name.clone(), g);
        }
        out
    }

    pub fn to_checkpoint(&self, config_text: String) -> Checkpoint {
        let entries = self
            .params
            .iter()
            .map(|(name, p)| Entry {
                name: name.clone(),
                shape: p.shape.clone(),
                data: p.data.clone(),
            })
            .collect();
        Checkpoint {
            config_text,
            entries,
        }
    }

    /// Load values from a checkpoint; every entry must match a registered
    /// parameter with an identical shape.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.entries.len() != self.params.len() {
            return Err(MdgError::data(format!(
                "checkpoint has {} entries, model expects {}",
                ck.entries.len(),
                self.params.len()
            )));
        }
        for e in &ck.entries {
            let p = self.params.get_mut(&e.name).ok_or_else(|| {
                MdgError::data(format!("checkpoint entry {} is not a model parameter", e.name))
            })?;
            if p.shape != e.shape {
                return Err(MdgError::data(format!(
                    "shape mismatch for {}: checkpoint {:?}, model {:?}",
                    e.name, e.shape, p.shape
                )));
            }
            p.data = e.data.clone();
        }
        Ok(())
    }
}

/// Per-graph view of the parameters.
pub struct Binding {
    map: BTreeMap<String, Tensor>,
}

impl Binding {
    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }
}

// ── layer building blocks ────────────────────────────────────────────

/// Dense layer y = x W + b applied over the last dim.
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn register(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) {
        store.register(
            &format!("{name}.w"),
            &[d_in, d_out],
            Init::Xavier(d_in, d_out),
            true,
        );
        store.register(&format!("{name}.b"), &[d_out], Init::Zeros, true);
    }

    pub fn bind(b: &Binding, name: &str) -> Linear {
        Linear {
            w: b.get(&format!("{name}.w")).clone(),
            b: b.get(&format!("{name}.b")).clone(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w).add(&self.b)
    }
}

/// Two-layer MLP with GELU.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn register(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize) {
        Linear::register(store, &format!("{name}.fc1"), d_in, hidden);
        Linear::register(store, &format!("{name}.fc2"), hidden, d_out);
    }

    pub fn bind(b: &Binding, name: &str) -> Mlp {
        Mlp {
            fc1: Linear::bind(b, &format!("{name}.fc1")),
            fc2: Linear::bind(b, &format!("{name}.fc2")),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.fc2.forward(&self.fc1.forward(x).gelu())
    }
}

/// LayerNorm parameters over the last dim.
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

pub const LN_EPS: f64 = 1e-6;

impl Norm {
    pub fn register(store: &mut ParamStore, name: &str, d: usize) {
        store.register(&format!("{name}.gain"), &[d], Init::Ones, true);
        store.register(&format!("{name}.bias"), &[d], Init::Zeros, true);
    }

    pub fn bind(b: &Binding, name: &str) -> Norm {
        Norm {
            gain: b.get(&format!("{name}.gain")).clone(),
            bias: b.get(&format!("{name}.bias")).clone(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layernorm(&self.gain, &self.bias, LN_EPS)
    }
}
