//! The neural scene model: configuration, parameter registration, and the
//! forward passes (scene encoding, auxiliary prediction, denoising).

pub mod attention;
pub mod context;
pub mod denoiser;
pub mod encoder;
pub mod params;

pub use context::{build_context, SceneContext};
pub use denoiser::denoise;
pub use encoder::{aux_predict, encode_scene, EncodedScene};
pub use params::{Binding, ParamStore};

use crate::checkpoint::Checkpoint;
use crate::error::{MdgError, Result};
use crate::kinematics::{ACTION_MEAN, ACTION_STD, CHUNK};
use crate::tensor::{Graph, Tensor};
use std::path::Path;

/// Model hyperparameters. The desk-scale default trains on a CPU in
/// minutes; the large preset mirrors the full-scale configuration and is
/// used for shape tests only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub mixer_layers: usize,
    pub denoiser_blocks: usize,
    pub modalities: usize,
    pub k_levels: usize,
    pub fourier_freqs: usize,
    pub ffn_mult: usize,
    pub history: usize,
    pub horizon: usize,
    pub chunk: usize,
    pub waypoints: usize,
    pub max_agents: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            heads: 2,
            encoder_layers: 2,
            mixer_layers: 2,
            denoiser_blocks: 1,
            modalities: 6,
            k_levels: 5,
            fourier_freqs: 8,
            ffn_mult: 4,
            history: 10,
            horizon: 40,
            chunk: CHUNK,
            waypoints: 16,
            max_agents: 16,
        }
    }
}

impl ModelConfig {
    /// Full-scale configuration (shape tests only at desk scale).
    pub fn large() -> Self {
        ModelConfig {
            d: 256,
            heads: 8,
            encoder_layers: 6,
            mixer_layers: 2,
            denoiser_blocks: 2,
            modalities: 6,
            k_levels: 5,
            fourier_freqs: 8,
            ffn_mult: 4,
            history: 11,
            horizon: 80,
            chunk: CHUNK,
            waypoints: 16,
            max_agents: 128,
        }
    }

    pub fn t_a(&self) -> usize {
        assert!(
            self.horizon % self.chunk == 0,
            "horizon {} not divisible by chunk {}",
            self.horizon,
            self.chunk
        );
        self.horizon / self.chunk
    }

    /// Plain-text key=value block embedded in checkpoints.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("model.{k}={v}\n"));
        kv("d", self.d.to_string());
        kv("heads", self.heads.to_string());
        kv("encoder_layers", self.encoder_layers.to_string());
        kv("mixer_layers", self.mixer_layers.to_string());
        kv("denoiser_blocks", self.denoiser_blocks.to_string());
        kv("modalities", self.modalities.to_string());
        kv("k_levels", self.k_levels.to_string());
        kv("fourier_freqs", self.fourier_freqs.to_string());
        kv("ffn_mult", self.ffn_mult.to_string());
        kv("history", self.history.to_string());
        kv("horizon", self.horizon.to_string());
        kv("t_a", self.t_a().to_string());
        kv("chunk", self.chunk.to_string());
        kv("waypoints", self.waypoints.to_string());
        kv("max_agents", self.max_agents.to_string());
        kv("action_mean", format!("{},{}", ACTION_MEAN[0], ACTION_MEAN[1]));
        kv("action_std", format!("{},{}", ACTION_STD[0], ACTION_STD[1]));
        s
    }

    pub fn from_text(text: &str) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| MdgError::data(format!("bad config line: {line}")))?;
            let Some(field) = key.strip_prefix("model.") else {
                continue;
            };
            let parse = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|_| MdgError::data(format!("bad value for {key}: {v}")))
            };
            match field {
                "d" => cfg.d = parse(val)?,
                "heads" => cfg.heads = parse(val)?,
                "encoder_layers" => cfg.encoder_layers = parse(val)?,
                "mixer_layers" => cfg.mixer_layers = parse(val)?,
                "denoiser_blocks" => cfg.denoiser_blocks = parse(val)?,
                "modalities" => cfg.modalities = parse(val)?,
                "k_levels" => cfg.k_levels = parse(val)?,
                "fourier_freqs" => cfg.fourier_freqs = parse(val)?,
                "ffn_mult" => cfg.ffn_mult = parse(val)?,
                "history" => cfg.history = parse(val)?,
                "horizon" => cfg.horizon = parse(val)?,
                "chunk" => cfg.chunk = parse(val)?,
                "waypoints" => cfg.waypoints = parse(val)?,
                "max_agents" => cfg.max_agents = parse(val)?,
                "t_a" | "action_mean" | "action_std" => {}
                _ => return Err(MdgError::data(format!("unknown config key {key}"))),
            }
        }
        Ok(cfg)
    }
}

/// The full model: configuration plus named parameters.
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Model {
        let mut store = ParamStore::new(seed);
        encoder::register_encoder(&mut store, &cfg);
        denoiser::register_denoiser(&mut store, &cfg);
        Model { cfg, store }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_values()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.to_checkpoint(self.cfg.to_text()).save(path)
    }

    /// Load a checkpoint, rebuilding the model from the embedded config.
    /// Mismatched shapes are refused by the parameter store.
    pub fn load(path: &Path) -> Result<Model> {
        let ck = Checkpoint::load(path)?;
        let cfg = ModelConfig::from_text(&ck.config_text)?;
        let mut model = Model::new(cfg, 0);
        model.store.load_checkpoint(&ck)?;
        Ok(model)
    }
}

/// Replace the block of rows starting at `idx` along axis 0 with `rows`.
pub(crate) fn splice_rows(g: &Graph, x: &Tensor, idx: usize, rows: &Tensor) -> Tensor {
    let total = x.shape()[0];
    let len = rows.shape()[0];
    let mut parts: Vec<Tensor> = Vec::new();
    if idx > 0 {
        parts.push(x.narrow(0, 0, idx));
    }
    parts.push(rows.clone());
    if idx + len < total {
        parts.push(x.narrow(0, idx + len, total - idx - len));
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    g.concat(&refs, 0)
}

/// Subsample an (N, T, 5) rollout at chunk ends: (N, T_a, 5).
pub fn chunk_end_states(states: &Tensor, chunk: usize) -> Tensor {
    let sh = states.shape();
    let (t, _) = (sh[1], sh[2]);
    assert!(t % chunk == 0, "state length not divisible by chunk");
    let g = states.graph().clone();
    let parts: Vec<Tensor> = (0..t / chunk)
        .map(|k| states.narrow(1, k * chunk + chunk - 1, 1))
        .collect();
    let refs: Vec<&Tensor> = parts.iter().collect();
    g.concat(&refs, 1)
}
