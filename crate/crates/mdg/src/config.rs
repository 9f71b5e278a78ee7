//! Run configuration: flat key=value files with section prefixes
//! (model., train., infer., eval.), flag overrides, and reproducibility
//! snapshots with content hashes.

use crate::error::{MdgError, Result};
use crate::model::ModelConfig;
use crate::train::{MaskPolicy, TrainConfig};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    map: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MdgError::usage(format!("config line {} lacks '=': {line}", n + 1)))?;
            cfg.map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.map.insert(key.to_string(), value.to_string());
    }

    /// Apply `key=value` override strings.
    pub fn apply_overrides(&mut self, kvs: &[String]) -> Result<()> {
        for kv in kvs {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| MdgError::usage(format!("override lacks '=': {kv}")))?;
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| MdgError::usage(format!("bad integer for {key}: {v}"))),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| MdgError::usage(format!("bad number for {key}: {v}"))),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| MdgError::usage(format!("bad integer for {key}: {v}"))),
        }
    }

    /// Sorted key=value lines; written next to every run's outputs.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.map {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn content_hash(&self) -> String {
        hex_digest(self.snapshot().as_bytes())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        Ok(ModelConfig {
            d: self.get_usize("model.d", d.d)?,
            heads: self.get_usize("model.heads", d.heads)?,
            encoder_layers: self.get_usize("model.encoder_layers", d.encoder_layers)?,
            mixer_layers: self.get_usize("model.mixer_layers", d.mixer_layers)?,
            denoiser_blocks: self.get_usize("model.denoiser_blocks", d.denoiser_blocks)?,
            modalities: self.get_usize("model.modalities", d.modalities)?,
            k_levels: self.get_usize("model.k_levels", d.k_levels)?,
            fourier_freqs: self.get_usize("model.fourier_freqs", d.fourier_freqs)?,
            ffn_mult: self.get_usize("model.ffn_mult", d.ffn_mult)?,
            history: self.get_usize("model.history", d.history)?,
            horizon: self.get_usize("model.horizon", d.horizon)?,
            chunk: self.get_usize("model.chunk", d.chunk)?,
            waypoints: self.get_usize("model.waypoints", d.waypoints)?,
            max_agents: self.get_usize("model.max_agents", d.max_agents)?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let policy_str = self.get("train.mask_policy").unwrap_or("adaptive");
        let mask_policy = MaskPolicy::from_tag(policy_str)
            .ok_or_else(|| MdgError::usage(format!("unknown mask policy {policy_str}")))?;
        Ok(TrainConfig {
            lambda: self.get_f64("train.lambda", d.lambda)?,
            lr: self.get_f64("train.lr", d.lr)?,
            warmup_steps: self.get_usize("train.warmup_steps", d.warmup_steps)?,
            decay_every: self.get_usize("train.decay_every", d.decay_every)?,
            decay_factor: self.get_f64("train.decay_factor", d.decay_factor)?,
            grad_clip: self.get_f64("train.grad_clip", d.grad_clip)?,
            weight_decay: self.get_f64("train.weight_decay", d.weight_decay)?,
            beta1: self.get_f64("train.beta1", d.beta1)?,
            beta2: self.get_f64("train.beta2", d.beta2)?,
            adam_eps: self.get_f64("train.adam_eps", d.adam_eps)?,
            epochs: self.get_usize("train.epochs", d.epochs)?,
            batch_size: self.get_usize("train.batch_size", d.batch_size)?,
            seed: self.get_u64("train.seed", d.seed)?,
            mask_policy,
            perturb: self.get_f64("train.perturb", d.perturb)?,
            threads: self.get_usize("train.threads", d.threads)?,
            ckpt_every: self.get_usize("train.ckpt_every", d.ckpt_every)?,
        })
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex_digest(&std::fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_sections_and_overrides() {
        let text = "# comment\nmodel.d=32\ntrain.epochs=3\ninfer.samples=8\n";
        let mut cfg = RunConfig::parse(text).unwrap();
        cfg.apply_overrides(&["train.epochs=7".to_string()]).unwrap();
        assert_eq!(cfg.get_usize("model.d", 64).unwrap(), 32);
        assert_eq!(cfg.get_usize("train.epochs", 5).unwrap(), 7);
        assert_eq!(cfg.get_usize("infer.samples", 1).unwrap(), 8);
        assert_eq!(cfg.get_usize("eval.absent", 9).unwrap(), 9);
    }

    #[test]
    fn snapshot_is_sorted_and_hash_stable() {
        let a = RunConfig::parse("b.k=2\na.k=1\n").unwrap();
        let b = RunConfig::parse("a.k=1\nb.k=2\n").unwrap();
        assert_eq!(a.snapshot(), "a.k=1\nb.k=2\n");
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn typed_configs_from_keys() {
        let cfg = RunConfig::parse("model.d=32\ntrain.lr=1e-3\ntrain.mask_policy=random\n").unwrap();
        let mc = cfg.model_config().unwrap();
        assert_eq!(mc.d, 32);
        assert_eq!(mc.heads, 2);
        let tc = cfg.train_config().unwrap();
        assert_eq!(tc.lr, 1e-3);
        assert_eq!(tc.mask_policy, MaskPolicy::Random);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let cfg = RunConfig::parse("train.epochs=soon\n").unwrap();
        assert!(cfg.train_config().is_err());
        assert!(RunConfig::parse("no-equals-here\n").is_err());
    }
}
