//! Model configuration, parameter initialization and naming, checkpoints,
//! and the trained-model handle used for evaluation.

use crate::datahub::SceneWindow;
use crate::metrics::Forecaster;
use crate::numkit::{NumError, ParamStore, Tape, Tensor, Var};
use crate::predictor::{generate, ForwardMode, PredictedTrajectory};
use crate::tokenizer::tokenize;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Architecture hyperparameters.
///
/// The canonical configuration is 8 decoder layers, 4 heads, and a 256-wide
/// feed-forward hidden layer. `d_model` = 20 keeps the long-history
/// parameter total close to 150k alongside the tokenizer shapes, which
/// scale with the observation horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub t_oh: usize,
    pub t_ph: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            t_oh: 15,
            t_ph: 25,
            d_model: 20,
            n_layers: 8,
            n_heads: 4,
            ffn_width: 256,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the expanded per-vehicle feature vector (8 * t_oh).
    pub fn feat_width(&self) -> usize {
        8 * self.t_oh
    }

    pub fn validate(&self) -> Result<(), NumError> {
        if self.t_oh == 0 || self.t_ph == 0 {
            return Err(NumError::Config("t_oh and t_ph must be positive".into()));
        }
        if self.d_model % 2 != 0 {
            return Err(NumError::Config(format!(
                "d_model must be even for sinusoidal temporal encoding, got {}",
                self.d_model
            )));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(NumError::Config(format!(
                "d_model {} must divide evenly into {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.ffn_width == 0 {
            return Err(NumError::Config(
                "layer count and FFN width must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NumError::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Initialize all trainable tensors: weight matrices uniform in
    /// +-sqrt(6 / (fan_in + fan_out)), biases zero, the node gain beta 1,
    /// layer-norm gains 1. Insertion order is fixed so a given seed always
    /// produces the same values.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore, NumError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let fw = self.feat_width();
        let d = self.d_model;
        let dk = self.d_k();

        let mut weight = |store: &mut ParamStore, name: &str, rows: usize, cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            store.insert(name, Tensor::new(vec![rows, cols], data).expect("sized"));
        };
        let bias = |store: &mut ParamStore, name: &str, cols: usize| {
            store.insert(name, Tensor::zeros(&[1, cols]));
        };

        weight(&mut store, "gat.we", 4 * self.t_oh, fw);
        bias(&mut store, "gat.be", fw);
        store.insert("gat.beta", Tensor::scalar(1.0));
        weight(&mut store, "gat.w0", fw, fw);
        bias(&mut store, "gat.b0", fw);
        weight(&mut store, "gat.w1", fw, fw);
        bias(&mut store, "gat.b1", fw);
        weight(&mut store, "gat.w2", fw, fw);
        bias(&mut store, "gat.b2", fw);
        weight(&mut store, "gat.ca.w1", 8, 2);
        bias(&mut store, "gat.ca.b1", 2);
        weight(&mut store, "gat.ca.w2", 2, 8);
        bias(&mut store, "gat.ca.b2", 8);
        weight(&mut store, "gat.sa.w", 2, 1);
        bias(&mut store, "gat.sa.b", 1);
        weight(&mut store, "gat.win", 10, d);
        bias(&mut store, "gat.bin", d);

        weight(&mut store, "tp.embed.wc", 2, d);
        bias(&mut store, "tp.embed.bc", d);
        for l in 1..=self.n_layers {
            for h in 1..=self.n_heads {
                weight(&mut store, &format!("tp.layer{l}.h{h}.wq"), d, dk);
                weight(&mut store, &format!("tp.layer{l}.h{h}.wk"), d, dk);
                weight(&mut store, &format!("tp.layer{l}.h{h}.wv"), d, dk);
            }
            weight(&mut store, &format!("tp.layer{l}.wo"), self.n_heads * dk, d);
            weight(&mut store, &format!("tp.layer{l}.ffn.w3"), d, self.ffn_width);
            bias(&mut store, &format!("tp.layer{l}.ffn.b3"), self.ffn_width);
            weight(&mut store, &format!("tp.layer{l}.ffn.w4"), self.ffn_width, d);
            bias(&mut store, &format!("tp.layer{l}.ffn.b4"), d);
            store.insert(&format!("tp.layer{l}.ln1.g"), Tensor::full(&[1, d], 1.0));
            bias(&mut store, &format!("tp.layer{l}.ln1.b"), d);
            store.insert(&format!("tp.layer{l}.ln2.g"), Tensor::full(&[1, d], 1.0));
            bias(&mut store, &format!("tp.layer{l}.ln2.b"), d);
        }
        weight(&mut store, "tp.head.wout", d, 2);
        bias(&mut store, "tp.head.bout", 2);
        Ok(store)
    }

    /// Total trainable scalar count for this configuration.
    pub fn param_count(&self) -> Result<usize, NumError> {
        Ok(self.init_params(0)?.count_params())
    }
}

/// Parameters registered on a tape for one forward pass.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind(store: &ParamStore, tape: &mut Tape) -> Self {
        BoundParams {
            vars: store.bind(tape),
        }
    }

    /// Bind all parameters, but substitute `var` for `name`.
    ///
    /// Used by gradient checks that differentiate the loss with respect to
    /// one parameter tensor while holding the rest fixed.
    pub fn bind_with_override(
        store: &ParamStore,
        tape: &mut Tape,
        name: &str,
        var: Var,
    ) -> Self {
        let mut vars = store.bind(tape);
        assert!(
            vars.insert(name.to_string(), var).is_some(),
            "override target {name} is not a known parameter"
        );
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// SHA-256 hex digest of a value's compact JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Self-describing checkpoint: parameter name -> shape + row-major values,
/// plus the optimizer step count and the config hash of the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn new(config_hash: String, model: ModelConfig, store: ParamStore) -> Self {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config_hash,
            model,
            store,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), NumError> {
        let json = serde_json::to_string(self).map_err(|e| NumError::Config(e.to_string()))?;
        std::fs::write(path, json)
            .map_err(|e| NumError::Config(format!("write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NumError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NumError::Config(format!("read {}: {e}", path.display())))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| NumError::Config(e.to_string()))?;
        if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(NumError::Config(format!(
                "checkpoint schema {} unsupported (want {})",
                ckpt.schema_version, CHECKPOINT_SCHEMA_VERSION
            )));
        }
        ckpt.model.validate()?;
        Ok(ckpt)
    }
}

/// A trained (or freshly initialized) model ready for inference.
#[derive(Debug, Clone)]
pub struct VtModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

impl VtModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, NumError> {
        let store = cfg.init_params(seed)?;
        Ok(VtModel { cfg, store })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        VtModel {
            cfg: ckpt.model,
            store: ckpt.store,
        }
    }

    pub fn param_count(&self) -> usize {
        self.store.count_params()
    }
}

impl Forecaster for VtModel {
    fn predict_scene(&self, scene: &SceneWindow) -> Result<Vec<PredictedTrajectory>, NumError> {
        let mut tape = Tape::new();
        let params = BoundParams::bind(&self.store, &mut tape);
        let tokens = tokenize(&mut tape, &params, &self.cfg, scene)?;
        scene
            .vehicles
            .iter()
            .zip(tokens)
            .map(|(vehicle, tok)| {
                generate(
                    &mut tape,
                    &params,
                    &self.cfg,
                    tok,
                    vehicle.last_observed(),
                    self.cfg.t_ph,
                    &mut ForwardMode::Infer,
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ModelConfig::default();
        let a = cfg.init_params(5).unwrap();
        let b = cfg.init_params(5).unwrap();
        for name in a.names() {
            assert_eq!(a.get(name), b.get(name), "{name} differs");
        }
    }

    #[test]
    fn biases_zero_and_beta_one() {
        let store = ModelConfig::default().init_params(1).unwrap();
        assert_eq!(store.get("gat.beta").unwrap().item(), 1.0);
        assert!(store.get("gat.b0").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(store
            .get("tp.layer3.ln1.g")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn odd_d_model_rejected() {
        let cfg = ModelConfig {
            d_model: 15,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn param_count_tracks_horizon() {
        let count = |t_oh: usize| {
            ModelConfig {
                t_oh,
                ..ModelConfig::default()
            }
            .param_count()
            .unwrap()
        };
        let (sh, mh, lh) = (count(5), count(10), count(15));
        assert!(sh < mh && mh < lh, "{sh} {mh} {lh}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig {
            t_oh: 5,
            t_ph: 4,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_width: 16,
            dropout: 0.0,
        };
        let store = cfg.init_params(3).unwrap();
        let ckpt = Checkpoint::new("deadbeef".into(), cfg.clone(), store.clone());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.model, cfg);
        assert_eq!(loaded.config_hash, "deadbeef");
        for name in store.names() {
            assert_eq!(loaded.store.get(name), store.get(name));
        }
    }
}
