use super::tape::{Tape, Var};
use super::tensor::{NumError, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Adam hyperparameters. Defaults are the conventional ones; the learning
/// rate and weight decay always come from the training config.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    value: Tensor,
    #[serde(skip)]
    grad: Option<Tensor>,
    #[serde(skip)]
    moment1: Option<Tensor>,
    #[serde(skip)]
    moment2: Option<Tensor>,
}

impl Entry {
    fn new(value: Tensor) -> Self {
        Entry {
            value,
            grad: None,
            moment1: None,
            moment2: None,
        }
    }

    fn grad_mut(&mut self) -> &mut Tensor {
        let shape = self.value.shape().to_vec();
        self.grad.get_or_insert_with(|| Tensor::zeros(&shape))
    }
}

/// Named trainable tensors with their gradient accumulators and Adam
/// moments. Names are unique and stable: iteration is always in sorted
/// order, so optimizer steps and checkpoints are deterministic.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    step_count: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        debug_assert!(
            !self.entries.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.entries.insert(name.to_string(), Entry::new(value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).and_then(|e| e.grad.as_ref())
    }

    /// Total number of scalar values across all parameters.
    pub fn count_params(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    /// Register every parameter as a tape leaf, returning name -> Var.
    pub fn bind(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.entries
            .iter()
            .map(|(name, e)| (name.clone(), tape.leaf(e.value.clone())))
            .collect()
    }

    /// Add `delta` into the gradient accumulator of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor) -> Result<(), NumError> {
        let entry = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        entry.grad_mut().add_assign(delta)
    }

    /// Scale every accumulated gradient by `c` (e.g. 1/total_vehicles).
    pub fn scale_grads(&mut self, c: f64) {
        for e in self.entries.values_mut() {
            if let Some(g) = &mut e.grad {
                g.scale_assign(c);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = None;
        }
    }

    /// One bias-corrected Adam update over every entry.
    ///
    /// Decoupled weight decay shrinks the value before the Adam delta is
    /// applied; gradients are zeroed afterwards and the step count advances.
    /// Entries with no accumulated gradient are treated as zero-gradient.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), NumError> {
        for (name, e) in &self.entries {
            if let Some(g) = &e.grad {
                if !g.all_finite() {
                    return Err(NumError::PoisonedGradient { name: name.clone() });
                }
            }
            let _ = e;
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for e in self.entries.values_mut() {
            let shape = e.value.shape().to_vec();
            let zero = Tensor::zeros(&shape);
            let g = e.grad.as_ref().unwrap_or(&zero);
            let m = e.moment1.get_or_insert_with(|| Tensor::zeros(&shape));
            let v = e.moment2.get_or_insert_with(|| Tensor::zeros(&shape));
            if cfg.weight_decay != 0.0 {
                e.value.scale_assign(1.0 - cfg.lr * cfg.weight_decay);
            }
            for ((w, gv), (mv, vv)) in e
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.zero_grads();
        Ok(())
    }
}
