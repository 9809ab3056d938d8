//! A small differentiable-function toolkit: parameter blocks with Adam state,
//! dense and LSTM layers with hand-written reverse passes, a tanh-squashed
//! Gaussian head, finite-difference gradient checks and checkpoints.

mod dense;
mod gaussian;
mod gradcheck;
mod lstm;

pub use dense::{Activation, Dense, DenseCache};
pub use gaussian::{
    sample_squashed_gaussian, squashed_gaussian_grads, squashed_log_density, GaussianPolicyOutput, SquashedGrads,
    LOG_STD_MAX, LOG_STD_MIN,
};
pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
pub use lstm::{Lstm, LstmCache};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named array of trainable values with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step_count: u64,
}

impl ParamBlock {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let len = shape.iter().product();
        ParamBlock {
            name: name.into(),
            shape: shape.to_vec(),
            values: vec![0.0; len],
            grad: vec![0.0; len],
            adam_m: vec![0.0; len],
            adam_v: vec![0.0; len],
            step_count: 0,
        }
    }

    pub fn from_values(name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Self {
        let mut b = Self::zeros(name, shape);
        assert_eq!(b.values.len(), values.len(), "values do not match shape");
        b.values = values;
        b
    }

    /// Uniform initialization in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut b = Self::zeros(name, shape);
        for v in &mut b.values {
            *v = rng.gen_range(-bound..=bound);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update; clears the gradient afterwards.
pub fn adam_step(block: &mut ParamBlock, cfg: &AdamConfig) -> Result<()> {
    if block.grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(block.name.clone()));
    }
    block.step_count += 1;
    let t = block.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..block.values.len() {
        let g = block.grad[i];
        block.adam_m[i] = cfg.beta1 * block.adam_m[i] + (1.0 - cfg.beta1) * g;
        block.adam_v[i] = cfg.beta2 * block.adam_v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = block.adam_m[i] / bc1;
        let v_hat = block.adam_v[i] / bc2;
        block.values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        block.grad[i] = 0.0;
    }
    Ok(())
}

/// Anything that owns trainable parameter blocks.
pub trait Parameterized {
    fn blocks(&self) -> Vec<&ParamBlock>;
    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock>;

    fn zero_grad(&mut self) {
        for b in self.blocks_mut() {
            b.zero_grad();
        }
    }

    fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for b in self.blocks_mut() {
            adam_step(b, cfg)?;
        }
        Ok(())
    }

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }
}

/// `target ← τ·online + (1−τ)·target` over matching blocks.
pub fn soft_update<M: Parameterized>(target: &mut M, online: &M, tau: f64) {
    let online = online.blocks();
    for (t, o) in target.blocks_mut().into_iter().zip(online) {
        assert_eq!(t.shape, o.shape, "soft update shape mismatch for {}", t.name);
        for (tv, ov) in t.values.iter_mut().zip(&o.values) {
            *tv = tau * ov + (1.0 - tau) * *tv;
        }
    }
}

pub const CHECKPOINT_FORMAT: &str = "tracesac-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointBlock {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Checkpoint document: `{"format", "version", "blocks": [{"name", "shape",
/// "values"}]}` with values in shortest round-trip decimal form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    blocks: Vec<CheckpointBlock>,
}

pub fn checkpoint_to_string<M: Parameterized>(model: &M) -> Result<String> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        blocks: model
            .blocks()
            .into_iter()
            .map(|b| CheckpointBlock {
                name: b.name.clone(),
                shape: b.shape.clone(),
                values: b.values.clone(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

/// Loads values into a model of identical architecture.
pub fn load_checkpoint_str<M: Parameterized>(model: &mut M, text: &str) -> Result<()> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            file.format, file.version
        )));
    }
    let mut blocks = model.blocks_mut();
    if blocks.len() != file.blocks.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} blocks, found {}",
            blocks.len(),
            file.blocks.len()
        )));
    }
    for (dst, src) in blocks.iter_mut().zip(file.blocks) {
        if dst.name != src.name || dst.shape != src.shape || src.values.len() != dst.len() {
            return Err(Error::Checkpoint(format!(
                "block `{}` {:?} does not match `{}` {:?}",
                src.name, src.shape, dst.name, dst.shape
            )));
        }
        dst.values = src.values;
    }
    Ok(())
}

pub fn save_checkpoint<M: Parameterized>(model: &M, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<M: Parameterized>(model: &mut M, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint_str(model, &text)
}
