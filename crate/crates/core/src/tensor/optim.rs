use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Which elements of one parameter tensor an optimizer step may touch.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamMask {
    All,
    Frozen,
    Elements(Vec<bool>),
}

impl ParamMask {
    pub fn is_frozen(&self) -> bool {
        match self {
            ParamMask::Frozen => true,
            ParamMask::All => false,
            ParamMask::Elements(m) => !m.iter().any(|&b| b),
        }
    }

    fn allows(&self, i: usize) -> bool {
        match self {
            ParamMask::All => true,
            ParamMask::Frozen => false,
            ParamMask::Elements(m) => m[i],
        }
    }
}

/// Per-parameter trainability. Parameters missing from the map are frozen.
pub type TrainMask = BTreeMap<String, ParamMask>;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Steps over which the learning rate decays linearly to zero.
    pub total_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            total_steps: 1,
        }
    }
}

/// Moment buffers and step counter for AdamW with linear decay, no warm-up.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: usize,
    first: BTreeMap<String, Vec<f32>>,
    second: BTreeMap<String, Vec<f32>>,
}

impl OptimizerState {
    pub fn new(params: &BTreeMap<String, Tensor>, config: AdamWConfig) -> Self {
        let zeros = |t: &Tensor| vec![0.0; t.numel()];
        OptimizerState {
            config,
            step: 0,
            first: params.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
            second: params.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> f32 {
        let total = self.config.total_steps.max(1) as f32;
        self.config.lr * (1.0 - self.step as f32 / total).max(0.0)
    }
}

/// One AdamW update over every parameter that has a gradient.
///
/// Masked-out elements (and their moments) are left untouched bit for bit.
pub fn adamw_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut OptimizerState,
    mask: Option<&TrainMask>,
) -> Result<()> {
    for (name, grad) in grads {
        let param = params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
        if grad.len() != param.numel() {
            return Err(Error::Dimension(format!(
                "gradient for {name} has {} values, parameter has {}",
                grad.len(),
                param.numel()
            )));
        }
        if !state.first.contains_key(name) {
            return Err(Error::Contract(format!("optimizer state has no slot for {name}")));
        }
        if let Some(ParamMask::Elements(m)) = mask.and_then(|m| m.get(name)) {
            if m.len() != param.numel() {
                return Err(Error::Dimension(format!(
                    "mask for {name} has {} entries, parameter has {}",
                    m.len(),
                    param.numel()
                )));
            }
        }
    }

    let lr = state.current_lr();
    let c = &state.config;
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (name, grad) in grads {
        let pm = match mask {
            None => &ParamMask::All,
            Some(m) => m.get(name).unwrap_or(&ParamMask::Frozen),
        };
        if pm.is_frozen() {
            continue;
        }
        let param = params.get_mut(name).expect("checked above").data_mut();
        let m1 = state.first.get_mut(name).expect("checked above");
        let m2 = state.second.get_mut(name).expect("checked above");
        for i in 0..param.len() {
            if !pm.allows(i) {
                continue;
            }
            let g = grad[i];
            m1[i] = c.beta1 * m1[i] + (1.0 - c.beta1) * g;
            m2[i] = c.beta2 * m2[i] + (1.0 - c.beta2) * g * g;
            let update = (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + c.eps);
            param[i] -= lr * (update + c.weight_decay * param[i]);
        }
    }
    state.step += 1;
    Ok(())
}
