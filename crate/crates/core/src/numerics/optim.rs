use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::params::ParamSet;
use crate::numerics::tensor::{Scalar, Tensor};

/// Update rule: plain gradient descent or adaptive moments with decoupled
/// weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    AdamW,
}

/// Optimizer hyperparameters plus per-parameter moment buffers.
///
/// Moment buffers are created lazily and only ever for trainable
/// parameters. Buffers accumulate in f64 regardless of the storage type.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    /// AdamW with the toolkit's fine-tuning defaults.
    pub fn adamw(learning_rate: f64) -> Self {
        OptimizerState {
            kind: OptimKind::AdamW,
            learning_rate,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerState {
            kind: OptimKind::Sgd,
            learning_rate,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update to every trainable parameter across the given sets,
    /// consuming their grad buffers. A trainable parameter without a
    /// gradient is a contract violation. Frozen parameters are untouched.
    pub fn step<E: Scalar>(&mut self, sets: &mut [&mut ParamSet<E>]) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        for set in sets.iter_mut() {
            let names: Vec<String> = set.trainable_names();
            for name in names {
                let param = set.get_mut(&name)?;
                let grad: Vec<f64> = match param.grad() {
                    Some(g) => g.iter().map(|v| v.to_f64()).collect(),
                    None => {
                        return Err(Error::Contract(format!(
                            "trainable parameter `{name}` has no gradient"
                        )))
                    }
                };
                self.update_param(&name, param, &grad, t);
                param.clear_grad();
            }
        }
        Ok(())
    }

    fn update_param<E: Scalar>(&mut self, name: &str, param: &mut Tensor<E>, grad: &[f64], t: u64) {
        let lr = self.learning_rate;
        let wd = self.weight_decay;
        match self.kind {
            OptimKind::Sgd => {
                for (p, &g) in param.data_mut().iter_mut().zip(grad) {
                    let v = p.to_f64();
                    *p = E::from_f64(v - lr * (g + wd * v));
                }
            }
            OptimKind::AdamW => {
                let n = grad.len();
                let m = self
                    .first_moment
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; n]);
                let v = self
                    .second_moment
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; n]);
                let bc1 = 1.0 - self.beta1.powi(t as i32);
                let bc2 = 1.0 - self.beta2.powi(t as i32);
                for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad).enumerate() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    let x = p.to_f64();
                    *p = E::from_f64(x - lr * (mhat / (vhat.sqrt() + self.eps) + wd * x));
                }
            }
        }
    }
}
