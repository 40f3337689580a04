//! Plain (graph-free) math used by the tape kernels, the metric suite,
//! and tests. All functions compute in f64.

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::{Scalar, Tensor};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax (max subtraction). Errors on non-finite or
/// empty input; outputs are non-negative and sum to 1.
pub fn softmax_vec(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::InvalidValue("softmax of empty vector".into()));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("softmax of non-finite input".into()));
    }
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Row-normalize `x` to zero mean and unit population variance, then apply
/// gain and bias.
pub fn layer_norm_vec(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::Shape(format!(
            "layer_norm lengths: x {}, gain {}, bias {}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Config("layer_norm eps must be positive".into()));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + eps).sqrt();
    Ok(x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| g * (v - mean) * rstd + b)
        .collect())
}

/// GELU with the tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

/// Binary cross-entropy on a logit, in the stable
/// `max(x,0) - x*y + ln(1 + exp(-|x|))` form.
pub fn bce_with_logit(logit: f64, label: u8) -> f64 {
    let y = label as f64;
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

/// Train/eval switch for stochastic layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) fn dropout_mask(n: usize, rate: f64, rng: &mut Rng) -> Vec<bool> {
    (0..n).map(|_| rng.unit_f64() >= rate).collect()
}

/// Inverted dropout: eval mode is the identity; train mode zeroes each
/// element with probability `rate` and scales survivors by 1/(1-rate).
pub fn dropout<E: Scalar>(x: &Tensor<E>, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Tensor<E>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} not in [0,1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep_inv = 1.0 / (1.0 - rate);
    let mask = dropout_mask(x.numel(), rate, rng);
    let data = x
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &keep)| {
            if keep {
                E::from_f64(v.to_f64() * keep_inv)
            } else {
                E::from_f64(0.0)
            }
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}
