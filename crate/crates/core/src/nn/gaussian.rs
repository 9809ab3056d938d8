//! Gaussian policy head squashed into `(-h_max, h_max)` by a scaled tanh.
//!
//! With `u = mean + exp(log_std)·ε` and `a = h_max·tanh(u)`:
//!
//! ```text
//! log π(a) = -ε²/2 - log_std - ln(2π)/2 - ln h_max - ln(1 - tanh²u)
//! ```
//!
//! `ln(1 - tanh²u)` is evaluated as `2(ln 2 - u - softplus(-2u))`.

use std::f64::consts::{LN_2, PI};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPolicyOutput {
    pub mean: f64,
    /// Clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub log_std: f64,
    pub noise: f64,
    /// Pre-squash sample `u`.
    pub pre_tanh: f64,
    pub action: f64,
    pub log_density: f64,
}

/// Reparameterized derivatives of a sample with the noise held fixed. The
/// `log_std` derivatives are with respect to the clamped value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquashedGrads {
    pub dlogp_dmean: f64,
    pub dlogp_dlogstd: f64,
    pub da_dmean: f64,
    pub da_dlogstd: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn log1m_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

fn gaussian_log(noise: f64, log_std: f64) -> f64 {
    -0.5 * noise * noise - log_std - 0.5 * (2.0 * PI).ln()
}

pub fn sample_squashed_gaussian(mean: f64, log_std: f64, noise: f64, h_max: f64) -> GaussianPolicyOutput {
    let log_std = log_std.clamp(LOG_STD_MIN, LOG_STD_MAX);
    let u = mean + log_std.exp() * noise;
    let mut action = h_max * u.tanh();
    // keep |a| strictly inside the bound once tanh rounds to ±1
    let limit = h_max * (1.0 - f64::EPSILON);
    action = action.clamp(-limit, limit);
    let log_density = gaussian_log(noise, log_std) - h_max.ln() - log1m_tanh_sq(u);
    GaussianPolicyOutput {
        mean,
        log_std,
        noise,
        pre_tanh: u,
        action,
        log_density,
    }
}

pub fn squashed_gaussian_grads(out: &GaussianPolicyOutput, h_max: f64) -> SquashedGrads {
    let sigma = out.log_std.exp();
    let th = out.pre_tanh.tanh();
    let du_dlogstd = sigma * out.noise;
    // d/du [-ln(1 - tanh²u)] = 2 tanh u
    let dlogp_du = 2.0 * th;
    let da_du = h_max * (1.0 - th * th);
    SquashedGrads {
        dlogp_dmean: dlogp_du,
        dlogp_dlogstd: -1.0 + dlogp_du * du_dlogstd,
        da_dmean: da_du,
        da_dlogstd: da_du * du_dlogstd,
    }
}

/// Log-density of a given action under the squashed Gaussian.
pub fn squashed_log_density(mean: f64, log_std: f64, action: f64, h_max: f64) -> f64 {
    let log_std = log_std.clamp(LOG_STD_MIN, LOG_STD_MAX);
    let y = (action / h_max).clamp(-1.0 + 1e-15, 1.0 - 1e-15);
    let u = y.atanh();
    let noise = (u - mean) / log_std.exp();
    gaussian_log(noise, log_std) - h_max.ln() - ((1.0 - y) * (1.0 + y)).ln()
}
