//! Trace coefficients, soft TD errors and the general-retrace multi-step
//! target.
//!
//! For a segment starting at `(s_0, a_0)` the target is
//!
//! ```text
//! q_start + Σ_{j=0}^{J} (Π_{u=1}^{j} c_u) (γλ)^j δ_j,   J = min(n, len - 1)
//! ```
//!
//! with `δ_j = r_j + γ (Q(s_{j+1}, ã) - α log π(ã|s_{j+1})) - Q(s_j, a_j)`.
//! Powers of `γλ` count offsets from the segment start.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Retrace,
    #[serde(rename = "is")]
    ImportanceSampling,
    TreeBackup,
    PengQ,
    Uncorrected,
}

impl TraceKind {
    pub const ALL: [TraceKind; 5] = [
        TraceKind::Retrace,
        TraceKind::ImportanceSampling,
        TraceKind::TreeBackup,
        TraceKind::PengQ,
        TraceKind::Uncorrected,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TraceKind::Retrace => "retrace",
            TraceKind::ImportanceSampling => "is",
            TraceKind::TreeBackup => "tree_backup",
            TraceKind::PengQ => "peng_q",
            TraceKind::Uncorrected => "uncorrected",
        }
    }

    /// Display label used in result tables.
    pub fn label(&self) -> &'static str {
        match self {
            TraceKind::Retrace => "Retrace",
            TraceKind::ImportanceSampling => "IS",
            TraceKind::TreeBackup => "Tree Backup",
            TraceKind::PengQ => "Q(lambda)",
            TraceKind::Uncorrected => "Uncorrected TD(lambda)",
        }
    }

    /// Whether the kind keeps `c ∈ [0, π/μ]` for every admissible pair of
    /// probabilities.
    pub fn conservative_by_construction(&self) -> bool {
        matches!(
            self,
            TraceKind::Retrace | TraceKind::ImportanceSampling | TraceKind::TreeBackup
        )
    }

    pub fn parse(s: &str) -> Option<Self> {
        TraceKind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl std::fmt::Display for TraceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSpec {
    pub kind: TraceKind,
    pub lambda: f64,
    pub n: usize,
    pub gamma: f64,
    pub alpha_ent: f64,
}

impl Default for TraceSpec {
    fn default() -> Self {
        TraceSpec {
            kind: TraceKind::Retrace,
            lambda: 0.9,
            n: 5,
            gamma: 0.99,
            alpha_ent: 0.1,
        }
    }
}

impl TraceSpec {
    /// The single-step soft actor-critic baseline.
    pub fn single_step(gamma: f64, alpha_ent: f64) -> Self {
        TraceSpec {
            kind: TraceKind::Retrace,
            lambda: 0.0,
            n: 0,
            gamma,
            alpha_ent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("trace.lambda", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("trace.gamma", "must lie in [0, 1)"));
        }
        if !(self.alpha_ent >= 0.0 && self.alpha_ent.is_finite()) {
            return Err(Error::config("trace.alpha_ent", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Per-step trace coefficient from target and behavior densities.
pub fn trace_coefficient(kind: TraceKind, pi_density: f64, mu_density: f64, _lambda: f64) -> Result<f64> {
    if !(mu_density > 0.0) {
        return Err(Error::ZeroBehaviorDensity(mu_density));
    }
    Ok(match kind {
        TraceKind::Retrace => (pi_density / mu_density).min(1.0),
        TraceKind::ImportanceSampling => pi_density / mu_density,
        // continuous densities can exceed one
        TraceKind::TreeBackup => pi_density.min(1.0),
        TraceKind::PengQ | TraceKind::Uncorrected => 1.0,
    })
}

/// Same as [`trace_coefficient`] but from log-densities, forming the ratio
/// in log space so that tiny densities do not underflow.
pub fn trace_coefficient_from_logs(kind: TraceKind, log_pi: f64, log_mu: f64) -> f64 {
    match kind {
        TraceKind::Retrace => (log_pi - log_mu).min(0.0).exp(),
        TraceKind::ImportanceSampling => (log_pi - log_mu).exp(),
        TraceKind::TreeBackup => log_pi.min(0.0).exp(),
        TraceKind::PengQ | TraceKind::Uncorrected => 1.0,
    }
}

/// `λ π + (1 − λ) μ`.
pub fn mixed_target_density(lambda: f64, pi_density: f64, mu_density: f64) -> f64 {
    lambda * pi_density + (1.0 - lambda) * mu_density
}

/// Log-density used in the entropy term of the bootstrap. Peng's Q(λ) uses the
/// λ-mixture of target and behavior densities when the behavior density is
/// known; every other kind uses the target density.
pub fn bootstrap_log_density(spec: &TraceSpec, log_pi: f64, log_mu: Option<f64>) -> f64 {
    match (spec.kind, log_mu) {
        (TraceKind::PengQ, Some(log_mu)) => {
            // log(λ e^{lπ} + (1-λ) e^{lμ}) computed stably
            let (a, b) = (log_pi, log_mu);
            let m = a.max(b);
            (spec.lambda * (a - m).exp() + (1.0 - spec.lambda) * (b - m).exp()).ln() + m
        }
        _ => log_pi,
    }
}

/// `r + γ (q_next − α log π_next) − q_current`.
pub fn soft_td_error(r: f64, q_next: f64, log_pi_next: f64, q_current: f64, gamma: f64, alpha_ent: f64) -> f64 {
    r + gamma * (q_next - alpha_ent * log_pi_next) - q_current
}

/// Everything a segment contributes to its multi-step target.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentEval {
    pub target_log_densities: Vec<f64>,
    pub behavior_log_densities: Vec<f64>,
    pub td_errors: Vec<f64>,
    /// `coefficients[u]` multiplies offsets `j ≥ u`; entry 0 is unused.
    pub coefficients: Vec<f64>,
}

impl SegmentEval {
    pub fn new(kind: TraceKind, target_log_densities: Vec<f64>, behavior_log_densities: Vec<f64>, td_errors: Vec<f64>) -> Self {
        assert_eq!(target_log_densities.len(), td_errors.len());
        assert_eq!(behavior_log_densities.len(), td_errors.len());
        let coefficients = target_log_densities
            .iter()
            .zip(&behavior_log_densities)
            .map(|(&lp, &lm)| trace_coefficient_from_logs(kind, lp, lm))
            .collect();
        SegmentEval {
            target_log_densities,
            behavior_log_densities,
            td_errors,
            coefficients,
        }
    }

    pub fn len(&self) -> usize {
        self.td_errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.td_errors.is_empty()
    }
}

/// Multi-step target for the first state-action pair of a segment.
pub fn retrace_target(eval: &SegmentEval, q_start: f64, spec: &TraceSpec) -> f64 {
    if eval.is_empty() {
        return q_start;
    }
    let last = spec.n.min(eval.len() - 1);
    let decay = spec.gamma * spec.lambda;
    let mut weight = 1.0;
    let mut target = q_start;
    for j in 0..=last {
        if j > 0 {
            weight *= eval.coefficients[j] * decay;
            if weight == 0.0 {
                break;
            }
        }
        target += weight * eval.td_errors[j];
    }
    target
}

/// True iff the coefficient lies in `[0, π/μ]`.
pub fn is_conservative(kind: TraceKind, pi_density: f64, mu_density: f64, lambda: f64) -> Result<bool> {
    let c = trace_coefficient(kind, pi_density, mu_density, lambda)?;
    Ok(c >= 0.0 && c <= pi_density / mu_density)
}
