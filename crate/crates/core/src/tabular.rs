//! Exact small-MDP machinery used to validate the retrace operator.
//!
//! Q-tables are flat `n_states × n_actions` vectors indexed `s * n_actions + a`.
//! The retrace iteration is evaluated in expectation over behavior
//! trajectories:
//!
//! ```text
//! Q_{k+1} = Q_k + Σ_{t=0}^{T-1} (γλ P_{cμ})^t δ_k,    δ_k = R + γ P_π Q_k − Q_k
//! (P_{cμ} v)(x, a) = Σ_y P(y|x,a) Σ_b μ(b|y) c(y,b) v(y,b)
//! ```
//!
//! Entropy terms are not part of this oracle.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::traces::{mixed_target_density, trace_coefficient, TraceKind, TraceSpec};

const ROW_TOL: f64 = 1e-12;
pub const DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `P(s'|s,a)` at `(s * n_actions + a) * n_states + s'`.
    pub transitions: Vec<f64>,
    /// `R(s,a)` at `s * n_actions + a`.
    pub rewards: Vec<f64>,
    pub gamma: f64,
}

impl TabularMdp {
    pub fn new(n_states: usize, n_actions: usize, transitions: Vec<f64>, rewards: Vec<f64>, gamma: f64) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidArgument("empty state or action space".into()));
        }
        if transitions.len() != n_states * n_actions * n_states || rewards.len() != n_states * n_actions {
            return Err(Error::InvalidArgument("transition or reward table has the wrong size".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1)")));
        }
        for row in transitions.chunks(n_states) {
            if row.iter().any(|&p| !(p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidArgument("transition row is not a distribution".into()));
            }
        }
        Ok(TabularMdp {
            n_states,
            n_actions,
            transitions,
            rewards,
            gamma,
        })
    }

    /// Dense random MDP with rewards in `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> Result<Self> {
        let mut transitions = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            transitions.extend(random_simplex(n_states, 0.0, rng));
        }
        let rewards = (0..n_states * n_actions).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        Self::new(n_states, n_actions, transitions, rewards, gamma)
    }

    fn p(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transitions[base..base + self.n_states]
    }
}

fn random_simplex<R: Rng + ?Sized>(n: usize, floor: f64, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| floor + rng.gen_range(0.0..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|x| x / total).collect();
    // put the rounding residue on the largest entry so rows sum to 1
    let residue = 1.0 - p.iter().sum::<f64>();
    let imax = (0..n).max_by(|&i, &j| p[i].total_cmp(&p[j])).unwrap();
    p[imax] += residue;
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    pub n_states: usize,
    pub n_actions: usize,
    /// `π(a|s)` at `s * n_actions + a`.
    pub probs: Vec<f64>,
}

impl PolicyTable {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::InvalidArgument("policy table has the wrong size".into()));
        }
        for row in probs.chunks(n_actions) {
            if row.iter().any(|&p| !(p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidArgument("policy row is not a distribution".into()));
            }
        }
        Ok(PolicyTable {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        PolicyTable {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Random policy whose probabilities are bounded away from zero.
    pub fn random_full_support<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        let probs = (0..n_states).flat_map(|_| random_simplex(n_actions, 0.1, rng)).collect();
        PolicyTable {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    /// `λ π + (1 − λ) μ`, row by row.
    pub fn mixture(lambda: f64, target: &PolicyTable, behavior: &PolicyTable) -> PolicyTable {
        PolicyTable {
            n_states: target.n_states,
            n_actions: target.n_actions,
            probs: target
                .probs
                .iter()
                .zip(&behavior.probs)
                .map(|(&p, &m)| mixed_target_density(lambda, p, m))
                .collect(),
        }
    }
}

fn check_shapes(mdp: &TabularMdp, policy: &PolicyTable) -> Result<()> {
    if policy.n_states != mdp.n_states || policy.n_actions != mdp.n_actions {
        return Err(Error::InvalidArgument("policy does not match MDP shape".into()));
    }
    Ok(())
}

/// `R + γ P_π Q`.
pub fn evaluation_backup(mdp: &TabularMdp, policy: &PolicyTable, q: &[f64]) -> Vec<f64> {
    let na = mdp.n_actions;
    let v: Vec<f64> = (0..mdp.n_states)
        .map(|y| (0..na).map(|b| policy.prob(y, b) * q[y * na + b]).sum())
        .collect();
    (0..mdp.n_states * na)
        .map(|sa| {
            let (s, a) = (sa / na, sa % na);
            mdp.rewards[sa] + mdp.gamma * mdp.p(s, a).iter().zip(&v).map(|(p, v)| p * v).sum::<f64>()
        })
        .collect()
}

/// Max-norm of `R + γ P_π Q − Q`.
pub fn bellman_residual(mdp: &TabularMdp, policy: &PolicyTable, q: &[f64]) -> f64 {
    max_abs_diff(&evaluation_backup(mdp, policy, q), q)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Solves `(I − γ P_π) Q = R` directly.
pub fn exact_q(mdp: &TabularMdp, policy: &PolicyTable) -> Result<Vec<f64>> {
    check_shapes(mdp, policy)?;
    if !(mdp.gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("gamma {} must be below 1", mdp.gamma)));
    }
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let n = ns * na;
    let mut a = DMatrix::<f64>::identity(n, n);
    for sa in 0..n {
        let (s, act) = (sa / na, sa % na);
        for (y, &p) in mdp.p(s, act).iter().enumerate() {
            for b in 0..na {
                a[(sa, y * na + b)] -= mdp.gamma * p * policy.prob(y, b);
            }
        }
    }
    let rhs = DVector::from_column_slice(&mdp.rewards);
    let sol = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidArgument("policy evaluation system is singular".into()))?;
    Ok(sol.iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetraceRun {
    /// `Q_0, Q_1, …`; stops early on divergence.
    pub iterates: Vec<Vec<f64>>,
    /// Iteration at which the max-norm first exceeded [`DIVERGENCE_BOUND`].
    pub diverged_at: Option<usize>,
}

impl RetraceRun {
    pub fn last(&self) -> &[f64] {
        self.iterates.last().expect("at least the initial iterate")
    }

    /// First iteration whose max-norm distance to `reference` is within `tol`.
    pub fn first_within(&self, reference: &[f64], tol: f64) -> Option<usize> {
        self.iterates.iter().position(|q| max_abs_diff(q, reference) <= tol)
    }
}

/// Per-(state, action) weight `μ(b|y) c(y,b)` of the trace operator.
fn trace_weights(behavior: &PolicyTable, target: &PolicyTable, spec: &TraceSpec) -> Result<Vec<f64>> {
    behavior
        .probs
        .iter()
        .zip(&target.probs)
        .map(|(&mu, &pi)| Ok(mu * trace_coefficient(spec.kind, pi, mu, spec.lambda)?))
        .collect()
}

/// Iterates the retrace operator from `Q_0 = 0`, summing `truncation_t`
/// trace steps per application.
pub fn tabular_retrace_iterate(
    mdp: &TabularMdp,
    behavior: &PolicyTable,
    target: &PolicyTable,
    spec: &TraceSpec,
    truncation_t: usize,
    iterations: usize,
) -> Result<RetraceRun> {
    check_shapes(mdp, behavior)?;
    check_shapes(mdp, target)?;
    if truncation_t == 0 {
        return Err(Error::InvalidArgument("truncation_T must be at least 1".into()));
    }
    // Peng's Q(λ) evaluates the λ-mixture of target and behavior
    let evaluated = match spec.kind {
        TraceKind::PengQ => PolicyTable::mixture(spec.lambda, target, behavior),
        _ => target.clone(),
    };
    let weights = trace_weights(behavior, target, spec)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let decay = mdp.gamma * spec.lambda;

    let apply_trace = |v: &[f64]| -> Vec<f64> {
        let w: Vec<f64> = (0..ns)
            .map(|y| (0..na).map(|b| weights[y * na + b] * v[y * na + b]).sum())
            .collect();
        (0..ns * na)
            .map(|sa| {
                let (s, a) = (sa / na, sa % na);
                decay * mdp.p(s, a).iter().zip(&w).map(|(p, w)| p * w).sum::<f64>()
            })
            .collect()
    };

    let mut q = vec![0.0; ns * na];
    let mut run = RetraceRun {
        iterates: vec![q.clone()],
        diverged_at: None,
    };
    for k in 1..=iterations {
        let backup = evaluation_backup(mdp, &evaluated, &q);
        let delta: Vec<f64> = backup.iter().zip(&q).map(|(b, q)| b - q).collect();
        let mut correction = delta.clone();
        let mut term = delta;
        for _ in 1..truncation_t {
            if decay == 0.0 {
                break;
            }
            term = apply_trace(&term);
            correction.iter_mut().zip(&term).for_each(|(c, t)| *c += t);
        }
        q.iter_mut().zip(&correction).for_each(|(q, c)| *q += c);
        run.iterates.push(q.clone());
        if q.iter().any(|x| !(x.abs() <= DIVERGENCE_BOUND)) {
            run.diverged_at = Some(k);
            break;
        }
    }
    Ok(run)
}
