//! Soft actor-critic trained on general-retrace multi-step targets.
//!
//! Twin critics regress onto targets built from the target critics and the
//! current actor; the actor minimizes `α log π − min(Q1, Q2)` under the
//! reparameterized sample. Actor and target-network updates run once every
//! `policy_delay` critic updates. The single-step baseline is the same agent
//! with `lambda = 0, n = 0`.

use std::fs::File;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EnvironmentSplit};
use crate::env::{run_episode, EnvConfig, EpisodeOutcome, Observation, TradingEnv};
use crate::error::{Error, Result};
use crate::nn::{
    sample_squashed_gaussian, soft_update, squashed_gaussian_grads, squashed_log_density, Activation, AdamConfig,
    Dense, DenseCache, Lstm, LstmCache, ParamBlock, Parameterized, LOG_STD_MAX, LOG_STD_MIN,
};
use crate::replay::{ReplayBuffer, Segment, Transition, DEFAULT_CAPACITY, DEFAULT_WARMUP};
use crate::traces::{bootstrap_log_density, retrace_target, soft_td_error, SegmentEval, TraceKind, TraceSpec};

/// Scale applied to bid/ask rows after dividing by the newest mid-price.
const PRICE_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub lstm_hidden: usize,
    pub head_hidden: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            lstm_hidden: 64,
            head_hidden: vec![64, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub trace: TraceSpec,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub tau: f64,
    pub batch: usize,
    pub grad_steps_per_env_step: usize,
    pub policy_delay: usize,
    pub episodes: usize,
    pub validate_every: usize,
    pub seed: u64,
    pub network: NetworkConfig,
    pub replay_capacity: usize,
    pub warmup: usize,
    /// Multiplies rewards inside critic targets only.
    pub reward_scale: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            trace: TraceSpec::default(),
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            tau: 0.005,
            batch: 64,
            grad_steps_per_env_step: 2,
            policy_delay: 2,
            episodes: 10,
            validate_every: 5,
            seed: 0,
            network: NetworkConfig::default(),
            replay_capacity: DEFAULT_CAPACITY,
            warmup: DEFAULT_WARMUP,
            reward_scale: 1.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        self.trace.validate()?;
        let positive = [
            ("agent.lr_actor", self.lr_actor),
            ("agent.lr_critic", self.lr_critic),
            ("agent.reward_scale", self.reward_scale),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive and finite"));
            }
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config("agent.tau", "must lie in (0, 1]"));
        }
        let counts = [
            ("agent.batch", self.batch),
            ("agent.grad_steps_per_env_step", self.grad_steps_per_env_step),
            ("agent.policy_delay", self.policy_delay),
            ("agent.episodes", self.episodes),
            ("agent.validate_every", self.validate_every),
            ("agent.replay_capacity", self.replay_capacity),
            ("agent.network.lstm_hidden", self.network.lstm_hidden),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.network.head_hidden.iter().any(|&w| w == 0) {
            return Err(Error::config("agent.network.head_hidden", "widths must be at least 1"));
        }
        Ok(())
    }
}

/// Network-ready view of an observation: the look-back rows with prices
/// expressed relative to the newest mid, and `[balance, exposure]` scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInput {
    pub seq: Vec<f64>,
    pub extras: [f64; 2],
}

pub fn prepare_input(obs: &Observation, initial_balance: f64) -> PreparedInput {
    let cols = obs.cols;
    let last = obs.row(obs.rows - 1);
    let reference = 0.5 * (last[cols - 2] + last[cols - 1]);
    let mut seq = obs.window.clone();
    for row in seq.chunks_mut(cols) {
        row[cols - 2] = PRICE_SCALE * (row[cols - 2] / reference - 1.0);
        row[cols - 1] = PRICE_SCALE * (row[cols - 1] / reference - 1.0);
    }
    PreparedInput {
        seq,
        extras: [
            obs.balance / initial_balance - 1.0,
            obs.holdings * reference / initial_balance,
        ],
    }
}

fn build_head<R: Rng + ?Sized>(name: &str, inputs: usize, hidden: &[usize], outputs: usize, rng: &mut R) -> Vec<Dense> {
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut width = inputs;
    for (i, &h) in hidden.iter().enumerate() {
        layers.push(Dense::new(&format!("{name}.fc{i}"), width, h, Activation::Tanh, rng));
        width = h;
    }
    layers.push(Dense::new(&format!("{name}.out"), width, outputs, Activation::Identity, rng));
    layers
}

fn head_forward(layers: &[Dense], input: Vec<f64>) -> Result<Vec<DenseCache>> {
    let mut caches: Vec<DenseCache> = Vec::with_capacity(layers.len());
    for layer in layers {
        let x = caches.last().map(|c| c.output.as_slice()).unwrap_or(&input);
        let c = layer.forward(x)?;
        caches.push(c);
    }
    Ok(caches)
}

fn head_backward(layers: &mut [Dense], caches: &[DenseCache], upstream: &[f64]) -> Result<Vec<f64>> {
    let mut grad = upstream.to_vec();
    for (layer, cache) in layers.iter_mut().zip(caches).rev() {
        grad = layer.backward(cache, &grad)?;
    }
    Ok(grad)
}

fn lstm_last_grad(cache_steps: usize, hidden: usize, d_last: &[f64]) -> Vec<f64> {
    let mut d = vec![0.0; cache_steps * hidden];
    d[(cache_steps - 1) * hidden..].copy_from_slice(d_last);
    d
}

fn rename_blocks<M: Parameterized>(model: &mut M, from: &str, to: &str) {
    for b in model.blocks_mut() {
        if let Some(rest) = b.name.strip_prefix(from) {
            b.name = format!("{to}{rest}");
        }
    }
}

/// Soft Q-network: LSTM encoder, then dense layers over
/// `[encoding, balance, exposure, action / h_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub lstm: Lstm,
    pub head: Vec<Dense>,
}

/// Forward activations needed to backpropagate one critic evaluation.
#[derive(Debug, Clone)]
pub struct CriticTape {
    lstm: LstmCache,
    head: Vec<DenseCache>,
    pub q: f64,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(name: &str, input_size: usize, net: &NetworkConfig, rng: &mut R) -> Self {
        let h = net.lstm_hidden;
        Critic {
            lstm: Lstm::new(&format!("{name}.lstm"), input_size, h, rng),
            head: build_head(name, h + 3, &net.head_hidden, 1, rng),
        }
    }

    pub fn encode(&self, seq: &[f64]) -> Result<LstmCache> {
        self.lstm.forward(seq, None)
    }

    pub fn q_from_encoding(&self, encoding: &[f64], extras: &[f64; 2], action_norm: f64) -> Result<f64> {
        let mut input = encoding.to_vec();
        input.extend_from_slice(extras);
        input.push(action_norm);
        Ok(head_forward(&self.head, input)?.last().unwrap().output[0])
    }

    pub fn forward(&self, input: &PreparedInput, action_norm: f64) -> Result<CriticTape> {
        let lstm = self.encode(&input.seq)?;
        let mut x = lstm.last_hidden().to_vec();
        x.extend_from_slice(&input.extras);
        x.push(action_norm);
        let head = head_forward(&self.head, x)?;
        let q = head.last().unwrap().output[0];
        Ok(CriticTape { lstm, head, q })
    }

    /// Accumulates parameter gradients of `dq · Q` and returns `dQ/d(action_norm) · dq`.
    pub fn backward(&mut self, tape: &CriticTape, dq: f64) -> Result<f64> {
        let dx = head_backward(&mut self.head, &tape.head, &[dq])?;
        let h = self.lstm.hidden_size();
        let steps = tape.lstm.hidden.len();
        self.lstm.backward(&tape.lstm, &lstm_last_grad(steps, h, &dx[..h]))?;
        Ok(dx[h + 2])
    }
}

impl Parameterized for Critic {
    fn blocks(&self) -> Vec<&ParamBlock> {
        let mut v = self.lstm.blocks();
        v.extend(self.head.iter().flat_map(|l| l.blocks()));
        v
    }

    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        let mut v = self.lstm.blocks_mut();
        v.extend(self.head.iter_mut().flat_map(|l| l.blocks_mut()));
        v
    }
}

/// Gaussian policy network producing `(mean, raw log_std)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub lstm: Lstm,
    pub head: Vec<Dense>,
}

#[derive(Debug, Clone)]
pub struct ActorTape {
    lstm: LstmCache,
    head: Vec<DenseCache>,
    pub mean: f64,
    pub raw_log_std: f64,
}

impl Actor {
    pub fn new<R: Rng + ?Sized>(name: &str, input_size: usize, net: &NetworkConfig, rng: &mut R) -> Self {
        let h = net.lstm_hidden;
        Actor {
            lstm: Lstm::new(&format!("{name}.lstm"), input_size, h, rng),
            head: build_head(name, h + 2, &net.head_hidden, 2, rng),
        }
    }

    pub fn forward(&self, input: &PreparedInput) -> Result<ActorTape> {
        let lstm = self.lstm.forward(&input.seq, None)?;
        let mut x = lstm.last_hidden().to_vec();
        x.extend_from_slice(&input.extras);
        let head = head_forward(&self.head, x)?;
        let out = &head.last().unwrap().output;
        let (mean, raw_log_std) = (out[0], out[1]);
        Ok(ActorTape {
            lstm,
            head,
            mean,
            raw_log_std,
        })
    }

    pub fn backward(&mut self, tape: &ActorTape, d_mean: f64, d_raw_log_std: f64) -> Result<()> {
        let dx = head_backward(&mut self.head, &tape.head, &[d_mean, d_raw_log_std])?;
        let h = self.lstm.hidden_size();
        let steps = tape.lstm.hidden.len();
        self.lstm.backward(&tape.lstm, &lstm_last_grad(steps, h, &dx[..h]))?;
        Ok(())
    }
}

impl Parameterized for Actor {
    fn blocks(&self) -> Vec<&ParamBlock> {
        let mut v = self.lstm.blocks();
        v.extend(self.head.iter().flat_map(|l| l.blocks()));
        v
    }

    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        let mut v = self.lstm.blocks_mut();
        v.extend(self.head.iter_mut().flat_map(|l| l.blocks_mut()));
        v
    }
}

fn clamp_mask(raw_log_std: f64) -> f64 {
    if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw_log_std) {
        1.0
    } else {
        0.0
    }
}

/// Mean over `inputs` of `½ (Q(s, a) − y)²`, divided by `denom / len`, with
/// gradients accumulated into `critic`. Targets are constants.
pub fn critic_objective(critic: &mut Critic, inputs: &[(PreparedInput, f64)], targets: &[f64], denom: f64) -> Result<f64> {
    let mut loss = 0.0;
    for ((input, action_norm), &y) in inputs.iter().zip(targets) {
        let tape = critic.forward(input, *action_norm)?;
        let diff = tape.q - y;
        loss += 0.5 * diff * diff / denom;
        critic.backward(&tape, diff / denom)?;
    }
    Ok(loss)
}

/// Mean over `inputs` of `α log π(f(s;ε)|s) − min(Q1, Q2)(s, f(s;ε))` with
/// the given noises. Accumulates actor gradients only; critic gradients are
/// cleared before returning.
pub fn actor_objective(
    actor: &mut Actor,
    critics: [&mut Critic; 2],
    inputs: &[PreparedInput],
    noises: &[f64],
    alpha: f64,
    h_max: f64,
) -> Result<f64> {
    let [c1, c2] = critics;
    let denom = inputs.len() as f64;
    let mut loss = 0.0;
    for (input, &noise) in inputs.iter().zip(noises) {
        let tape = actor.forward(input)?;
        let out = sample_squashed_gaussian(tape.mean, tape.raw_log_std, noise, h_max);
        let action_norm = out.action / h_max;
        let t1 = c1.forward(input, action_norm)?;
        let t2 = c2.forward(input, action_norm)?;
        let d_action_norm = if t1.q <= t2.q {
            loss += (alpha * out.log_density - t1.q) / denom;
            c1.backward(&t1, 1.0)?
        } else {
            loss += (alpha * out.log_density - t2.q) / denom;
            c2.backward(&t2, 1.0)?
        };
        let dq_da = d_action_norm / h_max;
        let g = squashed_gaussian_grads(&out, h_max);
        let d_mean = (alpha * g.dlogp_dmean - dq_da * g.da_dmean) / denom;
        let d_log_std = (alpha * g.dlogp_dlogstd - dq_da * g.da_dlogstd) / denom * clamp_mask(tape.raw_log_std);
        actor.backward(&tape, d_mean, d_log_std)?;
    }
    c1.zero_grad();
    c2.zero_grad();
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActOutput {
    pub action: f64,
    pub log_density: f64,
    pub mean: f64,
    pub log_std: f64,
}

#[derive(Debug, Clone)]
pub struct Agent {
    config: AgentConfig,
    env: EnvConfig,
    input_size: usize,
    pub actor: Actor,
    pub critic1: Critic,
    pub critic2: Critic,
    pub target1: Critic,
    pub target2: Critic,
    update_count: u64,
    update_rng: ChaCha8Rng,
}

impl Agent {
    /// Builds an agent for observations with `n_features` feature columns.
    pub fn new(config: AgentConfig, env: EnvConfig, n_features: usize) -> Result<Self> {
        config.validate()?;
        env.validate()?;
        let input_size = n_features + 2;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let actor = Actor::new("actor", input_size, &config.network, &mut rng);
        let critic1 = Critic::new("critic1", input_size, &config.network, &mut rng);
        let critic2 = Critic::new("critic2", input_size, &config.network, &mut rng);
        let mut target1 = critic1.clone();
        let mut target2 = critic2.clone();
        rename_blocks(&mut target1, "critic1", "target1");
        rename_blocks(&mut target2, "critic2", "target2");
        let update_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        Ok(Agent {
            config,
            env,
            input_size,
            actor,
            critic1,
            critic2,
            target1,
            target2,
            update_count: 0,
            update_rng,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn env_config(&self) -> &EnvConfig {
        &self.env
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub fn prepare(&self, obs: &Observation) -> PreparedInput {
        prepare_input(obs, self.env.initial_balance)
    }

    fn h_max(&self) -> f64 {
        self.env.h_max
    }

    /// Samples (or, when `stochastic` is false, takes the noise-free path of)
    /// the squashed Gaussian policy.
    pub fn act<R: Rng + ?Sized>(&self, obs: &Observation, stochastic: bool, rng: &mut R) -> Result<ActOutput> {
        let tape = self.actor.forward(&self.prepare(obs))?;
        let noise = if stochastic { rng.sample(StandardNormal) } else { 0.0 };
        let out = sample_squashed_gaussian(tape.mean, tape.raw_log_std, noise, self.h_max());
        Ok(ActOutput {
            action: out.action,
            log_density: out.log_density,
            mean: out.mean,
            log_std: out.log_std,
        })
    }

    /// Multi-step soft targets for the first state-action pair of every
    /// segment. Only target critics and the current actor are consulted.
    pub fn compute_targets<R: Rng + ?Sized>(&self, segments: &[Segment], rng: &mut R) -> Result<Vec<f64>> {
        segments
            .iter()
            .enumerate()
            .map(|(b, seg)| {
                let y = self.segment_target(seg, rng)?;
                if y.is_finite() {
                    Ok(y)
                } else {
                    Err(Error::NonFiniteTarget(b))
                }
            })
            .collect()
    }

    fn segment_target<R: Rng + ?Sized>(&self, seg: &Segment, rng: &mut R) -> Result<f64> {
        let spec = &self.config.trace;
        let h_max = self.h_max();
        let tr = &seg.transitions;
        if tr.is_empty() {
            return Err(Error::InvalidArgument("empty segment".into()));
        }
        let last = spec.n.min(tr.len() - 1);

        // states s_0 ..= s_{last+1}
        let mut states = Vec::with_capacity(last + 2);
        states.push(self.prepare(&tr[0].obs));
        for t in &tr[..=last] {
            states.push(self.prepare(&t.next_obs));
        }
        let needs_next = !tr[last].done;
        let n_states = if needs_next { last + 2 } else { last + 1 };

        struct Encoded {
            t1: Vec<f64>,
            t2: Vec<f64>,
            mean: f64,
            log_std: f64,
        }
        let encoded = states[..n_states]
            .iter()
            .map(|s| {
                let actor = self.actor.forward(s)?;
                Ok(Encoded {
                    t1: self.target1.encode(&s.seq)?.last_hidden().to_vec(),
                    t2: self.target2.encode(&s.seq)?.last_hidden().to_vec(),
                    mean: actor.mean,
                    log_std: actor.raw_log_std,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let min_q = |k: usize, action: f64| -> Result<f64> {
            let e = &encoded[k];
            let a = action / h_max;
            Ok(self
                .target1
                .q_from_encoding(&e.t1, &states[k].extras, a)?
                .min(self.target2.q_from_encoding(&e.t2, &states[k].extras, a)?))
        };

        let mut target_logs = Vec::with_capacity(last + 1);
        let mut behavior_logs = Vec::with_capacity(last + 1);
        let mut deltas = Vec::with_capacity(last + 1);
        let mut q_start = 0.0;
        for u in 0..=last {
            let t = &tr[u];
            let q_here = min_q(u, t.action)?;
            if u == 0 {
                q_start = q_here;
            }
            target_logs.push(squashed_log_density(encoded[u].mean, encoded[u].log_std, t.action, h_max));
            behavior_logs.push(t.behavior_log_density);
            let reward = t.reward * self.config.reward_scale;
            let delta = if t.done {
                reward - q_here
            } else {
                let e = &encoded[u + 1];
                let noise: f64 = rng.sample(StandardNormal);
                let out = sample_squashed_gaussian(e.mean, e.log_std, noise, h_max);
                let q_next = min_q(u + 1, out.action)?;
                let log_mu = match (spec.kind, tr.get(u + 1)) {
                    (TraceKind::PengQ, Some(next)) => Some(squashed_log_density(
                        next.behavior_mean,
                        next.behavior_log_std,
                        out.action,
                        h_max,
                    )),
                    _ => None,
                };
                let log_pi = bootstrap_log_density(spec, out.log_density, log_mu);
                soft_td_error(reward, q_next, log_pi, q_here, spec.gamma, spec.alpha_ent)
            };
            deltas.push(delta);
        }
        let eval = SegmentEval::new(spec.kind, target_logs, behavior_logs, deltas);
        Ok(retrace_target(&eval, q_start, spec))
    }

    fn critic_batch(&self, segments: &[Segment]) -> Vec<(PreparedInput, f64)> {
        segments
            .iter()
            .map(|s| {
                let t = &s.transitions[0];
                (self.prepare(&t.obs), t.action / self.h_max())
            })
            .collect()
    }

    /// Critic loss on fixed targets, accumulating gradients into both critics.
    pub fn critic_loss_and_grad(&mut self, segments: &[Segment], targets: &[f64]) -> Result<f64> {
        let batch = self.critic_batch(segments);
        let denom = 2.0 * batch.len() as f64;
        Ok(critic_objective(&mut self.critic1, &batch, targets, denom)?
            + critic_objective(&mut self.critic2, &batch, targets, denom)?)
    }

    /// One least-squares step of both critics toward the multi-step targets.
    pub fn critic_update(&mut self, segments: &[Segment]) -> Result<f64> {
        let mut rng = self.update_rng.clone();
        let targets = self.compute_targets(segments, &mut rng)?;
        self.update_rng = rng;
        self.critic1.zero_grad();
        self.critic2.zero_grad();
        let loss = self.critic_loss_and_grad(segments, &targets)?;
        let adam = AdamConfig {
            lr: self.config.lr_critic,
            ..AdamConfig::default()
        };
        self.critic1.adam_step(&adam)?;
        self.critic2.adam_step(&adam)?;
        self.update_count += 1;
        Ok(loss)
    }

    /// Actor loss with explicit noises, accumulating actor gradients.
    pub fn actor_loss_and_grad(&mut self, segments: &[Segment], noises: &[f64]) -> Result<f64> {
        let inputs: Vec<PreparedInput> = segments.iter().map(|s| self.prepare(&s.transitions[0].obs)).collect();
        let (alpha, h_max) = (self.config.trace.alpha_ent, self.h_max());
        actor_objective(
            &mut self.actor,
            [&mut self.critic1, &mut self.critic2],
            &inputs,
            noises,
            alpha,
            h_max,
        )
    }

    pub fn actor_update(&mut self, segments: &[Segment]) -> Result<f64> {
        let noises: Vec<f64> = (0..segments.len())
            .map(|_| self.update_rng.sample(StandardNormal))
            .collect();
        self.actor.zero_grad();
        let loss = self.actor_loss_and_grad(segments, &noises)?;
        let adam = AdamConfig {
            lr: self.config.lr_actor,
            ..AdamConfig::default()
        };
        self.actor.adam_step(&adam)?;
        Ok(loss)
    }

    pub fn target_update(&mut self, tau: f64) {
        soft_update(&mut self.target1, &self.critic1, tau);
        soft_update(&mut self.target2, &self.critic2, tau);
    }

    /// Deterministic episode over `range`.
    pub fn evaluate(&self, data: &Dataset, range: Range<usize>) -> Result<EpisodeOutcome> {
        let mut err = None;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let outcome = run_episode(data, range, self.env, |obs| match self.act(obs, false, &mut unused) {
            Ok(a) => a.action,
            Err(e) => {
                err.get_or_insert(e);
                0.0
            }
        })?;
        match err {
            Some(e) => Err(e),
            None => Ok(outcome),
        }
    }
}

impl Parameterized for Agent {
    fn blocks(&self) -> Vec<&ParamBlock> {
        let mut v = self.actor.blocks();
        v.extend(self.critic1.blocks());
        v.extend(self.critic2.blocks());
        v.extend(self.target1.blocks());
        v.extend(self.target2.blocks());
        v
    }

    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        let mut v = self.actor.blocks_mut();
        v.extend(self.critic1.blocks_mut());
        v.extend(self.critic2.blocks_mut());
        v.extend(self.target1.blocks_mut());
        v.extend(self.target2.blocks_mut());
        v
    }
}

/// One row of the training metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub steps: usize,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub train_return_pct: f64,
    pub val_return_pct: Option<f64>,
    pub seed: u64,
    pub env_id: usize,
    pub trace_kind: TraceKind,
}

pub const METRICS_HEADER: &str =
    "episode,steps,critic_loss,actor_loss,train_return_pct,val_return_pct,seed,env_id,trace_kind";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingMetrics {
    pub rows: Vec<EpisodeMetrics>,
}

impl TrainingMetrics {
    pub fn validation_returns(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.val_return_pct).collect()
    }

    pub fn final_validation_return(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.val_return_pct)
    }

    pub fn to_csv_string(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.episode,
                r.steps,
                opt(r.critic_loss),
                opt(r.actor_loss),
                r.train_return_pct,
                opt(r.val_return_pct),
                r.seed,
                r.env_id,
                r.trace_kind
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv_string().as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Parses a metrics file written by [`TrainingMetrics::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        if rdr.headers()?.iter().collect::<Vec<_>>().join(",") != METRICS_HEADER {
            return Err(Error::Parse {
                line: 1,
                msg: format!("{} does not have the metrics header", path.display()),
            });
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let bad = |what: &str| Error::Parse {
                line,
                msg: format!("bad {what} in {}", path.display()),
            };
            let num = |idx: usize, what: &str| rec[idx].parse::<f64>().map_err(|_| bad(what));
            let opt = |idx: usize, what: &str| {
                if rec[idx].is_empty() {
                    Ok(None)
                } else {
                    num(idx, what).map(Some)
                }
            };
            rows.push(EpisodeMetrics {
                episode: rec[0].parse().map_err(|_| bad("episode"))?,
                steps: rec[1].parse().map_err(|_| bad("steps"))?,
                critic_loss: opt(2, "critic_loss")?,
                actor_loss: opt(3, "actor_loss")?,
                train_return_pct: num(4, "train_return_pct")?,
                val_return_pct: opt(5, "val_return_pct")?,
                seed: rec[6].parse().map_err(|_| bad("seed"))?,
                env_id: rec[7].parse().map_err(|_| bad("env_id"))?,
                trace_kind: TraceKind::parse(&rec[8]).ok_or_else(|| bad("trace_kind"))?,
            });
        }
        Ok(TrainingMetrics { rows })
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Collect-and-train loop on the split's training range, validating
/// deterministically every `validate_every` episodes.
pub fn train(data: &Dataset, split: &EnvironmentSplit, env: EnvConfig, config: &AgentConfig) -> Result<(Agent, TrainingMetrics)> {
    let mut agent = Agent::new(config.clone(), env, data.n_features())?;
    let mut seeder = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ac71_0000_0001);
    let mut act_rng = ChaCha8Rng::seed_from_u64(seeder.gen());
    let mut sample_rng = ChaCha8Rng::seed_from_u64(seeder.gen());
    let mut buffer = ReplayBuffer::new(config.replay_capacity, config.warmup);
    let mut metrics = TrainingMetrics::default();

    for episode in 1..=config.episodes {
        let (mut env_inst, mut obs) = TradingEnv::new(data, split.train.clone(), env)?;
        let mut rewards = Vec::with_capacity(env_inst.episode_len());
        let mut critic_losses = Vec::new();
        let mut actor_losses = Vec::new();
        loop {
            let act = agent.act(&obs, true, &mut act_rng)?;
            let step = env_inst.step(act.action)?;
            rewards.push(step.reward);
            let next_obs = step.observation;
            buffer.push(Transition {
                obs,
                action: act.action,
                reward: step.reward,
                next_obs: next_obs.clone(),
                behavior_log_density: act.log_density,
                behavior_mean: act.mean,
                behavior_log_std: act.log_std,
                done: step.done,
            });
            obs = next_obs;
            if buffer.is_ready() {
                for _ in 0..config.grad_steps_per_env_step {
                    let segments = buffer.sample_segments(config.batch, config.trace.n, &mut sample_rng)?;
                    critic_losses.push(agent.critic_update(&segments)?);
                    if agent.update_count() % config.policy_delay as u64 == 0 {
                        actor_losses.push(agent.actor_update(&segments)?);
                        agent.target_update(config.tau);
                    }
                }
            }
            if step.done {
                break;
            }
        }
        let val_return_pct = if episode % config.validate_every == 0 {
            Some(agent.evaluate(data, split.validation.clone())?.return_pct()?)
        } else {
            None
        };
        metrics.rows.push(EpisodeMetrics {
            episode,
            steps: rewards.len(),
            critic_loss: mean(&critic_losses),
            actor_loss: mean(&actor_losses),
            train_return_pct: crate::env::cumulative_log_return(&rewards)?,
            val_return_pct,
            seed: config.seed,
            env_id: split.env_id,
            trace_kind: config.trace.kind,
        });
    }
    Ok((agent, metrics))
}

/// Return in percent of a policy trading uniformly at random over `range`.
pub fn random_policy_return(data: &Dataset, range: Range<usize>, env: EnvConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = env.h_max;
    run_episode(data, range, env, |_| rng.gen_range(-h..=h))?.return_pct()
}
