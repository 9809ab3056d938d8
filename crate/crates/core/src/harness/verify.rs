//! Built-in oracle checks behind the `verify` subcommand.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::agent::{actor_objective, critic_objective, prepare_input, Actor, Critic, NetworkConfig, PreparedInput};
use crate::data::{synthesize_market, Dataset, SynthKind, SynthSpec};
use crate::env::{run_episode, EnvConfig, Observation};
use crate::nn::{
    gradient_check, sample_squashed_gaussian, squashed_gaussian_grads, Activation, Dense, GradCheckConfig,
    GradCheckReport, Lstm, ParamBlock, Parameterized,
};
use crate::tabular::{bellman_residual, exact_q, max_abs_diff, tabular_retrace_iterate, PolicyTable, TabularMdp};
use crate::traces::{is_conservative, retrace_target, soft_td_error, trace_coefficient, SegmentEval, TraceKind, TraceSpec};

const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VerifyOptions {
    /// Negative control: perturbs the LSTM weight gradient after
    /// backpropagation so the LSTM gradient check must fail.
    pub corrupt_lstm_backward: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &'static str, f: impl FnOnce() -> (bool, String)) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = f();
    CheckResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn grad_outcome(report: GradCheckReport) -> (bool, String) {
    let detail = match &report.worst {
        Some((block, i, a, n)) => format!(
            "max rel err {:.2e} over {} coords (worst {block}[{i}]: {a:.6e} vs {n:.6e})",
            report.max_rel_error, report.checked
        ),
        None => "no coordinates checked".into(),
    };
    (report.passed(GRAD_TOL), detail)
}

fn check_exact_q() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let mdp = TabularMdp::random(5, 3, 0.9, &mut rng).expect("valid random mdp");
        let pi = PolicyTable::random_full_support(5, 3, &mut rng);
        match exact_q(&mdp, &pi) {
            Ok(q) => worst = worst.max(bellman_residual(&mdp, &pi, &q)),
            Err(e) => return (false, e.to_string()),
        }
    }
    (worst < 1e-10, format!("max Bellman residual {worst:.2e}"))
}

fn check_tabular_retrace() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    let mut slowest = 0;
    for _ in 0..5 {
        let mdp = TabularMdp::random(5, 3, 0.9, &mut rng).expect("valid random mdp");
        let mu = PolicyTable::random_full_support(5, 3, &mut rng);
        let pi = PolicyTable::random_full_support(5, 3, &mut rng);
        let q_pi = exact_q(&mdp, &pi).expect("solvable");
        for kind in [TraceKind::Retrace, TraceKind::ImportanceSampling, TraceKind::TreeBackup] {
            let spec = TraceSpec {
                kind,
                lambda: 1.0,
                n: 0,
                gamma: 0.9,
                alpha_ent: 0.0,
            };
            let run = match tabular_retrace_iterate(&mdp, &mu, &pi, &spec, 50, 1000) {
                Ok(r) => r,
                Err(e) => return (false, e.to_string()),
            };
            worst = worst.max(max_abs_diff(run.last(), &q_pi));
            slowest = slowest.max(run.first_within(&q_pi, 1e-6).unwrap_or(usize::MAX));
        }
    }
    (
        worst < 1e-6,
        format!("max |Q - Q^pi| {worst:.2e}, slowest convergence at iteration {slowest}"),
    )
}

fn check_trace_reduction() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let len = rng.gen_range(1..8);
        let spec = TraceSpec {
            kind: TraceKind::ALL[rng.gen_range(0..5)],
            lambda: 0.0,
            n: rng.gen_range(0..8),
            gamma: rng.gen_range(0.0..0.999),
            alpha_ent: rng.gen_range(0.0..1.0),
        };
        let r: f64 = rng.gen_range(-1.0..1.0);
        let (q0, q1, lp) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-3.0..3.0));
        let mut deltas = vec![soft_td_error(r, q1, lp, q0, spec.gamma, spec.alpha_ent)];
        deltas.extend((1..len).map(|_| rng.gen_range(-10.0..10.0)));
        let logs = |rng: &mut ChaCha8Rng| (0..len).map(|_| rng.gen_range(-4.0..2.0)).collect::<Vec<f64>>();
        let eval = SegmentEval::new(spec.kind, logs(&mut rng), logs(&mut rng), deltas);
        let single = r + spec.gamma * (q1 - spec.alpha_ent * lp);
        worst = worst.max((retrace_target(&eval, q0, &spec) - single).abs());
    }
    (worst <= 1e-12, format!("max deviation from single-step backup {worst:.2e}"))
}

fn check_coefficients() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..2000 {
        let pi: f64 = rng.gen_range(1e-6..=1.0);
        let mu: f64 = rng.gen_range(1e-6..=1.0);
        for kind in TraceKind::ALL {
            let c = trace_coefficient(kind, pi, mu, 0.9).expect("mu > 0");
            let expect = match kind {
                TraceKind::Retrace => (pi / mu).min(1.0),
                TraceKind::ImportanceSampling => pi / mu,
                TraceKind::TreeBackup => pi,
                TraceKind::PengQ | TraceKind::Uncorrected => 1.0,
            };
            let conservative = is_conservative(kind, pi, mu, 0.9).expect("mu > 0");
            if c != expect || (kind.conservative_by_construction() && !conservative) {
                return (false, format!("{kind} at pi={pi}, mu={mu}: c={c}, conservative={conservative}"));
            }
        }
    }
    (true, "2000 pairs, all kinds".into())
}

fn check_dense() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut layer = Dense::new("dense", 4, 3, Activation::Tanh, &mut rng);
    let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = [0.7, -1.3, 0.4];
    grad_outcome(gradient_check(
        &mut layer,
        |l| {
            let cache = l.forward(&x).expect("shape");
            l.backward(&cache, &w).expect("shape");
            cache.output.iter().zip(&w).map(|(a, b)| a * b).sum()
        },
        &GradCheckConfig::default(),
    ))
}

fn check_lstm(corrupt: bool) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut lstm = Lstm::new("lstm", 3, 4, &mut rng);
    let x: Vec<f64> = (0..3 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let coef: Vec<f64> = (0..4 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    grad_outcome(gradient_check(
        &mut lstm,
        |l| {
            let cache = l.forward(&x, None).expect("shape");
            l.backward(&cache, &coef).expect("shape");
            if corrupt {
                for g in &mut l.weight.grad {
                    *g *= 1.01;
                }
            }
            cache.hidden.iter().flatten().zip(&coef).map(|(h, c)| h * c).sum()
        },
        &GradCheckConfig::default(),
    ))
}

/// `(mean, log_std)` of a squashed Gaussian treated as parameters.
struct GaussianParams(ParamBlock);

impl Parameterized for GaussianParams {
    fn blocks(&self) -> Vec<&ParamBlock> {
        vec![&self.0]
    }
    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        vec![&mut self.0]
    }
}

fn check_squashed_gaussian() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let noises: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
    let mut params = GaussianParams(ParamBlock::from_values("gaussian", &[2], vec![0.3, -0.7]));
    // log-density plus a multiple of the action checks both derivative pairs
    grad_outcome(gradient_check(
        &mut params,
        |p| {
            let (mean, log_std) = (p.0.values[0], p.0.values[1]);
            let mut total = 0.0;
            for &e in &noises {
                let out = sample_squashed_gaussian(mean, log_std, e, 0.1);
                let g = squashed_gaussian_grads(&out, 0.1);
                total += out.log_density + 3.0 * out.action;
                p.0.grad[0] += g.dlogp_dmean + 3.0 * g.da_dmean;
                p.0.grad[1] += g.dlogp_dlogstd + 3.0 * g.da_dlogstd;
            }
            total
        },
        &GradCheckConfig::default(),
    ))
}

fn fixture_market() -> Dataset {
    synthesize_market(&SynthSpec {
        kind: SynthKind::Sinusoid {
            base: 100.0,
            amplitude: 1.0,
            period: 20.0,
            half_spread: 0.02,
        },
        length: 30,
        seed: 0,
        start_timestamp: 0,
    })
    .expect("valid fixture")
}

fn fixture_inputs(env: EnvConfig) -> Vec<PreparedInput> {
    let data = fixture_market();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut seen: Vec<Observation> = Vec::new();
    run_episode(&data, 0..data.len(), env, |obs| {
        seen.push(obs.clone());
        rng.gen_range(-env.h_max..=env.h_max)
    })
    .expect("fixture episode");
    seen.iter()
        .step_by(5)
        .map(|o| prepare_input(o, env.initial_balance))
        .collect()
}

fn tiny_net() -> NetworkConfig {
    NetworkConfig {
        lstm_hidden: 3,
        head_hidden: vec![4],
    }
}

fn check_critic_loss() -> (bool, String) {
    let env = EnvConfig {
        initial_balance: 100.0,
        ..EnvConfig::default()
    };
    let inputs = fixture_inputs(env);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let input_size = inputs[0].seq.len() / (env.lookback + 1);
    let mut critic = Critic::new("critic", input_size, &tiny_net(), &mut rng);
    let batch: Vec<(PreparedInput, f64)> = inputs.into_iter().map(|x| (x, rng.gen_range(-1.0..1.0))).collect();
    let targets: Vec<f64> = batch.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
    let denom = 2.0 * batch.len() as f64;
    grad_outcome(gradient_check(
        &mut critic,
        |c| critic_objective(c, &batch, &targets, denom).expect("shape"),
        &GradCheckConfig::default(),
    ))
}

struct ActorWithCritics {
    actor: Actor,
    critics: [Critic; 2],
}

impl Parameterized for ActorWithCritics {
    fn blocks(&self) -> Vec<&ParamBlock> {
        self.actor.blocks()
    }
    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        self.actor.blocks_mut()
    }
}

fn check_actor_loss() -> (bool, String) {
    let env = EnvConfig {
        initial_balance: 100.0,
        ..EnvConfig::default()
    };
    let inputs = fixture_inputs(env);
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let input_size = inputs[0].seq.len() / (env.lookback + 1);
    let mut model = ActorWithCritics {
        actor: Actor::new("actor", input_size, &tiny_net(), &mut rng),
        critics: [
            Critic::new("critic1", input_size, &tiny_net(), &mut rng),
            Critic::new("critic2", input_size, &tiny_net(), &mut rng),
        ],
    };
    let noises: Vec<f64> = inputs.iter().map(|_| rng.sample(StandardNormal)).collect();
    grad_outcome(gradient_check(
        &mut model,
        |m| {
            let [c1, c2] = &mut m.critics;
            actor_objective(&mut m.actor, [c1, c2], &inputs, &noises, 0.2, env.h_max).expect("shape")
        },
        &GradCheckConfig::default(),
    ))
}

fn check_env_accounting() -> (bool, String) {
    let data = synthesize_market(&SynthSpec {
        kind: SynthKind::RandomWalk {
            start: 100.0,
            sigma: 0.002,
            half_spread: 0.03,
        },
        length: 80,
        seed: 31,
        start_timestamp: 0,
    })
    .expect("valid fixture");
    let env = EnvConfig {
        commission: 0.001,
        initial_balance: 100.0,
        ..EnvConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let out = run_episode(&data, 0..data.len(), env, |_| rng.gen_range(-0.1..=0.1)).expect("episode");
        let total: f64 = out.rewards.iter().sum();
        worst = worst.max((total - (out.final_wealth / out.initial_wealth).ln()).abs());
    }
    let idle = run_episode(&data, 0..data.len(), env, |_| 0.0).expect("episode");
    let idle_total: f64 = idle.rewards.iter().sum();

    let flat = synthesize_market(&SynthSpec {
        kind: SynthKind::Flat { price: 100.0 },
        length: 10,
        seed: 0,
        start_timestamp: 0,
    })
    .expect("valid fixture");
    let frictionless = EnvConfig {
        commission: 0.0,
        ..env
    };
    let mut legs = [0.07, 0.02, -0.05, -0.04, 0.0, 0.0, 0.0, 0.0, 0.0].into_iter();
    let trip = run_episode(&flat, 0..10, frictionless, |_| legs.next().unwrap_or(0.0)).expect("episode");
    let drift = (trip.final_wealth - trip.initial_wealth).abs();

    let passed = worst <= 1e-9 && idle_total == 0.0 && drift <= 1e-12;
    (
        passed,
        format!("telescoping err {worst:.1e}, idle total {idle_total}, round-trip drift {drift:.1e}"),
    )
}

/// Runs every check in a fixed order.
pub fn run_checks(opts: VerifyOptions) -> Vec<CheckResult> {
    vec![
        timed("tabular.exact_q", check_exact_q),
        timed("tabular.retrace_convergence", check_tabular_retrace),
        timed("traces.single_step_reduction", check_trace_reduction),
        timed("traces.coefficient_table", check_coefficients),
        timed("grad.dense", check_dense),
        timed("grad.lstm", || check_lstm(opts.corrupt_lstm_backward)),
        timed("grad.squashed_gaussian", check_squashed_gaussian),
        timed("grad.critic_loss", check_critic_loss),
        timed("grad.actor_loss", check_actor_loss),
        timed("env.accounting", check_env_accounting),
    ]
}

/// Runs the checks and renders a pass/fail table. The boolean is true when
/// every check passed.
pub fn cli_verify(opts: VerifyOptions) -> (Vec<CheckResult>, String, bool) {
    let results = run_checks(opts);
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut table = String::new();
    for r in &results {
        table.push_str(&format!(
            "{}  {:<width$}  {:>6.2}s  {}\n",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        ));
    }
    let ok = results.iter().all(|r| r.passed);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if ok {
        table.push_str(&format!("all {} checks passed\n", results.len()));
    } else {
        table.push_str(&format!("failed: {}\n", failed.join(", ")));
    }
    (results, table, ok)
}
