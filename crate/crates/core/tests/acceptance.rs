//! End-to-end acceptance suite. Every criterion is checked against an
//! oracle written here (closed-form formulas, value iteration, direct
//! finite differences, explicit wealth bookkeeping), and each prints one
//! PASS/FAIL line. The criteria run sequentially inside one test so that
//! their wall-clock limits are measured without contention.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tracesac::agent::{
    actor_objective, critic_objective, prepare_input, random_policy_return, Actor, Critic, NetworkConfig,
    PreparedInput, TrainingMetrics,
};
use tracesac::data::{synthesize_market, Dataset, SeparationConfig, SynthKind, SynthSpec};
use tracesac::env::{run_episode, EnvConfig, MarkRule, Observation};
use tracesac::harness::{cli_report, cli_train, prepare_environments, smoke_agent, DataSource, RunConfig};
use tracesac::nn::{
    sample_squashed_gaussian, squashed_gaussian_grads, Activation, Dense, Lstm, ParamBlock, Parameterized,
};
use tracesac::tabular::{exact_q, tabular_retrace_iterate, PolicyTable, TabularMdp};
use tracesac::traces::{is_conservative, retrace_target, trace_coefficient, SegmentEval, TraceKind, TraceSpec};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed <= limit
}

// ---------------------------------------------------------------- 1

/// Q^π by plain iterative policy evaluation, run until the update is below
/// 1e-14.
fn value_iteration(mdp: &TabularMdp, pi: &PolicyTable) -> Vec<f64> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut q = vec![0.0; ns * na];
    loop {
        let v: Vec<f64> = (0..ns)
            .map(|y| (0..na).map(|b| pi.probs[y * na + b] * q[y * na + b]).sum())
            .collect();
        let next: Vec<f64> = (0..ns * na)
            .map(|sa| {
                let p = &mdp.transitions[sa * ns..(sa + 1) * ns];
                mdp.rewards[sa] + mdp.gamma * p.iter().zip(&v).map(|(p, v)| p * v).sum::<f64>()
            })
            .collect();
        let change = max_abs(&next, &q);
        q = next;
        if change < 1e-14 {
            return q;
        }
    }
}

fn tabular_convergence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut slowest = 0usize;
    let mut failures = Vec::new();
    for m in 0..20 {
        let mdp = TabularMdp::random(5, 3, 0.9, &mut rng).unwrap();
        let mu = PolicyTable::random_full_support(5, 3, &mut rng);
        let pi = PolicyTable::random_full_support(5, 3, &mut rng);
        let oracle = value_iteration(&mdp, &pi);
        let direct = exact_q(&mdp, &pi).unwrap();
        worst = worst.max(max_abs(&oracle, &direct));
        for kind in [TraceKind::Retrace, TraceKind::ImportanceSampling, TraceKind::TreeBackup] {
            let spec = TraceSpec {
                kind,
                lambda: 1.0,
                n: 0,
                gamma: 0.9,
                alpha_ent: 0.0,
            };
            let run = tabular_retrace_iterate(&mdp, &mu, &pi, &spec, 50, 1000).unwrap();
            match run.iterates.iter().position(|q| max_abs(q, &oracle) <= 1e-6) {
                Some(k) => slowest = slowest.max(k),
                None => failures.push(format!("mdp {m} {kind}")),
            }
            worst = worst.max(max_abs(run.last(), &oracle));
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures.is_empty() && worst <= 1e-6 && within(Duration::from_secs(5), elapsed),
        format!(
            "20 MDPs x 3 kinds, max |Q - Q^pi| {worst:.1e}, slowest {slowest} iterations, {:.2}s{}",
            elapsed.as_secs_f64(),
            if failures.is_empty() {
                String::new()
            } else {
                format!(", not converged: {}", failures.join("; "))
            }
        ),
    )
}

// ---------------------------------------------------------------- 2

fn single_step_reduction() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let kind = TraceKind::ALL[i % 5];
        let len = rng.gen_range(1..10);
        let spec = TraceSpec {
            kind,
            lambda: 0.0,
            n: rng.gen_range(0..10),
            gamma: rng.gen_range(0.0..0.999),
            alpha_ent: rng.gen_range(0.0..2.0),
        };
        let r: f64 = rng.gen_range(-1.0..1.0);
        let q_start: f64 = rng.gen_range(-10.0..10.0);
        let q_next: f64 = rng.gen_range(-10.0..10.0);
        let log_pi_next: f64 = rng.gen_range(-5.0..3.0);
        // δ_0 written out; later offsets carry arbitrary errors
        let mut deltas = vec![r + spec.gamma * (q_next - spec.alpha_ent * log_pi_next) - q_start];
        deltas.extend((1..len).map(|_| rng.gen_range(-50.0..50.0)));
        let logs = |rng: &mut ChaCha8Rng| (0..len).map(|_| rng.gen_range(-6.0..3.0)).collect::<Vec<f64>>();
        let eval = SegmentEval::new(kind, logs(&mut rng), logs(&mut rng), deltas);
        let backup = r + spec.gamma * (q_next - spec.alpha_ent * log_pi_next);
        worst = worst.max((retrace_target(&eval, q_start, &spec) - backup).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-12 && within(Duration::from_secs(1), elapsed),
        format!("1000 segments, all kinds, max deviation {worst:.1e}, {:.3}s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 3

fn coefficient_table() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = Vec::new();
    let mut non_conservative_seen = [false; 5];
    for _ in 0..10_000 {
        let pi: f64 = 1.0 - rng.gen::<f64>();
        let mu: f64 = 1.0 - rng.gen::<f64>();
        let rho = pi / mu;
        for (k, kind) in TraceKind::ALL.into_iter().enumerate() {
            let (expect, yes) = match kind {
                TraceKind::Retrace => (if rho < 1.0 { rho } else { 1.0 }, true),
                TraceKind::ImportanceSampling => (rho, true),
                TraceKind::TreeBackup => (pi, true),
                TraceKind::PengQ => (1.0, false),
                TraceKind::Uncorrected => (1.0, false),
            };
            let c = trace_coefficient(kind, pi, mu, 0.9).unwrap();
            let conservative = is_conservative(kind, pi, mu, 0.9).unwrap();
            let pair_ok = 0.0 <= expect && expect <= rho;
            if c != expect || conservative != pair_ok || (yes && !conservative) {
                mismatches.push(format!("{kind} pi={pi} mu={mu}"));
            }
            if !conservative {
                non_conservative_seen[k] = true;
            }
        }
    }
    // the NO rows must actually leave [0, π/μ] somewhere
    let no_rows_violate = non_conservative_seen[3] && non_conservative_seen[4];
    let yes_rows_hold = !non_conservative_seen[0] && !non_conservative_seen[1] && !non_conservative_seen[2];
    let elapsed = start.elapsed();
    outcome(
        mismatches.is_empty() && no_rows_violate && yes_rows_hold && within(Duration::from_secs(1), elapsed),
        format!(
            "10000 pairs, {} mismatches, YES rows always conservative: {yes_rows_hold}, NO rows violate: {no_rows_violate}, {:.3}s",
            mismatches.len(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 4

/// Central differences over every coordinate of every block, compared with
/// the gradient the loss accumulates.
fn finite_difference_error<M: Parameterized>(model: &mut M, mut loss: impl FnMut(&mut M) -> f64) -> f64 {
    let h = 1e-5;
    for b in model.blocks_mut() {
        b.grad.iter_mut().for_each(|g| *g = 0.0);
    }
    loss(model);
    let analytic: Vec<Vec<f64>> = model.blocks().iter().map(|b| b.grad.clone()).collect();
    let mut worst = 0.0f64;
    for (bi, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let original = model.blocks()[bi].values[i];
            model.blocks_mut()[bi].values[i] = original + h;
            let plus = loss(model);
            model.blocks_mut()[bi].values[i] = original - h;
            let minus = loss(model);
            model.blocks_mut()[bi].values[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

struct Block(ParamBlock);

impl Parameterized for Block {
    fn blocks(&self) -> Vec<&ParamBlock> {
        vec![&self.0]
    }
    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        vec![&mut self.0]
    }
}

struct ActorAndCritics {
    actor: Actor,
    critics: [Critic; 2],
}

impl Parameterized for ActorAndCritics {
    fn blocks(&self) -> Vec<&ParamBlock> {
        self.actor.blocks()
    }
    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        self.actor.blocks_mut()
    }
}

fn observations(env: EnvConfig, seed: u64) -> Vec<PreparedInput> {
    let data = synthesize_market(&SynthSpec {
        kind: SynthKind::RandomWalk {
            start: 100.0,
            sigma: 0.003,
            half_spread: 0.02,
        },
        length: 25,
        seed,
        start_timestamp: 0,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: Vec<Observation> = Vec::new();
    run_episode(&data, 0..25, env, |o| {
        seen.push(o.clone());
        rng.gen_range(-0.1..0.1)
    })
    .unwrap();
    seen.iter().step_by(4).map(|o| prepare_input(o, env.initial_balance)).collect()
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut errors: Vec<(&str, f64)> = Vec::new();

    let mut dense = Dense::new("dense", 5, 4, Activation::Tanh, &mut rng);
    let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let up: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    errors.push((
        "dense",
        finite_difference_error(&mut dense, |d| {
            let c = d.forward(&x).unwrap();
            d.backward(&c, &up).unwrap();
            c.output.iter().zip(&up).map(|(a, b)| a * b).sum()
        }),
    ));

    let mut lstm = Lstm::new("lstm", 3, 4, &mut rng);
    let seq: Vec<f64> = (0..3 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let coef: Vec<f64> = (0..4 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    errors.push((
        "lstm",
        finite_difference_error(&mut lstm, |l| {
            let c = l.forward(&seq, None).unwrap();
            l.backward(&c, &coef).unwrap();
            c.hidden.iter().flatten().zip(&coef).map(|(h, c)| h * c).sum()
        }),
    ));

    let noises: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
    let mut gauss = Block(ParamBlock::from_values("gaussian", &[2], vec![-0.4, -0.3]));
    errors.push((
        "squashed gaussian log-density",
        finite_difference_error(&mut gauss, |p| {
            let (m, s) = (p.0.values[0], p.0.values[1]);
            noises
                .iter()
                .map(|&e| {
                    let out = sample_squashed_gaussian(m, s, e, 0.1);
                    let g = squashed_gaussian_grads(&out, 0.1);
                    p.0.grad[0] += g.dlogp_dmean;
                    p.0.grad[1] += g.dlogp_dlogstd;
                    out.log_density
                })
                .sum()
        }),
    ));

    let env = EnvConfig {
        initial_balance: 100.0,
        ..EnvConfig::default()
    };
    let net = NetworkConfig {
        lstm_hidden: 3,
        head_hidden: vec![4],
    };
    let inputs = observations(env, 9);
    let input_size = inputs[0].seq.len() / (env.lookback + 1);
    let mut critic = Critic::new("critic", input_size, &net, &mut rng);
    let batch: Vec<(PreparedInput, f64)> = inputs.iter().map(|x| (x.clone(), rng.gen_range(-1.0..1.0))).collect();
    let targets: Vec<f64> = batch.iter().map(|_| rng.gen_range(-2.0..2.0)).collect();
    errors.push((
        "critic loss",
        finite_difference_error(&mut critic, |c| {
            critic_objective(c, &batch, &targets, 2.0 * batch.len() as f64).unwrap()
        }),
    ));

    let mut model = ActorAndCritics {
        actor: Actor::new("actor", input_size, &net, &mut rng),
        critics: [
            Critic::new("c1", input_size, &net, &mut rng),
            Critic::new("c2", input_size, &net, &mut rng),
        ],
    };
    let eps: Vec<f64> = inputs.iter().map(|_| rng.sample(StandardNormal)).collect();
    errors.push((
        "actor loss",
        finite_difference_error(&mut model, |m| {
            let [c1, c2] = &mut m.critics;
            actor_objective(&mut m.actor, [c1, c2], &inputs, &eps, 0.2, env.h_max).unwrap()
        }),
    ));

    let elapsed = start.elapsed();
    let passed = errors.iter().all(|&(_, e)| e < 1e-4) && within(Duration::from_secs(30), elapsed);
    let detail = errors
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(passed, format!("max rel errors: {detail}, {:.2}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- 5

/// Wealth path rebuilt from the bars and the executed trades.
fn bookkeeping_wealth(data: &Dataset, cfg: &EnvConfig, executed: &[f64]) -> Vec<f64> {
    let bars = data.bars();
    let mut balance = cfg.initial_balance;
    let mut holdings = 0.0;
    let mut wealth = vec![cfg.initial_balance];
    for (t, &q) in executed.iter().enumerate() {
        let price = if q > 0.0 { bars[t].ask } else { bars[t].bid };
        if q != 0.0 {
            balance -= price * q + cfg.commission * price * q.abs();
        }
        holdings += q;
        let next = &bars[t + 1];
        let mark = match cfg.mark_rule {
            MarkRule::Mid => next.mid(),
            MarkRule::BidForLong if holdings > 0.0 => next.bid,
            MarkRule::BidForLong if holdings < 0.0 => next.ask,
            MarkRule::BidForLong => next.mid(),
        };
        wealth.push(balance + holdings * mark);
    }
    wealth
}

fn environment_accounting() -> Outcome {
    let start = Instant::now();
    let cfg = EnvConfig {
        commission: 0.0005,
        initial_balance: 1000.0,
        ..EnvConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut telescoping = 0.0f64;
    let mut wealth_err = 0.0f64;
    for ep in 0..100 {
        let data = synthesize_market(&SynthSpec {
            kind: SynthKind::RandomWalk {
                start: 100.0,
                sigma: 0.002,
                half_spread: 0.02,
            },
            length: 60,
            seed: ep,
            start_timestamp: 0,
        })
        .unwrap();
        let out = run_episode(&data, 0..60, cfg, |_| rng.gen_range(-0.15..0.15)).unwrap();
        let executed: Vec<f64> = out.trace.iter().map(|r| r.executed).collect();
        let wealth = bookkeeping_wealth(&data, &cfg, &executed);
        let v_t = *wealth.last().unwrap();
        wealth_err = wealth_err.max((v_t - out.final_wealth).abs() / v_t);
        let total: f64 = out.rewards.iter().sum();
        telescoping = telescoping.max((total - (v_t / wealth[0]).ln()).abs());
    }

    // zero exposure: explicit zeros and requests below one unit
    let data = synthesize_market(&SynthSpec {
        kind: SynthKind::Sinusoid {
            base: 100.0,
            amplitude: 2.0,
            period: 30.0,
            half_spread: 0.05,
        },
        length: 90,
        seed: 0,
        start_timestamp: 0,
    })
    .unwrap();
    let idle = run_episode(&data, 0..90, cfg, |_| 0.0).unwrap();
    let tiny = run_episode(&data, 0..90, cfg, |_| rng.gen_range(-0.0099..0.0099)).unwrap();
    let idle_total: f64 = idle.rewards.iter().sum::<f64>() + tiny.rewards.iter().sum::<f64>();

    // frictionless round trips on flat books at random levels
    let frictionless = EnvConfig { commission: 0.0, ..cfg };
    let mut drift = 0.0f64;
    for _ in 0..50 {
        let price: f64 = rng.gen_range(1.0..1000.0);
        let flat = synthesize_market(&SynthSpec {
            kind: SynthKind::Flat { price },
            length: 12,
            seed: 0,
            start_timestamp: 0,
        })
        .unwrap();
        let legs: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let mut plan = legs.iter().map(|&a| tracesac::env::discretize_action(a, 0.01)).collect::<Vec<_>>();
        plan.extend(plan.clone().iter().map(|a| -a));
        let mut it = plan.into_iter();
        let out = run_episode(&flat, 0..12, frictionless, |_| it.next().unwrap_or(0.0)).unwrap();
        drift = drift.max((out.final_wealth / out.initial_wealth).ln().abs());
    }

    let elapsed = start.elapsed();
    outcome(
        telescoping <= 1e-9 && wealth_err <= 1e-12 && idle_total == 0.0 && drift <= 1e-12
            && within(Duration::from_secs(5), elapsed),
        format!(
            "(a) telescoping {telescoping:.1e} (wealth vs bookkeeping {wealth_err:.1e}), (b) idle total {idle_total}, (c) round-trip log drift {drift:.1e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 6 and 8

const SMOKE_MINUTES_PER_DAY: usize = 120;
const SMOKE_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn sinusoid_run(out: &Path) -> RunConfig {
    RunConfig {
        data: DataSource::Synth(SynthSpec {
            kind: SynthKind::Sinusoid {
                base: 100.0,
                amplitude: 1.0,
                period: 120.0,
                half_spread: 0.0,
            },
            length: 5 * SMOKE_MINUTES_PER_DAY,
            seed: 0,
            start_timestamp: 0,
        }),
        separation: SeparationConfig {
            n_envs: 1,
            days_per_env: 5,
            train_days: 3,
            minutes_per_day: SMOKE_MINUTES_PER_DAY,
        },
        env: EnvConfig {
            h_max: 0.1,
            lookback: 3,
            unit: 0.01,
            commission: 0.0,
            initial_balance: 100.0,
            mark_rule: MarkRule::BidForLong,
        },
        agents: vec![smoke_agent(TraceKind::Retrace)],
        seeds: SMOKE_SEEDS.to_vec(),
        output_dir: out.to_path_buf(),
        standardize: true,
    }
}

fn learning_smoke(out: &Path) -> Outcome {
    let start = Instant::now();
    let cfg = sinusoid_run(out);
    let manifest = match cli_train(&cfg) {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let finals: Vec<f64> = manifest
        .runs
        .iter()
        .map(|r| {
            TrainingMetrics::read_csv(&out.join(&r.metrics_file))
                .unwrap()
                .final_validation_return()
                .unwrap()
        })
        .collect();
    let (data, split) = prepare_environments(&cfg).unwrap().remove(0);
    let random: Vec<f64> = SMOKE_SEEDS
        .iter()
        .map(|&s| random_policy_return(&data, split.validation.clone(), cfg.env, s).unwrap())
        .collect();
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let (agent_mean, random_mean) = (mean(&finals), mean(&random));
    let elapsed = start.elapsed();
    outcome(
        agent_mean > 0.0 && agent_mean > random_mean && within(Duration::from_secs(15 * 60), elapsed),
        format!(
            "mean validation return {agent_mean:.4}% (per seed {:?}) vs random {random_mean:.4}%, {:.0}s",
            finals.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            elapsed.as_secs_f64()
        ),
    )
}

fn determinism(first: &Path, second: &Path) -> Outcome {
    if let Err(e) = cli_train(&sinusoid_run(second)) {
        return outcome(false, format!("repeat training failed: {e}"));
    }
    let mut names: Vec<_> = fs::read_dir(first.join("metrics"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let mut differing = Vec::new();
    for name in &names {
        let a = fs::read(first.join("metrics").join(name)).unwrap();
        let b = fs::read(second.join("metrics").join(name)).ok();
        if b.as_deref() != Some(&a[..]) {
            differing.push(name.to_string_lossy().into_owned());
        }
    }
    outcome(
        !names.is_empty() && differing.is_empty(),
        format!("{} metrics files compared byte for byte, {} differ", names.len(), differing.len()),
    )
}

// ---------------------------------------------------------------- 7

fn protocol_fidelity(out: &Path) -> Outcome {
    let start = Instant::now();
    let minutes = 60;
    let mut agent = smoke_agent(TraceKind::Retrace);
    agent.episodes = 10;
    agent.warmup = 100;
    let cfg = RunConfig {
        data: DataSource::Synth(SynthSpec {
            kind: SynthKind::RandomWalk {
                start: 100.0,
                sigma: 0.0005,
                half_spread: 0.01,
            },
            length: 20 * minutes,
            seed: 3,
            start_timestamp: 0,
        }),
        separation: SeparationConfig {
            n_envs: 4,
            days_per_env: 5,
            train_days: 3,
            minutes_per_day: minutes,
        },
        env: EnvConfig {
            initial_balance: 100.0,
            ..EnvConfig::default()
        },
        agents: vec![agent],
        seeds: vec![0],
        output_dir: out.to_path_buf(),
        standardize: true,
    };
    let manifest = match cli_train(&cfg) {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let mut problems = Vec::new();
    if manifest.runs.len() != 4 {
        problems.push(format!("{} runs", manifest.runs.len()));
    }
    for (e, s) in manifest.splits.iter().enumerate() {
        let base = e * 5 * minutes;
        let ok = s.env_id == e
            && s.train == (base..base + 3 * minutes)
            && s.validation == (base + 3 * minutes..base + 4 * minutes)
            && s.test == (base + 4 * minutes..base + 5 * minutes);
        if !ok {
            problems.push(format!("split {e} is {s:?}"));
        }
    }
    for run in &manifest.runs {
        let m = TrainingMetrics::read_csv(&out.join(&run.metrics_file)).unwrap();
        let val_episodes: Vec<usize> = m.rows.iter().filter(|r| r.val_return_pct.is_some()).map(|r| r.episode).collect();
        if m.rows.len() != 10 || val_episodes != vec![5, 10] {
            problems.push(format!("{} validates at {val_episodes:?}", run.metrics_file));
        }
    }
    let report = cli_report(out);
    let (rows, table) = match report {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("report failed: {e}")),
    };
    let cell = regex_like_cell(&table);
    if !table.contains("Market") || rows.iter().filter(|r| r.trace_kind == "market").count() != 4 {
        problems.push("missing Market row".into());
    }
    if !cell {
        problems.push("cells are not formatted as mean ± std".into());
    }
    let elapsed = start.elapsed();
    if !within(Duration::from_secs(120), elapsed) {
        problems.push("over two minutes".into());
    }
    println!("{table}");
    outcome(
        problems.is_empty(),
        format!(
            "4 envs, 3/1/1-day splits, validation at episodes 5 and 10, Market row present, {:.0}s{}",
            elapsed.as_secs_f64(),
            if problems.is_empty() {
                String::new()
            } else {
                format!("; problems: {}", problems.join("; "))
            }
        ),
    )
}

/// True when the table holds at least one `d.dddd ± d.dddd` cell.
fn regex_like_cell(table: &str) -> bool {
    table.split("  ").map(str::trim).any(|cell| {
        let Some((m, s)) = cell.split_once(" ± ") else {
            return false;
        };
        let four = |x: &str| {
            let x = x.trim_start_matches('-');
            x.split_once('.')
                .is_some_and(|(a, b)| !a.is_empty() && a.chars().all(|c| c.is_ascii_digit()) && b.len() == 4 && b.chars().all(|c| c.is_ascii_digit()))
        };
        four(m) && four(s)
    })
}

// ----------------------------------------------------------------

#[test]
fn acceptance_suite() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("sinusoid_a");
    let second = dir.path().join("sinusoid_b");
    let protocol = dir.path().join("protocol");

    let results: Vec<(&str, Outcome)> = vec![
        ("1 tabular retrace convergence", tabular_convergence()),
        ("2 single-step reduction", single_step_reduction()),
        ("3 trace-coefficient table", coefficient_table()),
        ("4 gradient fidelity", gradient_fidelity()),
        ("5 environment accounting", environment_accounting()),
        ("6 learning smoke test", learning_smoke(&first)),
        ("7 protocol fidelity", protocol_fidelity(&protocol)),
        ("8 determinism", determinism(&first, &second)),
    ];
    for (name, o) in &results {
        println!("[{}] criterion {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.passed).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
