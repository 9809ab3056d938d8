//! Single-asset market-replay environment.
//!
//! The agent emits a continuous trade size in `[-h_max, h_max]`. The trade is
//! floored to the minimum trading unit, filled at the ask (buys) or bid
//! (sells) with a proportional commission, and the account is marked to
//! market on the next bar. The reward is the log change in wealth.

use std::fs::File;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Floor for wealth after ruin.
pub const RUIN_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkRule {
    /// Longs valued at the bid, shorts at the ask.
    BidForLong,
    Mid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub h_max: f64,
    pub lookback: usize,
    pub unit: f64,
    pub commission: f64,
    pub initial_balance: f64,
    pub mark_rule: MarkRule,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            h_max: 0.1,
            lookback: 3,
            unit: 0.01,
            commission: 0.0,
            initial_balance: 1000.0,
            mark_rule: MarkRule::BidForLong,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.h_max > 0.0
            && self.unit > 0.0
            && self.unit <= self.h_max
            && self.commission >= 0.0
            && self.initial_balance > 0.0
            && [self.h_max, self.unit, self.commission, self.initial_balance]
                .iter()
                .all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::config(
                "env",
                "require h_max > 0, 0 < unit <= h_max, commission >= 0, initial_balance > 0",
            ))
        }
    }
}

/// Account state at the current bar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub t: usize,
    pub balance: f64,
    pub holdings: f64,
    pub wealth: f64,
}

/// Balance, holdings and the look-back window of `[features..., bid, ask]`
/// rows, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub balance: f64,
    pub holdings: f64,
    pub rows: usize,
    pub cols: usize,
    pub window: Vec<f64>,
}

impl Observation {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.window[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepInfo {
    pub executed: f64,
    pub price: f64,
    pub fee: f64,
    pub clamped: bool,
    pub ruined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// `sign(a) * floor(|a| / u) * u`. A relative slack of 1e-9 keeps exact
/// multiples of `u` from flooring down through representation error.
pub fn discretize_action(action: f64, unit: f64) -> f64 {
    let steps = (action.abs() / unit + 1e-9).floor();
    if steps == 0.0 {
        0.0
    } else {
        action.signum() * steps * unit
    }
}

/// Cumulative log return of an episode in percent.
pub fn cumulative_log_return(step_rewards: &[f64]) -> Result<f64> {
    if step_rewards.is_empty() {
        return Err(Error::InvalidArgument("empty reward sequence".into()));
    }
    Ok(100.0 * step_rewards.iter().sum::<f64>())
}

#[derive(Debug)]
pub struct TradingEnv<'a> {
    data: &'a Dataset,
    config: EnvConfig,
    range: Range<usize>,
    state: EnvState,
    done: bool,
}

impl<'a> TradingEnv<'a> {
    /// Creates an environment and resets it to the start of `range`.
    pub fn new(data: &'a Dataset, range: Range<usize>, config: EnvConfig) -> Result<(Self, Observation)> {
        let mut env = TradingEnv {
            data,
            config,
            range: range.clone(),
            state: EnvState {
                t: range.start,
                balance: config.initial_balance,
                holdings: 0.0,
                wealth: config.initial_balance,
            },
            done: false,
        };
        let obs = env.reset(range, config)?;
        Ok((env, obs))
    }

    pub fn reset(&mut self, range: Range<usize>, config: EnvConfig) -> Result<Observation> {
        config.validate()?;
        if range.end > self.data.len() {
            return Err(Error::InvalidArgument(format!(
                "range {:?} exceeds dataset length {}",
                range,
                self.data.len()
            )));
        }
        if range.len() <= config.lookback + 1 {
            return Err(Error::InvalidArgument(format!(
                "range of length {} is too short for look-back {}",
                range.len(),
                config.lookback
            )));
        }
        self.config = config;
        self.range = range;
        self.state = EnvState {
            t: self.range.start,
            balance: config.initial_balance,
            holdings: 0.0,
            wealth: config.initial_balance,
        };
        self.done = false;
        Ok(self.observe())
    }

    pub fn state(&self) -> EnvState {
        self.state
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Number of steps in a full episode over the current range.
    pub fn episode_len(&self) -> usize {
        self.range.len() - 1
    }

    pub fn observe(&self) -> Observation {
        let l = self.config.lookback;
        let f = self.data.n_features();
        let cols = f + 2;
        let mut window = Vec::with_capacity((l + 1) * cols);
        let bars = self.data.bars();
        for k in 0..=l {
            // back-fill pre-history with the first bar of the range
            let idx = (self.state.t + k).saturating_sub(l).max(self.range.start);
            let bar = &bars[idx];
            window.extend_from_slice(&bar.features);
            window.push(bar.bid);
            window.push(bar.ask);
        }
        Observation {
            balance: self.state.balance,
            holdings: self.state.holdings,
            rows: l + 1,
            cols,
            window,
        }
    }

    fn mark_price(&self, t: usize, holdings: f64) -> f64 {
        let bar = &self.data.bars()[t];
        match self.config.mark_rule {
            MarkRule::Mid => bar.mid(),
            MarkRule::BidForLong => {
                if holdings > 0.0 {
                    bar.bid
                } else if holdings < 0.0 {
                    bar.ask
                } else {
                    bar.mid()
                }
            }
        }
    }

    pub fn step(&mut self, action: f64) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let h_max = self.config.h_max;
        let clamped = !(action.abs() <= h_max);
        let action = if action.is_nan() { 0.0 } else { action.clamp(-h_max, h_max) };
        let executed = discretize_action(action, self.config.unit);

        let bar = &self.data.bars()[self.state.t];
        let price = if executed > 0.0 {
            bar.ask
        } else if executed < 0.0 {
            bar.bid
        } else {
            0.0
        };
        let fee = self.config.commission * price * executed.abs();
        let balance = self.state.balance - price * executed - fee;
        let holdings = self.state.holdings + executed;

        let t = self.state.t + 1;
        let wealth = balance + holdings * self.mark_price(t, holdings);
        let prev = self.state.wealth;
        let ruined = wealth <= 0.0;
        let reward = (wealth.max(RUIN_EPSILON) / prev).ln();

        self.state = EnvState {
            t,
            balance,
            holdings,
            wealth,
        };
        self.done = ruined || t + 1 == self.range.end;
        Ok(StepResult {
            observation: self.observe(),
            reward,
            done: self.done,
            info: StepInfo {
                executed,
                price,
                fee,
                clamped,
                ruined,
            },
        })
    }
}

/// One row of an exported episode trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub action: f64,
    pub executed: f64,
    pub price: f64,
    pub fee: f64,
    pub balance: f64,
    pub holdings: f64,
    pub wealth: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub rewards: Vec<f64>,
    pub trace: Vec<TraceRow>,
    pub initial_wealth: f64,
    pub final_wealth: f64,
}

impl EpisodeOutcome {
    pub fn return_pct(&self) -> Result<f64> {
        cumulative_log_return(&self.rewards)
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("t,action,executed,price,fee,balance,holdings,wealth,reward\n");
        for r in &self.trace {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.t, r.action, r.executed, r.price, r.fee, r.balance, r.holdings, r.wealth, r.reward
            ));
        }
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Runs a full episode over `range`, asking `policy` for an action at every
/// step.
pub fn run_episode(
    data: &Dataset,
    range: Range<usize>,
    config: EnvConfig,
    mut policy: impl FnMut(&Observation) -> f64,
) -> Result<EpisodeOutcome> {
    let (mut env, mut obs) = TradingEnv::new(data, range, config)?;
    let initial_wealth = env.state().wealth;
    let mut rewards = Vec::with_capacity(env.episode_len());
    let mut trace = Vec::with_capacity(env.episode_len());
    loop {
        let t = env.state().t;
        let action = policy(&obs);
        let step = env.step(action)?;
        let s = env.state();
        trace.push(TraceRow {
            t,
            action,
            executed: step.info.executed,
            price: step.info.price,
            fee: step.info.fee,
            balance: s.balance,
            holdings: s.holdings,
            wealth: s.wealth,
            reward: step.reward,
        });
        rewards.push(step.reward);
        obs = step.observation;
        if step.done {
            break;
        }
    }
    Ok(EpisodeOutcome {
        rewards,
        trace,
        initial_wealth,
        final_wealth: env.state().wealth,
    })
}
