//! Run configuration and the four-environment training protocol.
//!
//! A run directory produced by [`cli_train`] looks like
//!
//! ```text
//! config.json                       exact config that produced the run
//! manifest.json                     config copy, splits, runs, market returns
//! market.csv                        env_id,validation_return_pct,test_return_pct
//! metrics/env{E}_{kind}_seed{S}.csv one TrainingMetrics file per run
//! checkpoints/env{E}_{kind}_seed{S}.json
//! ```
//!
//! [`cli_eval`] adds `traces/` and `eval.csv`; [`cli_report`] adds
//! `report.csv`.

mod report;
mod verify;

pub use report::{aggregate, cli_report, format_cell, read_market_csv, MarketRow, ResultRow, REPORT_HEADER};
pub use verify::{cli_verify, run_checks, CheckResult, VerifyOptions};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{train, Agent, AgentConfig, TrainingMetrics};
use crate::data::{
    ingest_csv, separate_environments, standardize, synthesize_market, CsvSchema, Dataset, EnvironmentSplit,
    SeparationConfig, SynthSpec,
};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::nn::{load_checkpoint, save_checkpoint};
use crate::traces::TraceKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv { path: PathBuf, n_features: usize },
    Synth(SynthSpec),
}

fn default_true() -> bool {
    true
}

/// Everything a training run needs. Parsed strictly: unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub separation: SeparationConfig,
    pub env: EnvConfig,
    /// One agent per trace kind.
    pub agents: Vec<AgentConfig>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Z-score features per environment on its training days.
    #[serde(default = "default_true")]
    pub standardize: bool,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks every field that can be checked without reading data.
    pub fn validate(&self) -> Result<()> {
        let sep = &self.separation;
        if sep.n_envs == 0 || sep.minutes_per_day == 0 || sep.train_days == 0 {
            return Err(Error::config("separation", "n_envs, train_days and minutes_per_day must be positive"));
        }
        if sep.days_per_env < sep.train_days + 2 {
            return Err(Error::config(
                "separation.days_per_env",
                "must leave one validation and at least one test day after the training days",
            ));
        }
        self.env.validate()?;
        if sep.minutes_per_day < self.env.lookback + 2 {
            return Err(Error::config(
                "separation.minutes_per_day",
                "a day must hold at least lookback + 2 bars",
            ));
        }
        if self.agents.is_empty() {
            return Err(Error::config("agents", "at least one agent is required"));
        }
        let mut kinds = BTreeSet::new();
        for (i, a) in self.agents.iter().enumerate() {
            a.validate()
                .map_err(|e| Error::config(format!("agents[{i}]"), e.to_string()))?;
            if !kinds.insert(a.trace.kind) {
                return Err(Error::config(
                    format!("agents[{i}].trace.kind"),
                    format!("`{}` appears more than once", a.trace.kind),
                ));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        let expected = sep.n_envs * sep.days_per_env * sep.minutes_per_day;
        match &self.data {
            DataSource::Synth(spec) if spec.length != expected => Err(Error::config(
                "data.synth.length",
                format!("separation needs exactly {expected} bars, got {}", spec.length),
            )),
            DataSource::Csv { n_features: 0, .. } => Err(Error::config("data.csv.n_features", "must be at least 1")),
            _ => Ok(()),
        }
    }

    pub fn expected_len(&self) -> usize {
        let s = &self.separation;
        s.n_envs * s.days_per_env * s.minutes_per_day
    }

    pub fn agent(&self, kind: TraceKind) -> Option<&AgentConfig> {
        self.agents.iter().find(|a| a.trace.kind == kind)
    }
}

pub fn load_data(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Csv { path, n_features } => ingest_csv(
            path,
            CsvSchema {
                n_features: *n_features,
            },
        ),
        DataSource::Synth(spec) => synthesize_market(spec),
    }
}

/// Loads the data and returns one (dataset, split) pair per environment,
/// standardized on that environment's training days when configured.
pub fn prepare_environments(cfg: &RunConfig) -> Result<Vec<(Dataset, EnvironmentSplit)>> {
    let data = load_data(&cfg.data)?;
    let splits = separate_environments(data.len(), cfg.separation).map_err(|e| match e {
        Error::LengthMismatch { expected, actual } => Error::config(
            "data",
            format!("separation needs exactly {expected} bars, the data has {actual}"),
        ),
        other => other,
    })?;
    splits
        .into_iter()
        .map(|split| {
            let ds = if cfg.standardize {
                standardize(&data, split.train.clone())?
            } else {
                data.clone()
            };
            Ok((ds, split))
        })
        .collect()
}

/// `100·ln(p_T / p_0)` on the mid-prices of `range`.
pub fn market_return_pct(data: &Dataset, range: std::ops::Range<usize>) -> f64 {
    let bars = &data.bars()[range];
    100.0 * (bars[bars.len() - 1].mid() / bars[0].mid()).ln()
}

pub fn run_stem(env_id: usize, kind: TraceKind, seed: u64) -> String {
    format!("env{env_id}_{kind}_seed{seed}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub env_id: usize,
    pub trace_kind: TraceKind,
    pub seed: u64,
    pub metrics_file: String,
    pub checkpoint_file: String,
    pub final_val_return_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub splits: Vec<EnvironmentSplit>,
    pub runs: Vec<RunRecord>,
    pub market: Vec<MarketRow>,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_fresh_dir(out: &Path) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(out) {
        if entries.next().is_some() {
            return Err(Error::config(
                "output_dir",
                format!("{} already exists and is not empty", out.display()),
            ));
        }
    }
    Ok(())
}

/// Trains every (environment × trace kind × seed) combination independently
/// and writes the run directory. Nothing is written unless data loading and
/// every run succeed.
pub fn cli_train(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    ensure_fresh_dir(out)?;
    let envs = prepare_environments(cfg)?;

    let jobs: Vec<(usize, &AgentConfig, u64)> = (0..envs.len())
        .flat_map(|e| cfg.agents.iter().flat_map(move |a| cfg.seeds.iter().map(move |&s| (e, a, s))))
        .collect();
    let results: Vec<(Agent, TrainingMetrics)> = jobs
        .par_iter()
        .map(|&(e, agent_cfg, seed)| {
            let (data, split) = &envs[e];
            let agent_cfg = AgentConfig {
                seed,
                ..agent_cfg.clone()
            };
            train(data, split, cfg.env, &agent_cfg)
        })
        .collect::<Result<_>>()?;

    let market: Vec<MarketRow> = envs
        .iter()
        .map(|(data, split)| MarketRow {
            env_id: split.env_id,
            validation_return_pct: market_return_pct(data, split.validation.clone()),
            test_return_pct: market_return_pct(data, split.test.clone()),
        })
        .collect();

    create_dir(&out.join("metrics"))?;
    create_dir(&out.join("checkpoints"))?;
    let mut runs = Vec::with_capacity(jobs.len());
    for (&(e, agent_cfg, seed), (agent, metrics)) in jobs.iter().zip(&results) {
        let stem = run_stem(envs[e].1.env_id, agent_cfg.trace.kind, seed);
        let metrics_file = format!("metrics/{stem}.csv");
        let checkpoint_file = format!("checkpoints/{stem}.json");
        metrics.write_csv(&out.join(&metrics_file))?;
        save_checkpoint(agent, &out.join(&checkpoint_file))?;
        runs.push(RunRecord {
            env_id: envs[e].1.env_id,
            trace_kind: agent_cfg.trace.kind,
            seed,
            metrics_file,
            checkpoint_file,
            final_val_return_pct: metrics.final_validation_return(),
        });
    }
    report::write_market_csv(&out.join("market.csv"), &market)?;
    let manifest = Manifest {
        config: cfg.clone(),
        splits: envs.iter().map(|(_, s)| s.clone()).collect(),
        runs,
        market,
    };
    write_file(&out.join("config.json"), &cfg.to_json()?)?;
    write_file(&out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(run_dir: &Path) -> Result<Manifest> {
    let path = run_dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub env_id: usize,
    pub trace_kind: TraceKind,
    pub seed: u64,
    pub test_return_pct: f64,
}

/// Reloads every checkpoint of a run directory, plays one deterministic
/// episode on its environment's test days and writes per-step traces plus
/// `eval.csv`.
pub fn cli_eval(run_dir: &Path) -> Result<Vec<EvalRow>> {
    let manifest = read_manifest(run_dir)?;
    let cfg = &manifest.config;
    let envs = prepare_environments(cfg)?;
    let mut rows = Vec::with_capacity(manifest.runs.len());
    let mut outcomes = Vec::with_capacity(manifest.runs.len());
    for run in &manifest.runs {
        let (data, split) = envs
            .iter()
            .find(|(_, s)| s.env_id == run.env_id)
            .ok_or_else(|| Error::Checkpoint(format!("manifest names unknown env {}", run.env_id)))?;
        let agent_cfg = cfg
            .agent(run.trace_kind)
            .ok_or_else(|| Error::Checkpoint(format!("manifest names unconfigured kind {}", run.trace_kind)))?;
        let mut agent = Agent::new(
            AgentConfig {
                seed: run.seed,
                ..agent_cfg.clone()
            },
            cfg.env,
            data.n_features(),
        )?;
        load_checkpoint(&mut agent, &run_dir.join(&run.checkpoint_file))?;
        let outcome = agent.evaluate(data, split.test.clone())?;
        rows.push(EvalRow {
            env_id: run.env_id,
            trace_kind: run.trace_kind,
            seed: run.seed,
            test_return_pct: outcome.return_pct()?,
        });
        outcomes.push((run_stem(run.env_id, run.trace_kind, run.seed), outcome));
    }
    create_dir(&run_dir.join("traces"))?;
    for (stem, outcome) in &outcomes {
        outcome.write_trace_csv(&run_dir.join("traces").join(format!("{stem}.csv")))?;
    }
    let mut text = String::from("env_id,trace_kind,seed,test_return_pct\n");
    for r in &rows {
        text.push_str(&format!("{},{},{},{}\n", r.env_id, r.trace_kind, r.seed, r.test_return_pct));
    }
    write_file(&run_dir.join("eval.csv"), &text)?;
    Ok(rows)
}

/// Shared smoke-scale settings: small networks and one gradient step per
/// environment step.
pub fn smoke_agent(kind: TraceKind) -> AgentConfig {
    use crate::agent::NetworkConfig;
    use crate::traces::TraceSpec;
    AgentConfig {
        trace: TraceSpec {
            kind,
            lambda: 0.9,
            n: 3,
            gamma: 0.9,
            alpha_ent: 0.1,
        },
        lr_actor: 1e-3,
        lr_critic: 1e-3,
        tau: 0.01,
        batch: 16,
        grad_steps_per_env_step: 1,
        policy_delay: 2,
        episodes: 30,
        validate_every: 5,
        seed: 0,
        network: NetworkConfig {
            lstm_hidden: 16,
            head_hidden: vec![32, 32],
        },
        replay_capacity: 100_000,
        warmup: 200,
        reward_scale: 100.0,
    }
}
