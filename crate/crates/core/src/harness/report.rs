use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::TrainingMetrics;
use crate::error::{Error, Result};
use crate::traces::TraceKind;

pub const REPORT_HEADER: &str = "trace_kind,env_id,mean_return_pct,std_return_pct,n_seeds";
const MARKET_HEADER: &str = "env_id,validation_return_pct,test_return_pct";

/// Buy-and-hold log returns of one environment, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketRow {
    pub env_id: usize,
    pub validation_return_pct: f64,
    pub test_return_pct: f64,
}

/// One cell of the results table. `trace_kind` is `market` for the
/// buy-and-hold row.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub trace_kind: String,
    pub env_id: usize,
    pub mean_return_pct: f64,
    pub std_return_pct: f64,
    pub n_seeds: usize,
}

/// Mean and sample standard deviation (divisor `n − 1`, zero for one value).
pub fn aggregate(values: &[f64]) -> Option<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some((mean, 0.0));
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Some((mean, (ss / (n - 1) as f64).sqrt()))
}

pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{mean:.4} ± {std:.4}")
}

pub(super) fn write_market_csv(path: &Path, rows: &[MarketRow]) -> Result<()> {
    let mut text = format!("{MARKET_HEADER}\n");
    for r in rows {
        text.push_str(&format!("{},{},{}\n", r.env_id, r.validation_return_pct, r.test_return_pct));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_market_csv(path: &Path) -> Result<Vec<MarketRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    if rdr.headers()?.iter().collect::<Vec<_>>().join(",") != MARKET_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("{} does not have the market header", path.display()),
        });
    }
    rdr.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            let bad = || Error::Parse {
                line: i + 2,
                msg: format!("bad market row in {}", path.display()),
            };
            Ok(MarketRow {
                env_id: rec[0].parse().map_err(|_| bad())?,
                validation_return_pct: rec[1].parse().map_err(|_| bad())?,
                test_return_pct: rec[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn metrics_files(run_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let dir = run_dir.join("metrics");
    let entries = match fs::read_dir(&dir) {
        Ok(e) => e,
        Err(_) => return Ok(Vec::new()),
    };
    let mut files: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

/// Aggregates final validation returns across seeds for every (kind, env)
/// cell, appends the market rows, writes `report.csv` and returns the rows
/// together with a console table.
pub fn cli_report(run_dir: &Path) -> Result<(Vec<ResultRow>, String)> {
    let files = metrics_files(run_dir)?;
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no metrics files under {}",
            run_dir.join("metrics").display()
        )));
    }
    let mut cells: BTreeMap<(TraceKind, usize), Vec<f64>> = BTreeMap::new();
    for path in &files {
        let metrics = TrainingMetrics::read_csv(path)?;
        let first = metrics
            .rows
            .first()
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no rows", path.display())))?;
        let value = metrics
            .final_validation_return()
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no validation record", path.display())))?;
        cells.entry((first.trace_kind, first.env_id)).or_default().push(value);
    }
    let market_path = run_dir.join("market.csv");
    let market = if market_path.exists() {
        read_market_csv(&market_path)?
    } else {
        Vec::new()
    };

    let mut rows: Vec<ResultRow> = cells
        .iter()
        .map(|(&(kind, env_id), values)| {
            let (mean, std) = aggregate(values).expect("cells are non-empty");
            ResultRow {
                trace_kind: kind.as_str().to_string(),
                env_id,
                mean_return_pct: mean,
                std_return_pct: std,
                n_seeds: values.len(),
            }
        })
        .collect();
    rows.extend(market.iter().map(|m| ResultRow {
        trace_kind: "market".into(),
        env_id: m.env_id,
        mean_return_pct: m.validation_return_pct,
        std_return_pct: 0.0,
        n_seeds: 1,
    }));

    let mut csv_text = format!("{REPORT_HEADER}\n");
    for r in &rows {
        csv_text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.trace_kind, r.env_id, r.mean_return_pct, r.std_return_pct, r.n_seeds
        ));
    }
    let path = run_dir.join("report.csv");
    fs::write(&path, csv_text).map_err(|e| Error::io(&path, e))?;
    Ok((rows.clone(), render_table(&rows)))
}

fn render_table(rows: &[ResultRow]) -> String {
    let mut envs: Vec<usize> = rows.iter().map(|r| r.env_id).collect();
    envs.sort_unstable();
    envs.dedup();
    let mut names: Vec<String> = Vec::new();
    for r in rows {
        if !names.contains(&r.trace_kind) {
            names.push(r.trace_kind.clone());
        }
    }
    let label = |name: &str| match TraceKind::parse(name) {
        Some(k) => k.label().to_string(),
        None if name == "market" => "Market".to_string(),
        None => name.to_string(),
    };
    let cell = |name: &str, env: usize| {
        rows.iter()
            .find(|r| r.trace_kind == name && r.env_id == env)
            .map(|r| format_cell(r.mean_return_pct, r.std_return_pct))
            .unwrap_or_else(|| "-".into())
    };
    let mut table: Vec<Vec<String>> = vec![std::iter::once("Algorithm".to_string())
        .chain(envs.iter().map(|e| format!("Env{e}")))
        .collect()];
    for name in &names {
        table.push(
            std::iter::once(label(name))
                .chain(envs.iter().map(|&e| cell(name, e)))
                .collect(),
        );
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::from("final validation return R = log(v_T/v_0) in %, mean ± sample std (n-1) across seeds\n");
    for row in &table {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::EpisodeMetrics;

    #[test]
    fn aggregation_examples() {
        let (m, s) = aggregate(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(format_cell(m, s), "1.0000 ± 0.0000");
        let (m, s) = aggregate(&[0.0, 2.0]).unwrap();
        assert_eq!(format_cell(m, s), "1.0000 ± 1.4142");
        assert_eq!(aggregate(&[3.5]), Some((3.5, 0.0)));
        assert_eq!(aggregate(&[]), None);
        assert_eq!(format_cell(0.0267, 0.1171), "0.0267 ± 0.1171");
    }

    fn write_run(dir: &Path, kind: TraceKind, env_id: usize, seed: u64, val: f64) {
        let m = TrainingMetrics {
            rows: vec![EpisodeMetrics {
                episode: 1,
                steps: 10,
                critic_loss: None,
                actor_loss: None,
                train_return_pct: 0.0,
                val_return_pct: Some(val),
                seed,
                env_id,
                trace_kind: kind,
            }],
        };
        m.write_csv(&dir.join(format!("metrics/env{env_id}_{kind}_seed{seed}.csv"))).unwrap();
    }

    #[test]
    fn report_groups_by_kind_and_env() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("metrics")).unwrap();
        write_run(dir.path(), TraceKind::Retrace, 0, 0, 0.0);
        write_run(dir.path(), TraceKind::Retrace, 0, 1, 2.0);
        write_run(dir.path(), TraceKind::PengQ, 0, 0, 1.0);
        write_market_csv(
            &dir.path().join("market.csv"),
            &[MarketRow {
                env_id: 0,
                validation_return_pct: -0.5,
                test_return_pct: 0.1,
            }],
        )
        .unwrap();
        let (rows, table) = cli_report(dir.path()).unwrap();
        assert_eq!(rows.len(), 3);
        let retrace = rows.iter().find(|r| r.trace_kind == "retrace").unwrap();
        assert_eq!((retrace.n_seeds, retrace.mean_return_pct), (2, 1.0));
        assert!(table.contains("1.0000 ± 1.4142"));
        assert!(table.contains("Market"));
        assert!(table.contains("-0.5000 ± 0.0000"));
        let again = cli_report(dir.path()).unwrap();
        assert_eq!(again.0, rows);
        let text = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert!(text.starts_with(REPORT_HEADER));
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(cli_report(dir.path()).is_err());
    }
}
