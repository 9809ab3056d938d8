//! Minute-bar market data: CSV ingestion, z-score standardization,
//! environment slicing and synthetic market generators.
//!
//! The CSV layout is `timestamp,bid,ask,f0,...,f{F-1}` with one bar per line,
//! timestamps in epoch minutes on a gap-free one-minute grid.

use std::fs::File;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One minute snapshot of the trade book plus its engineered features.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketBar {
    pub timestamp: i64,
    pub bid: f64,
    pub ask: f64,
    pub features: Vec<f64>,
}

impl MarketBar {
    pub fn mid(&self) -> f64 {
        0.5 * (self.bid + self.ask)
    }
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    pub std: f64,
}

/// An immutable, validated sequence of bars.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    bars: Vec<MarketBar>,
    feature_stats: Option<Vec<FeatureStats>>,
}

impl Dataset {
    /// Validates every bar invariant. `line_offset` maps bar index to the
    /// line number reported in errors (2 for a CSV with a header).
    fn validated(bars: Vec<MarketBar>, line_offset: usize) -> Result<Self> {
        if bars.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        let n_features = bars[0].features.len();
        for (i, bar) in bars.iter().enumerate() {
            let line = i + line_offset;
            if bar.features.len() != n_features {
                return Err(Error::Parse {
                    line,
                    msg: format!(
                        "expected {} features, found {}",
                        n_features,
                        bar.features.len()
                    ),
                });
            }
            if !bar.bid.is_finite()
                || !bar.ask.is_finite()
                || bar.features.iter().any(|f| !f.is_finite())
            {
                return Err(Error::Invariant {
                    line,
                    msg: "non-finite value".into(),
                });
            }
            if bar.bid <= 0.0 || bar.ask <= 0.0 {
                return Err(Error::Invariant {
                    line,
                    msg: format!("non-positive price (bid={}, ask={})", bar.bid, bar.ask),
                });
            }
            if bar.bid > bar.ask {
                return Err(Error::Invariant {
                    line,
                    msg: format!("bid {} exceeds ask {}", bar.bid, bar.ask),
                });
            }
            if i > 0 {
                let prev = bars[i - 1].timestamp;
                if bar.timestamp <= prev {
                    return Err(Error::Ordering {
                        line,
                        msg: format!("timestamp {} not after {}", bar.timestamp, prev),
                    });
                }
                if bar.timestamp != prev + 1 {
                    return Err(Error::Invariant {
                        line,
                        msg: format!("gap in minute grid between {} and {}", prev, bar.timestamp),
                    });
                }
            }
        }
        Ok(Dataset {
            bars,
            feature_stats: None,
        })
    }

    pub fn from_bars(bars: Vec<MarketBar>) -> Result<Self> {
        Self::validated(bars, 0)
    }

    pub fn bars(&self) -> &[MarketBar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.bars[0].features.len()
    }

    pub fn feature_stats(&self) -> Option<&[FeatureStats]> {
        self.feature_stats.as_deref()
    }

    /// Writes the dataset in the canonical CSV layout.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_csv_string().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("timestamp,bid,ask");
        for j in 0..self.n_features() {
            out.push_str(&format!(",f{j}"));
        }
        out.push('\n');
        for bar in &self.bars {
            out.push_str(&format!("{},{},{}", bar.timestamp, bar.bid, bar.ask));
            for f in &bar.features {
                out.push_str(&format!(",{f}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Expected CSV columns beyond `timestamp,bid,ask`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsvSchema {
    pub n_features: usize,
}

impl CsvSchema {
    pub fn header(&self) -> Vec<String> {
        let mut cols = vec!["timestamp".to_string(), "bid".into(), "ask".into()];
        cols.extend((0..self.n_features).map(|j| format!("f{j}")));
        cols
    }
}

/// Reads a minute-bar CSV file. Line numbers in errors are 1-based and count
/// the header line.
pub fn ingest_csv(path: &Path, schema: CsvSchema) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, schema)
}

pub fn ingest_reader<R: std::io::Read>(reader: R, schema: CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let expected = schema.header();
    if header.len() != expected.len() || header.iter().zip(&expected).any(|(a, b)| a.trim() != b) {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "header mismatch: expected `{}`, found `{}`",
                expected.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut bars = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = i + 2;
        if record.len() != expected.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", expected.len(), record.len()),
            });
        }
        let parse_f64 = |idx: usize| -> Result<f64> {
            record[idx].trim().parse::<f64>().map_err(|e| Error::Parse {
                line,
                msg: format!("column `{}`: {e}", expected[idx]),
            })
        };
        let timestamp = record[0].trim().parse::<i64>().map_err(|e| Error::Parse {
            line,
            msg: format!("column `timestamp`: {e}"),
        })?;
        let bid = parse_f64(1)?;
        let ask = parse_f64(2)?;
        let features = (3..expected.len())
            .map(parse_f64)
            .collect::<Result<Vec<_>>>()?;
        bars.push(MarketBar {
            timestamp,
            bid,
            ask,
            features,
        });
    }
    Dataset::validated(bars, 2)
}

/// Replaces each feature column by its z-score, with mean and population
/// standard deviation fitted on `fit_range` only. Zero-variance columns map
/// to zero.
pub fn standardize(data: &Dataset, fit_range: Range<usize>) -> Result<Dataset> {
    if fit_range.is_empty() || fit_range.end > data.len() {
        return Err(Error::InvalidArgument(format!(
            "fit range {:?} is empty or outside dataset of length {}",
            fit_range,
            data.len()
        )));
    }
    let n = fit_range.len() as f64;
    let fit = &data.bars[fit_range];
    let stats: Vec<FeatureStats> = (0..data.n_features())
        .map(|j| {
            let mean = fit.iter().map(|b| b.features[j]).sum::<f64>() / n;
            let var = fit
                .iter()
                .map(|b| (b.features[j] - mean).powi(2))
                .sum::<f64>()
                / n;
            FeatureStats {
                mean,
                std: var.sqrt(),
            }
        })
        .collect();

    let bars = data
        .bars
        .iter()
        .map(|bar| MarketBar {
            features: bar
                .features
                .iter()
                .zip(&stats)
                .map(|(&x, s)| if s.std > 0.0 { (x - s.mean) / s.std } else { 0.0 })
                .collect(),
            ..bar.clone()
        })
        .collect();
    Ok(Dataset {
        bars,
        feature_stats: Some(stats),
    })
}

/// Index ranges of one near-stationary environment slice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentSplit {
    pub env_id: usize,
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparationConfig {
    pub n_envs: usize,
    pub days_per_env: usize,
    pub train_days: usize,
    pub minutes_per_day: usize,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        SeparationConfig {
            n_envs: 4,
            days_per_env: 5,
            train_days: 3,
            minutes_per_day: 1440,
        }
    }
}

/// Cuts `len` bars into `n_envs` consecutive slices. Within each slice the
/// first `train_days` days train, the next day validates and the remaining
/// days test.
pub fn separate_environments(len: usize, cfg: SeparationConfig) -> Result<Vec<EnvironmentSplit>> {
    if cfg.n_envs == 0 || cfg.minutes_per_day == 0 || cfg.train_days == 0 {
        return Err(Error::InvalidArgument(
            "n_envs, train_days and minutes_per_day must be positive".into(),
        ));
    }
    if cfg.days_per_env < cfg.train_days + 2 {
        return Err(Error::InvalidArgument(format!(
            "days_per_env={} leaves no room for one validation and one test day after {} train days",
            cfg.days_per_env, cfg.train_days
        )));
    }
    let per_env = cfg.days_per_env * cfg.minutes_per_day;
    let expected = cfg.n_envs * per_env;
    if len != expected {
        return Err(Error::LengthMismatch {
            expected,
            actual: len,
        });
    }
    let day = cfg.minutes_per_day;
    Ok((0..cfg.n_envs)
        .map(|env_id| {
            let start = env_id * per_env;
            let train_end = start + cfg.train_days * day;
            let val_end = train_end + day;
            EnvironmentSplit {
                env_id,
                train: start..train_end,
                validation: train_end..val_end,
                test: val_end..start + per_env,
            }
        })
        .collect())
}

/// Price process of a synthetic market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthKind {
    Flat {
        price: f64,
    },
    RandomWalk {
        start: f64,
        sigma: f64,
        half_spread: f64,
    },
    Sinusoid {
        base: f64,
        amplitude: f64,
        period: f64,
        half_spread: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Serialized as `process` so the spec stays strict about unknown keys.
    #[serde(rename = "process")]
    pub kind: SynthKind,
    pub length: usize,
    pub seed: u64,
    #[serde(default)]
    pub start_timestamp: i64,
}

/// Number of features emitted by [`synthesize_market`].
pub const SYNTH_FEATURES: usize = 4;
const ROLLING_WINDOW: usize = 30;

/// Generates a deterministic synthetic market.
///
/// Features per bar, computed from the mid-price history with the first mid
/// standing in for missing pre-history:
/// `f0` one-minute log return, `f1` five-minute log return, `f2` log of mid
/// over its 30-minute rolling mean, `f3` 30-minute rolling std of one-minute
/// log returns.
pub fn synthesize_market(spec: &SynthSpec) -> Result<Dataset> {
    if spec.length < 2 {
        return Err(Error::InvalidArgument("synthetic length must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mids, half_spread): (Vec<f64>, f64) = match spec.kind {
        SynthKind::Flat { price } => (vec![price; spec.length], 0.0),
        SynthKind::RandomWalk {
            start,
            sigma,
            half_spread,
        } => {
            if sigma < 0.0 {
                return Err(Error::InvalidArgument("sigma must be non-negative".into()));
            }
            let mut mids = Vec::with_capacity(spec.length);
            let mut m = start;
            for _ in 0..spec.length {
                mids.push(m);
                let z: f64 = StandardNormal.sample(&mut rng);
                m *= (sigma * z).exp();
            }
            (mids, half_spread)
        }
        SynthKind::Sinusoid {
            base,
            amplitude,
            period,
            half_spread,
        } => {
            if amplitude <= 0.0 || period <= 0.0 {
                return Err(Error::InvalidArgument(
                    "sinusoid amplitude and period must be positive".into(),
                ));
            }
            let mids = (0..spec.length)
                .map(|t| base + amplitude * (std::f64::consts::TAU * t as f64 / period).sin())
                .collect();
            (mids, half_spread)
        }
    };
    if half_spread < 0.0 {
        return Err(Error::InvalidArgument("half_spread must be non-negative".into()));
    }
    if let Some(min) = mids.iter().cloned().reduce(f64::min) {
        if !(min - half_spread > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "synthetic prices reach {} which is not positive",
                min - half_spread
            )));
        }
    }

    let features = rolling_features(&mids);
    let bars = mids
        .iter()
        .zip(features)
        .enumerate()
        .map(|(t, (&m, features))| MarketBar {
            timestamp: spec.start_timestamp + t as i64,
            bid: m - half_spread,
            ask: m + half_spread,
            features,
        })
        .collect();
    Dataset::from_bars(bars)
}

fn rolling_features(mids: &[f64]) -> Vec<Vec<f64>> {
    let at = |t: isize| mids[t.max(0) as usize];
    let ret1: Vec<f64> = (0..mids.len() as isize)
        .map(|t| (at(t) / at(t - 1)).ln())
        .collect();
    (0..mids.len() as isize)
        .map(|t| {
            let w = ROLLING_WINDOW as isize;
            let window = (t - w + 1)..=t;
            let mean = window.clone().map(at).sum::<f64>() / w as f64;
            let rets: Vec<f64> = window.map(|u| ret1[u.max(0) as usize]).collect();
            let rmean = rets.iter().sum::<f64>() / w as f64;
            let rstd = (rets.iter().map(|r| (r - rmean).powi(2)).sum::<f64>() / w as f64).sqrt();
            vec![
                ret1[t as usize],
                (at(t) / at(t - 5)).ln(),
                (at(t) / mean).ln(),
                rstd,
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bar(ts: i64, bid: f64, ask: f64, features: Vec<f64>) -> MarketBar {
        MarketBar {
            timestamp: ts,
            bid,
            ask,
            features,
        }
    }

    #[test]
    fn ingests_well_formed_fixture() {
        let csv = "timestamp,bid,ask,f0,f1\n10,99.5,100.5,0.1,1\n11,99.0,100.0,0.2,2\n12,98.5,99.5,0.3,3\n";
        let ds = ingest_reader(csv.as_bytes(), CsvSchema { n_features: 2 }).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.bars()[1].features, vec![0.2, 2.0]);
    }

    #[test]
    fn crossed_book_names_the_row() {
        let csv = "timestamp,bid,ask,f0\n1,99,100,0\n2,101,100,0\n";
        match ingest_reader(csv.as_bytes(), CsvSchema { n_features: 1 }) {
            Err(Error::Invariant { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = "timestamp,bid,ask,f0\n1,99,100,0\n2,abc,100,0\n";
        match ingest_reader(csv.as_bytes(), CsvSchema { n_features: 1 }) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let short = "timestamp,bid,ask,f0\n1,99,100\n";
        assert!(matches!(
            ingest_reader(short.as_bytes(), CsvSchema { n_features: 1 }),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn non_monotone_and_gapped_timestamps() {
        let back = "timestamp,bid,ask,f0\n5,99,100,0\n4,99,100,0\n";
        assert!(matches!(
            ingest_reader(back.as_bytes(), CsvSchema { n_features: 1 }),
            Err(Error::Ordering { line: 3, .. })
        ));
        let gap = "timestamp,bid,ask,f0\n5,99,100,0\n7,99,100,0\n";
        assert!(matches!(
            ingest_reader(gap.as_bytes(), CsvSchema { n_features: 1 }),
            Err(Error::Invariant { line: 3, .. })
        ));
    }

    #[test]
    fn header_mismatch_is_rejected() {
        let csv = "timestamp,bid,ask,x\n1,99,100,0\n";
        assert!(matches!(
            ingest_reader(csv.as_bytes(), CsvSchema { n_features: 1 }),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn standardize_small_column() {
        let bars = (0..3)
            .map(|i| bar(i, 1.0, 1.0, vec![i as f64 + 1.0, 5.0]))
            .collect();
        let ds = Dataset::from_bars(bars).unwrap();
        let z = standardize(&ds, 0..3).unwrap();
        // population std of [1,2,3] is sqrt(2/3); z = ±1/sqrt(2/3) = ±1.224744871
        let expect = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (b, e) in z.bars().iter().zip(expect) {
            assert!((b.features[0] - e).abs() < 1e-12);
            assert_eq!(b.features[1], 0.0);
        }
        let stats = z.feature_stats().unwrap();
        assert_eq!(stats[1].std, 0.0);
    }

    #[test]
    fn standardize_uses_fit_range_only() {
        let bars = (0..4)
            .map(|i| bar(i, 1.0, 1.0, vec![[0.0, 2.0, 100.0, -7.0][i as usize]]))
            .collect();
        let ds = Dataset::from_bars(bars).unwrap();
        let z = standardize(&ds, 0..2).unwrap();
        assert_eq!(z.bars()[2].features[0], 99.0);
        assert!(standardize(&ds, 2..2).is_err());
        assert!(standardize(&ds, 0..5).is_err());
    }

    #[test]
    fn four_env_protocol_split_lengths() {
        let cfg = SeparationConfig::default();
        let splits = separate_environments(20 * 1440, cfg).unwrap();
        assert_eq!(splits.len(), 4);
        for (i, s) in splits.iter().enumerate() {
            assert_eq!(s.env_id, i);
            assert_eq!(s.train.len(), 4320);
            assert_eq!(s.validation.len(), 1440);
            assert_eq!(s.test.len(), 1440);
        }
        assert!(matches!(
            separate_environments(19 * 1440, cfg),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn flat_market_has_constant_prices() {
        let spec = SynthSpec {
            kind: SynthKind::Flat { price: 50.0 },
            length: 10,
            seed: 1,
            start_timestamp: 0,
        };
        let ds = synthesize_market(&spec).unwrap();
        assert!(ds.bars().iter().all(|b| b.bid == 50.0 && b.ask == 50.0));
        assert!(ds.bars().iter().all(|b| b.features.iter().all(|&f| f == 0.0)));
    }

    #[test]
    fn sinusoid_range_is_twice_amplitude() {
        let spec = SynthSpec {
            kind: SynthKind::Sinusoid {
                base: 100.0,
                amplitude: 1.0,
                period: 120.0,
                half_spread: 0.0,
            },
            length: 240,
            seed: 0,
            start_timestamp: 0,
        };
        let ds = synthesize_market(&spec).unwrap();
        let mids: Vec<f64> = ds.bars().iter().map(MarketBar::mid).collect();
        let max = mids.iter().cloned().fold(f64::MIN, f64::max);
        let min = mids.iter().cloned().fold(f64::MAX, f64::min);
        // t = 30 and t = 90 hit the peaks exactly on a 120-minute period
        assert!((max - min - 2.0).abs() < 1e-9);
    }

    #[test]
    fn synth_rejects_non_positive_prices() {
        let spec = SynthSpec {
            kind: SynthKind::Sinusoid {
                base: 1.0,
                amplitude: 2.0,
                period: 10.0,
                half_spread: 0.0,
            },
            length: 20,
            seed: 0,
            start_timestamp: 0,
        };
        assert!(synthesize_market(&spec).is_err());
        let flat = SynthSpec {
            kind: SynthKind::Flat { price: 0.0 },
            ..spec
        };
        assert!(synthesize_market(&flat).is_err());
    }

    #[test]
    fn csv_text_round_trips() {
        let spec = SynthSpec {
            kind: SynthKind::RandomWalk {
                start: 100.0,
                sigma: 0.001,
                half_spread: 0.01,
            },
            length: 50,
            seed: 3,
            start_timestamp: 1000,
        };
        let ds = synthesize_market(&spec).unwrap();
        let text = ds.to_csv_string();
        let back = ingest_reader(text.as_bytes(), CsvSchema { n_features: SYNTH_FEATURES }).unwrap();
        assert_eq!(back, ds);
    }
}
