//! Score normalization, aggregation across environments, and CSV reports.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::train::EvalRecord;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("baseline scores are equal ({0}); normalization undefined")]
    DegenerateBaseline(f64),
    #[error("non-finite score")]
    NonFinite,
    #[error("no environment with a usable baseline")]
    Empty,
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for MetricsError {
    fn from(e: std::io::Error) -> Self {
        MetricsError::Io(e.to_string())
    }
}

impl From<csv::Error> for MetricsError {
    fn from(e: csv::Error) -> Self {
        MetricsError::Io(e.to_string())
    }
}

/// Mean evaluation returns of the agent and the two anchors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreTriple {
    pub agent: f64,
    pub dqn: f64,
    pub random: f64,
}

impl ScoreTriple {
    pub fn new(agent: f64, dqn: f64, random: f64) -> Result<Self, MetricsError> {
        if !(agent.is_finite() && dqn.is_finite() && random.is_finite()) {
            return Err(MetricsError::NonFinite);
        }
        Ok(ScoreTriple { agent, dqn, random })
    }
}

/// `(agent − min) / (max − min)` with min and max taken over the DQN and
/// random scores.
pub fn normalized_score(t: &ScoreTriple) -> Result<f64, MetricsError> {
    if !(t.agent.is_finite() && t.dqn.is_finite() && t.random.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    if t.dqn == t.random {
        return Err(MetricsError::DegenerateBaseline(t.dqn));
    }
    let (lo, hi) = (t.dqn.min(t.random), t.dqn.max(t.random));
    Ok((t.agent - lo) / (hi - lo))
}

/// `100 × (normalized − 1)`.
pub fn improvement_pct(normalized: f64) -> f64 {
    100.0 * (normalized - 1.0)
}

/// Median; the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Scores of one agent on one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentScores {
    pub environment: String,
    pub agent: String,
    pub scores: ScoreTriple,
    pub runs: usize,
}

/// One row of the aggregate report.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentRow {
    pub environment: String,
    pub agent: String,
    pub scores: ScoreTriple,
    pub normalized: f64,
    pub improvement_pct: f64,
    pub beats_dqn: bool,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub rows: Vec<EnvironmentRow>,
    /// Environments dropped because the two baselines tie.
    pub excluded: Vec<String>,
    pub median_normalized: f64,
    /// Environments where the agent's raw mean beats the DQN score.
    pub beats_dqn: usize,
}

/// Normalizes every environment, dropping degenerate ones before the median.
pub fn aggregate(inputs: &[EnvironmentScores]) -> Result<AggregateReport, MetricsError> {
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for e in inputs {
        match normalized_score(&e.scores) {
            Ok(n) => rows.push(EnvironmentRow {
                environment: e.environment.clone(),
                agent: e.agent.clone(),
                scores: e.scores,
                normalized: n,
                improvement_pct: improvement_pct(n),
                beats_dqn: e.scores.agent > e.scores.dqn,
                runs: e.runs,
            }),
            Err(MetricsError::DegenerateBaseline(_)) => excluded.push(e.environment.clone()),
            Err(err) => return Err(err),
        }
    }
    let normalized: Vec<f64> = rows.iter().map(|r| r.normalized).collect();
    let median_normalized = median(&normalized).ok_or(MetricsError::Empty)?;
    let beats_dqn = rows.iter().filter(|r| r.beats_dqn).count();
    Ok(AggregateReport { rows, excluded, median_normalized, beats_dqn })
}

/// `%g`-style rendering with 6 significant digits.
pub fn format_g6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.5e}", x);
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim_zeros(mant), sign, exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// A learning curve tagged with its run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunCurve {
    pub run_id: String,
    pub agent: String,
    pub seed: u64,
    pub records: Vec<EvalRecord>,
}

pub const CURVE_COLUMNS: [&str; 9] = [
    "run_id",
    "agent",
    "seed",
    "iteration",
    "gradient_updates",
    "eval_mean_return",
    "eval_std_return",
    "mean_abs_td_error",
    "diverged",
];

pub const AGGREGATE_COLUMNS: [&str; 8] =
    ["environment", "agent", "score_random", "score_dqn", "score_agent", "normalized", "improvement_pct", "beats_dqn"];

/// Writes learning curves as CSV.
pub fn write_curves<W: std::io::Write>(curves: &[RunCurve], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_COLUMNS)?;
    for c in curves {
        for r in &c.records {
            w.write_record([
                c.run_id.clone(),
                c.agent.clone(),
                c.seed.to_string(),
                r.iteration.to_string(),
                r.gradient_updates.to_string(),
                format_g6(r.mean_return),
                format_g6(r.std_return),
                format_g6(r.mean_abs_td_error),
                r.diverged.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate<W: std::io::Write>(report: &AggregateReport, out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(AGGREGATE_COLUMNS)?;
    for r in &report.rows {
        w.write_record([
            r.environment.clone(),
            r.agent.clone(),
            format_g6(r.scores.random),
            format_g6(r.scores.dqn),
            format_g6(r.scores.agent),
            format_g6(r.normalized),
            format_g6(r.improvement_pct),
            r.beats_dqn.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `aggregate.csv` and `curves.csv` under `dir`.
pub fn emit_report(report: &AggregateReport, curves: &[RunCurve], dir: impl AsRef<Path>) -> Result<(), MetricsError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut agg = Vec::new();
    write_aggregate(report, &mut agg)?;
    fs::write(dir.join("aggregate.csv"), agg)?;
    let mut cur = Vec::new();
    write_curves(curves, &mut cur)?;
    fs::write(dir.join("curves.csv"), cur)?;
    Ok(())
}
