//! Run directories: resolved config, manifest, run record, curve, checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ofrl::config::TrainConfig;
use ofrl::metrics::{write_curves, RunCurve};
use ofrl::qfunc::save_checkpoint;
use ofrl::train::{EvalRecord, RunOutput};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const OUTPUT_ROOT_VAR: &str = "OFRL_OUTPUT_ROOT";

/// Resolves an output path, placing relative paths under `$OFRL_OUTPUT_ROOT`
/// when it is set.
pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if p.is_relative() && !root.is_empty() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// `manifest.toml`. The only file that carries timestamps.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub config_source: Option<String>,
    pub resolved_config: String,
    pub inputs: Vec<String>,
    pub output_dir: String,
    pub seeds: Vec<u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

/// One evaluation point as stored in `run.toml`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub episodes: usize,
    pub gradient_updates: u64,
    pub mean_abs_td_error: f64,
    pub diverged: bool,
}

impl From<&EvalRecord> for CurvePoint {
    fn from(r: &EvalRecord) -> Self {
        CurvePoint {
            iteration: r.iteration,
            mean_return: r.mean_return,
            std_return: r.std_return,
            episodes: r.episodes,
            gradient_updates: r.gradient_updates,
            mean_abs_td_error: r.mean_abs_td_error,
            diverged: r.diverged,
        }
    }
}

impl From<&CurvePoint> for EvalRecord {
    fn from(p: &CurvePoint) -> Self {
        EvalRecord {
            iteration: p.iteration,
            mean_return: p.mean_return,
            std_return: p.std_return,
            episodes: p.episodes,
            gradient_updates: p.gradient_updates,
            mean_abs_td_error: p.mean_abs_td_error,
            diverged: p.diverged,
        }
    }
}

/// `run.toml`: what `report` needs from a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    /// `kind:size:env_seed`.
    pub environment: String,
    pub agent: String,
    pub seed: u64,
    pub best_score: Option<f64>,
    pub final_score: Option<f64>,
    /// Uniform-random policy score; collection runs only.
    pub random_score: Option<f64>,
    pub divergence: Option<String>,
    pub env_steps: u64,
    pub gradient_updates: u64,
    pub curve: Vec<CurvePoint>,
}

impl RunRecord {
    pub fn new(command: &str, environment: String, agent: &str, seed: u64, run: &RunOutput) -> Self {
        RunRecord {
            command: command.into(),
            environment,
            agent: agent.into(),
            seed,
            best_score: run.best_score(),
            final_score: run.final_score(),
            random_score: None,
            divergence: run.divergence.clone(),
            env_steps: run.env_steps,
            gradient_updates: run.gradient_updates,
            curve: run.curve.iter().map(CurvePoint::from).collect(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join("run.toml");
        let text = fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn curve(&self, run_id: &str) -> RunCurve {
        RunCurve {
            run_id: run_id.into(),
            agent: self.agent.clone(),
            seed: self.seed,
            records: self.curve.iter().map(EvalRecord::from).collect(),
        }
    }
}

pub fn environment_id(config: &TrainConfig) -> String {
    format!("{}:{}:{}", config.env.kind, config.env.size, config.env.seed)
}

/// An output directory being filled by one command.
pub struct RunDir {
    pub path: PathBuf,
    started: u64,
}

impl RunDir {
    pub fn create(out: &Path) -> Result<Self, CliError> {
        let path = output_path(out);
        fs::create_dir_all(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok(RunDir { path, started: unix_now() })
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.path.join(name);
        fs::write(&p, bytes).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
    }

    pub fn write_config(&self, config: &TrainConfig) -> Result<(), CliError> {
        self.write("config.toml", config.to_toml_string())
    }

    /// Curve CSV, run record and both checkpoints.
    pub fn write_run(&self, record: &RunRecord, run: &RunOutput) -> Result<(), CliError> {
        let run_id = self.run_id();
        let mut csv = Vec::new();
        write_curves(&[record.curve(&run_id)], &mut csv)?;
        self.write("curve.csv", csv)?;
        self.write("run.toml", toml::to_string(record).map_err(|e| CliError::Data(e.to_string()))?)?;
        for (name, q) in [("final.ckpt", &run.final_network), ("best.ckpt", &run.best_network)] {
            let p = self.path.join(name);
            save_checkpoint(q, &p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        }
        Ok(())
    }

    pub fn run_id(&self) -> String {
        run_id(&self.path)
    }

    pub fn finish(
        &self,
        command: &str,
        config_source: Option<&Path>,
        inputs: &[&Path],
        seeds: Vec<u64>,
    ) -> Result<(), CliError> {
        let m = Manifest {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_source: config_source.map(|p| p.display().to_string()),
            resolved_config: "config.toml".into(),
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            output_dir: self.path.display().to_string(),
            seeds,
            started_unix: self.started,
            finished_unix: unix_now(),
        };
        self.write("manifest.toml", toml::to_string(&m).map_err(|e| CliError::Data(e.to_string()))?)
    }
}

pub fn run_id(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}
