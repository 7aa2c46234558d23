//! `ofrl`: collect logged datasets, train agents online and offline, ablate
//! datasets, solve MDPs exactly, and aggregate results.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or format
//! error, 4 a training run diverged (its outputs are still written).

mod run_dir;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ofrl::config::{AgentKind, ConfigError, TrainConfig};
use ofrl::env::{EnvKind, MdpSpec};
use ofrl::metrics::{aggregate, emit_report, format_g6, EnvironmentScores, MetricsError, ScoreTriple};
use ofrl::oracle::{expected_return, induced_mdp, policy_evaluation, value_iteration, PolicySpec, UnvisitedRule};
use ofrl::qfunc::load_checkpoint;
use ofrl::replay::{load_dataset, save_dataset, subsample_trajectories, take_prefix, LoggedDataset};
use ofrl::rng::{stream, Stream};
use ofrl::train::{
    build_env, evaluate_policy, random_policy_score, run_offline_training, run_online, run_online_collection,
    run_online_rem, EvalSettings, RunOutput, TrainError,
};

use run_dir::{environment_id, output_path, run_id, RunDir, RunRecord};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Diverged(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Diverged(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Diverged(m) => write!(f, "diverged: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => CliError::Usage(c.to_string()),
            TrainError::WrongAgent { .. } => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ofrl::Error> for CliError {
    fn from(e: ofrl::Error) -> Self {
        match e {
            ofrl::Error::Config(c) => c.into(),
            ofrl::Error::Train(t) => t.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Parser)]
#[command(name = "ofrl", version, about = "Offline RL on small MDPs: collect, ablate, train, evaluate, report")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.iterations=20`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Seed for every random stream of the run (train.seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct EnvArgs {
    #[arg(long, value_parser = parse_env_kind)]
    env: Option<EnvKind>,
    #[arg(long)]
    size: Option<usize>,
    /// Seed of the environment layout (env.seed).
    #[arg(long)]
    env_seed: Option<u64>,
}

fn parse_env_kind(s: &str) -> Result<EnvKind, String> {
    s.parse().map_err(|e: ofrl::env::EnvError| e.to_string())
}

fn parse_agent(s: &str) -> Result<AgentKind, String> {
    s.parse::<AgentKind>().map_err(|e| e.to_string())
}

#[derive(Clone, Copy, ValueEnum)]
enum Fallback {
    SelfLoop,
    Absorb,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    ValueIteration,
    PolicyEvaluation,
}

#[derive(Subcommand)]
enum Command {
    /// Online DQN that logs every transition to `data.ofrlds`.
    Collect {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an agent on a frozen dataset.
    TrainOffline {
        #[arg(long, value_parser = parse_agent)]
        agent: Option<AgentKind>,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an agent online with a FIFO replay buffer.
    TrainOnline {
        #[arg(long, value_parser = parse_agent)]
        agent: Option<AgentKind>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint with the epsilon-greedy protocol.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Directory for `eval.toml`; printed only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep random whole episodes until a fraction of the transitions is reached.
    Subsample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        fraction: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep the first k transitions, completed to an episode boundary.
    Prefix {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the MDP induced by a dataset; written as JSON.
    InduceMdp {
        #[arg(long = "in")]
        input: PathBuf,
        /// State count; inferred from the observations when omitted.
        #[arg(long)]
        num_states: Option<usize>,
        #[arg(long, value_enum, default_value = "self-loop")]
        fallback: Fallback,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve an MDP exactly and write the Q table as CSV.
    Solve {
        /// MDP JSON from `induce-mdp`; otherwise the configured environment.
        #[arg(long)]
        mdp: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long, value_enum, default_value = "value-iteration")]
        method: Method,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalize and aggregate run directories into CSV reports.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Inputs are read as given, or from under the output root when that is
/// where they were written.
fn input_path(p: &Path) -> PathBuf {
    if p.exists() {
        p.to_path_buf()
    } else {
        output_path(p)
    }
}

fn resolve_config(cfg: &ConfigArgs, env: &EnvArgs) -> Result<TrainConfig, CliError> {
    let mut c = match &cfg.config {
        Some(p) => TrainConfig::load(input_path(p))?,
        None => TrainConfig::default(),
    };
    c.apply_overrides(&cfg.set)?;
    if let Some(k) = env.env {
        c.env.kind = k;
    }
    if let Some(s) = env.size {
        c.env.size = s;
    }
    if let Some(s) = env.env_seed {
        c.env.seed = s;
    }
    if let Some(s) = cfg.seed {
        c.train.seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn read_dataset(p: &Path) -> Result<LoggedDataset, CliError> {
    let p = input_path(p);
    load_dataset(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

fn write_dataset(ds: &LoggedDataset, out: &Path) -> Result<PathBuf, CliError> {
    let p = output_path(out);
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(data_err)?;
    }
    save_dataset(ds, &p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    Ok(p)
}

fn divergence_check(run: &RunOutput) -> Result<(), CliError> {
    match &run.divergence {
        Some(reason) => Err(CliError::Diverged(reason.clone())),
        None => Ok(()),
    }
}

fn summary(dir: &RunDir, run: &RunOutput) {
    println!(
        "{}: {} evaluations, best {}, final {}, {} gradient updates",
        dir.path.display(),
        run.curve.len(),
        run.best_score().map_or("n/a".into(), format_g6),
        run.final_score().map_or("n/a".into(), format_g6),
        run.gradient_updates
    );
}

fn collect(cfg: &ConfigArgs, env: &EnvArgs, out: &Path) -> Result<(), CliError> {
    let mut c = resolve_config(cfg, env)?;
    c.agent.kind = AgentKind::Dqn;
    let mdp = build_env(&c)?;
    let dir = RunDir::create(out)?;
    dir.write_config(&c)?;
    let output = run_online_collection(&c, &mdp)?;
    save_dataset(&output.dataset, dir.path.join("data.ofrlds")).map_err(data_err)?;
    let mut record = RunRecord::new("collect", environment_id(&c), "dqn", c.train.seed, &output.run);
    record.random_score = Some(random_policy_score(&c, &mdp)?.mean_return);
    dir.write_run(&record, &output.run)?;
    dir.finish("collect", cfg.config.as_deref(), &[], vec![c.train.seed])?;
    summary(&dir, &output.run);
    println!(
        "logged {} transitions in {} episodes, average return {}",
        output.dataset.transition_count(),
        output.dataset.episode_count(),
        output.dataset.average_return().map_or("n/a".into(), format_g6)
    );
    divergence_check(&output.run)
}

/// Environment identity `kind:size:seed` from a dataset descriptor.
fn descriptor_env(ds: &LoggedDataset) -> Option<(EnvKind, usize, u64)> {
    let mut parts = ds.meta().environment().split(':');
    let kind = parts.next()?.parse().ok()?;
    let size = parts.next()?.parse().ok()?;
    let seed = parts.next()?.parse().ok()?;
    Some((kind, size, seed))
}

fn train_offline(
    agent: Option<AgentKind>,
    data: &Path,
    cfg: &ConfigArgs,
    env: &EnvArgs,
    out: &Path,
) -> Result<(), CliError> {
    let ds = read_dataset(data)?;
    // The evaluation environment follows the dataset unless flags say otherwise.
    let mut env = env.clone();
    if let Some((kind, size, seed)) = descriptor_env(&ds) {
        env.env.get_or_insert(kind);
        env.size.get_or_insert(size);
        env.env_seed.get_or_insert(seed);
    }
    let mut c = resolve_config(cfg, &env)?;
    if let Some(a) = agent {
        c.agent.kind = a;
    }
    c.validate()?;
    let mdp = build_env(&c)?;
    let dir = RunDir::create(out)?;
    dir.write_config(&c)?;
    let run = run_offline_training(&c, &ds, &mdp)?;
    let record = RunRecord::new("train-offline", environment_id(&c), c.agent.kind.as_str(), c.train.seed, &run);
    dir.write_run(&record, &run)?;
    dir.finish("train-offline", cfg.config.as_deref(), &[data], vec![c.train.seed])?;
    summary(&dir, &run);
    divergence_check(&run)
}

fn train_online(agent: Option<AgentKind>, cfg: &ConfigArgs, env: &EnvArgs, out: &Path) -> Result<(), CliError> {
    let mut c = resolve_config(cfg, env)?;
    if let Some(a) = agent {
        c.agent.kind = a;
    }
    c.validate()?;
    let mdp = build_env(&c)?;
    let dir = RunDir::create(out)?;
    dir.write_config(&c)?;
    let run = match c.agent.kind {
        AgentKind::Rem => run_online_rem(&c, &mdp)?,
        _ => run_online(&c, &mdp, &mut ())?,
    };
    let record = RunRecord::new("train-online", environment_id(&c), c.agent.kind.as_str(), c.train.seed, &run);
    dir.write_run(&record, &run)?;
    dir.finish("train-online", cfg.config.as_deref(), &[], vec![c.train.seed])?;
    summary(&dir, &run);
    divergence_check(&run)
}

fn evaluate(
    checkpoint: &Path,
    cfg: &ConfigArgs,
    env: &EnvArgs,
    episodes: Option<usize>,
    epsilon: Option<f64>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let c = resolve_config(cfg, env)?;
    let q = load_checkpoint(input_path(checkpoint))?;
    let mdp = build_env(&c)?;
    if q.spec().num_states != mdp.num_states() || q.num_actions() != mdp.num_actions() {
        return Err(CliError::Data(format!(
            "checkpoint is for {} states x {} actions, environment has {} x {}",
            q.spec().num_states,
            q.num_actions(),
            mdp.num_states(),
            mdp.num_actions()
        )));
    }
    let mut settings = EvalSettings::from_config(&c);
    if let Some(n) = episodes {
        if n == 0 {
            return Err(CliError::Usage("--episodes must be positive".into()));
        }
        settings.episodes = n;
    }
    if let Some(e) = epsilon {
        if !(0.0..=1.0).contains(&e) {
            return Err(CliError::Usage(format!("--epsilon {e} outside [0, 1]")));
        }
        settings.epsilon = e;
    }
    let r = evaluate_policy(&q, &mdp, &settings, &mut stream(c.train.seed, Stream::Eval(0)));
    let line = format!(
        "mean_return = {}\nstd_return = {}\nepisodes = {}\nepsilon = {}\n",
        format_g6(r.mean_return),
        format_g6(r.std_return),
        r.episodes,
        format_g6(settings.epsilon)
    );
    print!("{line}");
    if let Some(out) = out {
        let dir = RunDir::create(out)?;
        dir.write_config(&c)?;
        dir.write("eval.toml", line)?;
        dir.finish("evaluate", cfg.config.as_deref(), &[checkpoint], vec![c.train.seed])?;
    }
    Ok(())
}

fn induce(input: &Path, num_states: Option<usize>, fallback: Fallback, out: &Path) -> Result<(), CliError> {
    let ds = read_dataset(input)?;
    let rule = match fallback {
        Fallback::SelfLoop => UnvisitedRule::SelfLoop,
        Fallback::Absorb => UnvisitedRule::Absorb,
    };
    let ind = induced_mdp(&ds, num_states, rule).map_err(data_err)?;
    let p = output_path(out);
    let json = serde_json::to_string_pretty(&ind.mdp).map_err(data_err)?;
    fs::write(&p, json).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    let na = ind.mdp.num_actions();
    let visited = ind.visits.iter().filter(|v| **v > 0).count();
    println!(
        "{} states (absorbing state {}), {} actions, {visited} of {} state-action pairs visited",
        ind.mdp.num_states(),
        ind.absorbing_state,
        na,
        ind.absorbing_state * na
    );
    Ok(())
}

fn solve(
    mdp_path: Option<&Path>,
    cfg: &ConfigArgs,
    env: &EnvArgs,
    method: Method,
    tol: f64,
    out: &Path,
) -> Result<(), CliError> {
    let mdp: MdpSpec = match mdp_path {
        Some(p) => {
            let p = input_path(p);
            let text = fs::read_to_string(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            let m: MdpSpec = serde_json::from_str(&text).map_err(data_err)?;
            m.validate().map_err(data_err)?;
            m
        }
        None => build_env(&resolve_config(cfg, env)?)?,
    };
    if !(tol > 0.0) {
        return Err(CliError::Usage(format!("--tol {tol} must be positive")));
    }
    let (q, policy) = match method {
        Method::ValueIteration => {
            let q = value_iteration(&mdp, tol).map_err(data_err)?;
            let pi = q.greedy_policy();
            (q, pi)
        }
        Method::PolicyEvaluation => {
            let pi = PolicySpec::uniform(mdp.num_states(), mdp.num_actions());
            (policy_evaluation(&mdp, &pi, tol).map_err(data_err)?, pi)
        }
    };
    let mut csv = Vec::new();
    q.write_csv(&mut csv).map_err(data_err)?;
    let p = output_path(out);
    fs::write(&p, csv).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    println!(
        "bellman residual {}, expected return from the start distribution {}",
        format_g6(q.bellman_residual()),
        format_g6(expected_return(&mdp, &q, &policy))
    );
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn report(runs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut records = Vec::new();
    for r in runs {
        let dir = input_path(r);
        records.push((run_id(&dir), RunRecord::load(&dir)?));
    }
    // Baselines per environment: best collection score and the random policy.
    let mut baselines: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    // Online runs are reported apart from offline runs of the same agent.
    let mut agents: BTreeMap<(&str, String), Vec<f64>> = BTreeMap::new();
    for (_, r) in &records {
        if r.command == "collect" {
            let b = baselines.entry(&r.environment).or_default();
            b.0.extend(r.best_score);
            b.1.extend(r.random_score);
        } else {
            let label = match r.command.as_str() {
                "train-online" => format!("online-{}", r.agent),
                _ => r.agent.clone(),
            };
            let scores = agents.entry((&r.environment, label)).or_default();
            scores.extend(r.best_score);
        }
    }
    let mut inputs = Vec::new();
    for ((environment, agent), scores) in &agents {
        let Some((dqn, random)) = baselines.get(environment).filter(|(d, r)| !d.is_empty() && !r.is_empty()) else {
            eprintln!("warning: no collection run for {environment}; {agent} skipped");
            continue;
        };
        if scores.is_empty() {
            eprintln!("warning: {agent} on {environment} has no finite score; skipped");
            continue;
        }
        inputs.push(EnvironmentScores {
            environment: environment.to_string(),
            agent: agent.to_string(),
            scores: ScoreTriple::new(mean(scores), mean(dqn), mean(random))?,
            runs: scores.len(),
        });
    }
    let report = aggregate(&inputs)?;
    for e in &report.excluded {
        eprintln!("warning: {e} excluded, DQN and random baselines tie");
    }
    let curves: Vec<_> = records.iter().map(|(id, r)| r.curve(id)).collect();
    let dir = output_path(out);
    emit_report(&report, &curves, &dir)?;
    println!(
        "{} rows, median normalized score {}, {} beat DQN",
        report.rows.len(),
        format_g6(report.median_normalized),
        report.beats_dqn
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Collect { cfg, env, out } => collect(&cfg, &env, &out),
        Command::TrainOffline { agent, data, cfg, env, out } => train_offline(agent, &data, &cfg, &env, &out),
        Command::TrainOnline { agent, cfg, env, out } => train_online(agent, &cfg, &env, &out),
        Command::Evaluate { checkpoint, cfg, env, episodes, epsilon, out } => {
            evaluate(&checkpoint, &cfg, &env, episodes, epsilon, out.as_deref())
        }
        Command::Subsample { input, fraction, seed, out } => {
            let ds = read_dataset(&input)?;
            let sub =
                subsample_trajectories(&ds, fraction, &mut stream(seed, Stream::Sampling)).map_err(|e| match e {
                    ofrl::replay::ReplayError::InvalidFraction(_) => CliError::Usage(e.to_string()),
                    other => data_err(other),
                })?;
            let p = write_dataset(&sub, &out)?;
            println!(
                "{}: {} of {} transitions, {} episodes",
                p.display(),
                sub.transition_count(),
                ds.transition_count(),
                sub.episode_count()
            );
            Ok(())
        }
        Command::Prefix { input, k, out } => {
            let ds = read_dataset(&input)?;
            let pre = take_prefix(&ds, k).map_err(|e| CliError::Usage(e.to_string()))?;
            let p = write_dataset(&pre, &out)?;
            println!("{}: {} transitions, {} episodes", p.display(), pre.transition_count(), pre.episode_count());
            Ok(())
        }
        Command::InduceMdp { input, num_states, fallback, out } => induce(&input, num_states, fallback, &out),
        Command::Solve { mdp, cfg, env, method, tol, out } => solve(mdp.as_deref(), &cfg, &env, method, tol, &out),
        Command::Report { runs, out } => report(&runs, &out),
    }
}

/// Failures are reported on a single stderr line.
fn one_line(msg: &str) -> String {
    msg.split('\n')
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.chars().all(|c| c == '|' || c == '^' || c == ' '))
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let text = e.to_string();
            eprintln!("ofrl: {}", text.lines().next().unwrap_or("usage error").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ofrl: {}", one_line(&e.to_string()));
            ExitCode::from(e.code())
        }
    }
}
