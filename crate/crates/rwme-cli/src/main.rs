//! `rwme`: reports on random walks in Markovian environments.
//!
//! Every subcommand prints one JSON report to stdout. The envelope carries
//! the tool version, the model digest, every seed and guard in force, and
//! the parameters that determine the payload, so two runs with the same
//! inputs produce byte-identical output except for the `wall_clock_ms`
//! line. `--out` additionally writes the report to a file; with
//! `--format csv` the file gets the report's tabular data instead (samples,
//! lattice points, lag norms, per-direction detail), while the JSON still
//! goes to stdout.
//!
//! Exit codes: 0 when the run passed (or the command has no pass/fail
//! meaning), 1 when a statistical verdict or cross-check failed, 2 for
//! usage, configuration, and guard errors.
//!
//! Flags can also be set through `RWME_`-prefixed environment variables
//! (`RWME_MODEL`, `RWME_N`, `RWME_SEED`, ...); explicit flags win.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};

use rwme_core::limits::{self, Degeneracy, DiffusionReport, DEFAULT_GK_TOL, DEFAULT_J_MAX};
use rwme_core::model::{ChainAnalysis, ModelSpec};
use rwme_core::pathlaw::{PathLaw, ENUMERATION_GUARD};
use rwme_core::rng::{derive_rng, purpose};
use rwme_core::sim::{
    run_annealed, run_quenched_lockstep, SampleOptions, WalkSample, LOCKSTEP_SITE_GUARD,
    QUENCHED_CELL_GUARD,
};
use rwme_core::stats::{
    default_directions, fit_mixing_rate, test_annealed_clt, test_quenched_clt, CltOptions,
    MixingMode, StatsError, DEFAULT_ALPHA, DEFAULT_DIRECTION_SEED, MIXING_PREFIX_GUARD,
};
use rwme_core::transfer::{
    Operator, RPFAnalysis, TruncatedPastFunction, CYLINDER_TABLE_GUARD, MAX_FIXED_POINT_ITERATIONS,
    WEIGHT_TABLE_GUARD,
};

/// Auto depth: start here, go up in steps of two.
const AUTO_DEPTH_START: usize = 4;

/// Auto depth accepts once drift and Var² both move less than this between
/// successive depths. Deliberately looser than the fixed-point tolerance:
/// truncation error decays geometrically in the depth, so demanding more
/// than about 1e-6 would push every model to the table-size cap for no
/// visible change in the reported numbers.
const AUTO_DEPTH_TOL: f64 = 1e-6;

/// Auto depth never lets the cylinder table pass this many words.
const AUTO_DEPTH_CAP: usize = CYLINDER_TABLE_GUARD;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    if let Some(output) = cli.command.output_args() {
        if output.format == Format::Csv && output.out.is_none() {
            eprintln!("error: --format csv needs --out for the table");
            return ExitCode::from(2);
        }
    }
    let started = Instant::now();
    match run(cli.command) {
        Ok(report) => match report.emit(started) {
            Ok(pass) => match pass {
                Some(false) => ExitCode::from(1),
                _ => ExitCode::SUCCESS,
            },
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[derive(Parser)]
#[command(
    name = "rwme",
    version,
    about = "Drift, diffusion, and limit-theorem reports for random walks in Markovian environments",
    propagate_version = true
)]
struct Cli {
    /// Size of the rayon thread pool (sampling only; results do not depend
    /// on it).
    #[arg(long, global = true, env = "RWME_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stationary distribution, spectral gap, and one-step drift of a model.
    AnalyzeChain {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Exact law of S_n by path enumeration (small n).
    Oracle {
        #[command(flatten)]
        model: ModelArg,
        /// Walk length.
        #[arg(long, env = "RWME_N")]
        n: usize,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Monte Carlo walks: annealed replicas, or one quenched environment
    /// when --env-seed is given.
    Simulate {
        #[command(flatten)]
        model: ModelArg,
        /// Walk length.
        #[arg(long, env = "RWME_N")]
        n: usize,
        /// Independent-environment replicas (annealed mode).
        #[arg(long, default_value_t = 10_000, env = "RWME_REPLICAS")]
        replicas: u64,
        /// Walkers sharing the environment (quenched mode).
        #[arg(long, default_value_t = 1_000, env = "RWME_WALKERS")]
        walkers: u64,
        /// Master seed of the walk randomness.
        #[arg(long, default_value_t = 0, env = "RWME_SEED")]
        seed: u64,
        /// Freeze one environment with this seed and run `--walkers` in it.
        #[arg(long, env = "RWME_ENV_SEED")]
        env_seed: Option<u64>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Ruelle fixed point: stationary word measure, contraction rate γ̂, and
    /// the drift at the chosen depth.
    Transfer {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        depth: DepthArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Drift and Var² from the Green-Kubo sum with its tail bound.
    GreenKubo {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        depth: DepthArgs,
        /// Largest covariance lag in the sum.
        #[arg(long, default_value_t = DEFAULT_J_MAX, env = "RWME_JMAX")]
        jmax: usize,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// KS verdict on (S_n - n·bv)/√n over independent environments.
    AnnealedClt {
        #[command(flatten)]
        model: ModelArg,
        /// Walk length.
        #[arg(long, default_value_t = 10_000, env = "RWME_N")]
        n: usize,
        /// Independent replicas.
        #[arg(long, default_value_t = 10_000, env = "RWME_REPLICAS")]
        replicas: u64,
        /// Master seed of the walk randomness.
        #[arg(long, default_value_t = 0, env = "RWME_SEED")]
        seed: u64,
        /// Rejection level per test.
        #[arg(long, default_value_t = DEFAULT_ALPHA, env = "RWME_ALPHA")]
        alpha: f64,
        #[command(flatten)]
        depth: DepthArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Per-environment KS tests with annealed centering; gates on the pooled
    /// rejection fraction and p-value uniformity.
    QuenchedClt {
        #[command(flatten)]
        model: ModelArg,
        /// Walk length.
        #[arg(long, default_value_t = 10_000, env = "RWME_N")]
        n: usize,
        /// Frozen environments.
        #[arg(long, default_value_t = 50, env = "RWME_ENVIRONMENTS")]
        environments: usize,
        /// Walkers per environment.
        #[arg(long, default_value_t = 2_000, env = "RWME_WALKERS")]
        walkers: u64,
        /// Master seed of the walker randomness.
        #[arg(long, default_value_t = 0, env = "RWME_SEED")]
        seed: u64,
        /// Master seed of the environment randomness.
        #[arg(long, default_value_t = 0, env = "RWME_ENV_SEED")]
        env_seed: u64,
        /// Rejection level per (environment, direction) test.
        #[arg(long, default_value_t = DEFAULT_ALPHA, env = "RWME_ALPHA")]
        alpha: f64,
        #[command(flatten)]
        depth: DepthArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Affine-hull test of the supported jumps: positive-definite Var² or a
    /// certificate with the degenerate directions.
    Degeneracy {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Empirical loss-of-memory rate of a state indicator, fitted over
    /// conditioning gaps and reported next to λ and γ̂.
    Mixing {
        #[command(flatten)]
        model: ModelArg,
        /// Largest conditioning gap.
        #[arg(long, default_value_t = 8, env = "RWME_JMAX")]
        jmax: usize,
        #[command(flatten)]
        depth: DepthArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Merge prior JSON reports and cross-check them against each other;
    /// exits nonzero iff any check fails.
    Report {
        /// Report files produced by the other subcommands.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        output: OutputArgs,
    },
}

impl Command {
    fn output_args(&self) -> Option<&OutputArgs> {
        match self {
            Command::AnalyzeChain { output, .. }
            | Command::Oracle { output, .. }
            | Command::Simulate { output, .. }
            | Command::Transfer { output, .. }
            | Command::GreenKubo { output, .. }
            | Command::AnnealedClt { output, .. }
            | Command::QuenchedClt { output, .. }
            | Command::Degeneracy { output, .. }
            | Command::Mixing { output, .. }
            | Command::Report { output, .. } => Some(output),
        }
    }
}

#[derive(Args)]
struct ModelArg {
    /// Model specification (JSON file).
    #[arg(long, env = "RWME_MODEL")]
    model: PathBuf,
}

#[derive(Args)]
struct OutputArgs {
    /// Also write the report (or its CSV table) to this file.
    #[arg(long, env = "RWME_OUT")]
    out: Option<PathBuf>,
    /// What --out receives.
    #[arg(long, value_enum, default_value_t = Format::Json, env = "RWME_FORMAT")]
    format: Format,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct DepthArgs {
    /// Operator depth, or `auto` to deepen from 4 in steps of 2 until drift
    /// and Var² stop moving (cap: 1e7 words).
    #[arg(long, default_value_t = DepthArg::Auto, env = "RWME_DEPTH")]
    depth: DepthArg,
    /// Fixed-point residual tolerance.
    #[arg(long, default_value_t = 1e-13, env = "RWME_TOL")]
    tol: f64,
}

#[derive(Copy, Clone)]
enum DepthArg {
    Auto,
    Fixed(usize),
}

impl FromStr for DepthArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(DepthArg::Auto);
        }
        match s.parse::<usize>() {
            Ok(d) if d >= 1 => Ok(DepthArg::Fixed(d)),
            _ => Err(format!("expected a positive integer or `auto`, got `{s}`")),
        }
    }
}

impl fmt::Display for DepthArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DepthArg::Auto => write!(f, "auto"),
            DepthArg::Fixed(d) => write!(f, "{d}"),
        }
    }
}

/// Everything a finished subcommand hands back for emission.
struct Report {
    kind: &'static str,
    model: Option<String>,
    model_digest: Option<String>,
    seeds: BTreeMap<&'static str, u64>,
    params: BTreeMap<&'static str, Value>,
    pass: Option<bool>,
    payload: Value,
    csv: String,
    out: Option<PathBuf>,
    format: Format,
}

/// The envelope serialized around every payload. Field order is fixed by
/// this declaration; `wall_clock_ms` is the only line that varies between
/// identical runs.
#[derive(Serialize)]
struct Envelope<'a> {
    tool: &'static str,
    version: &'static str,
    kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: &'a Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model_digest: &'a Option<String>,
    seeds: &'a BTreeMap<&'static str, u64>,
    params: &'a BTreeMap<&'static str, Value>,
    guards: BTreeMap<&'static str, Value>,
    wall_clock_ms: u128,
    #[serde(skip_serializing_if = "Option::is_none")]
    pass: &'a Option<bool>,
    payload: &'a Value,
}

impl Report {
    fn emit(self, started: Instant) -> Result<Option<bool>, String> {
        let envelope = Envelope {
            tool: "rwme",
            version: env!("CARGO_PKG_VERSION"),
            kind: self.kind,
            model: &self.model,
            model_digest: &self.model_digest,
            seeds: &self.seeds,
            params: &self.params,
            guards: guard_settings(),
            wall_clock_ms: started.elapsed().as_millis(),
            pass: &self.pass,
            payload: &self.payload,
        };
        let text = serde_json::to_string_pretty(&envelope).expect("report serializes");
        {
            use std::io::Write;
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            if let Err(e) = writeln!(lock, "{text}") {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(format!("stdout: {e}"));
                }
            }
        }
        if let Some(path) = &self.out {
            let body = match self.format {
                Format::Json => {
                    let mut t = text;
                    t.push('\n');
                    t
                }
                Format::Csv => self.csv,
            };
            std::fs::write(path, body)
                .map_err(|e| format!("writing {}: {e}", path.display()))?;
        }
        Ok(self.pass)
    }
}

fn guard_settings() -> BTreeMap<&'static str, Value> {
    BTreeMap::from([
        ("enumeration_paths", json!(ENUMERATION_GUARD)),
        ("weight_table_entries", json!(WEIGHT_TABLE_GUARD)),
        ("cylinder_table_entries", json!(CYLINDER_TABLE_GUARD)),
        ("fixed_point_iterations", json!(MAX_FIXED_POINT_ITERATIONS)),
        ("quenched_cells", json!(QUENCHED_CELL_GUARD)),
        ("lockstep_sites", json!(LOCKSTEP_SITE_GUARD)),
        ("mixing_prefixes", json!(MIXING_PREFIX_GUARD)),
    ])
}

fn run(command: Command) -> Result<Report, String> {
    match command {
        Command::AnalyzeChain { model, output } => analyze_chain(&model, output),
        Command::Oracle { model, n, output } => oracle(&model, n, output),
        Command::Simulate {
            model,
            n,
            replicas,
            walkers,
            seed,
            env_seed,
            output,
        } => simulate(&model, n, replicas, walkers, seed, env_seed, output),
        Command::Transfer {
            model,
            depth,
            output,
        } => transfer(&model, &depth, output),
        Command::GreenKubo {
            model,
            depth,
            jmax,
            output,
        } => green_kubo(&model, &depth, jmax, output),
        Command::AnnealedClt {
            model,
            n,
            replicas,
            seed,
            alpha,
            depth,
            output,
        } => annealed_clt(&model, n, replicas, seed, alpha, &depth, output),
        Command::QuenchedClt {
            model,
            n,
            environments,
            walkers,
            seed,
            env_seed,
            alpha,
            depth,
            output,
        } => quenched_clt(
            &model,
            n,
            environments,
            walkers,
            seed,
            env_seed,
            alpha,
            &depth,
            output,
        ),
        Command::Degeneracy { model, output } => degeneracy(&model, output),
        Command::Mixing {
            model,
            jmax,
            depth,
            output,
        } => mixing(&model, jmax, &depth, output),
        Command::Report { inputs, output } => merge_reports(&inputs, output),
    }
}

fn load_chain(arg: &ModelArg) -> Result<(Arc<ChainAnalysis>, String), String> {
    let text = std::fs::read_to_string(&arg.model)
        .map_err(|e| format!("reading {}: {e}", arg.model.display()))?;
    let model = ModelSpec::from_json_str(&text).map_err(|e| format!("model: {e}"))?;
    let digest = model.digest();
    let chain = ChainAnalysis::new(Arc::new(model)).map_err(|e| format!("model: {e}"))?;
    Ok((Arc::new(chain), digest))
}

fn model_path(arg: &ModelArg) -> String {
    arg.model.display().to_string()
}

/// Operator pipeline at one depth: fixed point plus the Green-Kubo report.
struct Pipeline {
    rpf: RPFAnalysis,
    report: DiffusionReport,
}

fn pipeline_at(
    law: &Arc<PathLaw>,
    depth: usize,
    tol: f64,
    jmax: usize,
) -> Result<Pipeline, String> {
    let op = Operator::new(law.clone(), depth).map_err(|e| e.to_string())?;
    let rpf = op.rpf_fixed_point(tol).map_err(|e| e.to_string())?;
    let report =
        limits::green_kubo(&op, &rpf, jmax, DEFAULT_GK_TOL).map_err(|e| e.to_string())?;
    Ok(Pipeline { rpf, report })
}

/// Resolve `--depth`: a fixed depth is used as given; `auto` deepens until
/// drift and Var² both move less than `AUTO_DEPTH_TOL` between successive
/// depths, stopping early at the word cap.
fn resolve_pipeline(
    law: &Arc<PathLaw>,
    depth: DepthArg,
    tol: f64,
    jmax: usize,
) -> Result<(Pipeline, bool), String> {
    match depth {
        DepthArg::Fixed(d) => Ok((pipeline_at(law, d, tol, jmax)?, false)),
        DepthArg::Auto => {
            let b = law.alphabet().len();
            let fits = |d: usize| (b as u128).checked_pow(d as u32)
                .is_some_and(|words| words <= AUTO_DEPTH_CAP as u128);
            let mut d = AUTO_DEPTH_START;
            while d > 1 && !fits(d) {
                d -= 1;
            }
            if !fits(d) {
                return Err(format!(
                    "alphabet of {b} symbols exceeds the {AUTO_DEPTH_CAP}-word table cap even at depth 1"
                ));
            }
            let mut current = pipeline_at(law, d, tol, jmax)?;
            loop {
                let next = d + 2;
                if !fits(next) {
                    return Ok((current, true));
                }
                let candidate = pipeline_at(law, next, tol, jmax)?;
                let drift_move = current
                    .report
                    .drift
                    .iter()
                    .zip(&candidate.report.drift)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0_f64, f64::max);
                let var2_move = current
                    .report
                    .var2
                    .iter()
                    .zip(&candidate.report.var2)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0_f64, f64::max);
                let settled = drift_move < AUTO_DEPTH_TOL && var2_move < AUTO_DEPTH_TOL;
                d = next;
                current = candidate;
                if settled {
                    return Ok((current, true));
                }
            }
        }
    }
}

fn depth_params(pipeline: &Pipeline, auto: bool, tol: f64) -> [(&'static str, Value); 3] {
    [
        ("depth", json!(pipeline.report.depth)),
        ("depth_auto", json!(auto)),
        ("tol", json!(tol)),
    ]
}

fn csv_row(fields: &[String]) -> String {
    let mut line = fields.join(",");
    line.push('\n');
    line
}

fn coord_headers(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|c| format!("{prefix}{c}")).collect()
}

fn analyze_chain(arg: &ModelArg, output: OutputArgs) -> Result<Report, String> {
    let (chain, digest) = load_chain(arg)?;
    let model = chain.model();
    let d = model.dimension();
    let mut one_step_drift = vec![0.0; d];
    for (z, q_row) in model.jump_distributions().iter().enumerate() {
        for (j, &q) in q_row.iter().enumerate() {
            for c in 0..d {
                one_step_drift[c] += chain.pi()[z] * q * model.jumps()[j][c] as f64;
            }
        }
    }
    let payload = json!({
        "dimension": d,
        "states": model.num_states(),
        "alphabet": model.alphabet(),
        "jumps": model.jumps(),
        "lambda": chain.lambda(),
        "pi": chain.pi(),
        "pi_cutoff": chain.pi_cutoff(),
        "one_step_drift": one_step_drift,
        "max_jump_norm": model.max_jump_norm(),
    });
    let mut csv = csv_row(&["state".into(), "label".into(), "pi".into()]);
    for (z, label) in model.alphabet().iter().enumerate() {
        csv.push_str(&csv_row(&[
            z.to_string(),
            label.clone(),
            chain.pi()[z].to_string(),
        ]));
    }
    Ok(Report {
        kind: "analyze-chain",
        model: Some(model_path(arg)),
        model_digest: Some(digest),
        seeds: BTreeMap::new(),
        params: BTreeMap::new(),
        pass: None,
        payload,
        csv,
        out: output.out,
        format: output.format,
    })
}

fn oracle(arg: &ModelArg, n: usize, output: OutputArgs) -> Result<Report, String> {
    if n == 0 {
        return Err("--n must be at least 1".into());
    }
    let (chain, digest) = load_chain(arg)?;
    let d = chain.model().dimension();
    let law = PathLaw::new(chain);
    let walk = law.enumerate_walk_law(n).map_err(|e| e.to_string())?;

    // E[S_n]/n carries an O(1/n) transient while the environment seen from
    // the particle relaxes, so the drift estimate is the last increment
    // E[S_n] - E[S_{n-1}], which converges geometrically instead.
    let drift_estimate = if n >= 2 {
        let prev = law.enumerate_walk_law(n - 1).map_err(|e| e.to_string())?;
        Some(
            walk.mean
                .iter()
                .zip(&prev.mean)
                .map(|(a, b)| a - b)
                .collect::<Vec<f64>>(),
        )
    } else {
        None
    };

    let mut headers = coord_headers("x", d);
    headers.push("probability".into());
    let mut csv = csv_row(&headers);
    for (point, prob) in &walk.points {
        let mut fields: Vec<String> = point.iter().map(|c| c.to_string()).collect();
        fields.push(prob.to_string());
        csv.push_str(&csv_row(&fields));
    }

    let mut payload = serde_json::to_value(&walk).expect("walk law serializes");
    payload
        .as_object_mut()
        .expect("walk law is an object")
        .insert("drift_estimate".into(), json!(drift_estimate));
    Ok(Report {
        kind: "oracle",
        model: Some(model_path(arg)),
        model_digest: Some(digest),
        seeds: BTreeMap::new(),
        params: BTreeMap::from([("n", json!(n))]),
        pass: None,
        payload,
        csv,
        out: output.out,
        format: output.format,
    })
}

fn sample_moments(samples: &[WalkSample], n: usize, d: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let count = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for c in 0..d {
            mean[c] += s.final_position[c] as f64;
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut cov = vec![vec![0.0; d]; d];
    if samples.len() >= 2 {
        for s in samples {
            for r in 0..d {
                let dr = s.final_position[r] as f64 - mean[r];
                for c in 0..d {
                    let dc = s.final_position[c] as f64 - mean[c];
                    cov[r][c] += dr * dc;
                }
            }
        }
        for row in &mut cov {
            for v in row.iter_mut() {
                *v /= (count - 1.0) * n as f64;
            }
        }
    }
    (mean, cov)
}

fn samples_csv(samples: &[WalkSample], d: usize) -> String {
    let mut headers = vec!["replica".to_string()];
    headers.extend(coord_headers("x", d));
    let mut csv = csv_row(&headers);
    for s in samples {
        let mut fields = vec![s.replica.to_string()];
        fields.extend(s.final_position.iter().map(|c| c.to_string()));
        csv.push_str(&csv_row(&fields));
    }
    csv
}

fn simulate(
    arg: &ModelArg,
    n: usize,
    replicas: u64,
    walkers: u64,
    seed: u64,
    env_seed: Option<u64>,
    output: OutputArgs,
) -> Result<Report, String> {
    if n == 0 {
        return Err("--n must be at least 1".into());
    }
    let (chain, digest) = load_chain(arg)?;
    let d = chain.model().dimension();
    let mut seeds = BTreeMap::from([("seed", seed)]);
    let mut params = BTreeMap::from([("n", json!(n))]);
    let options = SampleOptions::default();

    let (samples, mode, environment_digest) = match env_seed {
        None => {
            if replicas == 0 {
                return Err("--replicas must be at least 1".into());
            }
            params.insert("replicas", json!(replicas));
            let samples = run_annealed(&chain, n, replicas, seed, options)
                .map_err(|e| e.to_string())?;
            (samples, "annealed", None)
        }
        Some(env) => {
            if walkers == 0 {
                return Err("--walkers must be at least 1".into());
            }
            params.insert("walkers", json!(walkers));
            seeds.insert("env_seed", env);
            let run = run_quenched_lockstep(&chain, n, walkers, env, seed, options)
                .map_err(|e| e.to_string())?;
            (run.samples, "quenched", Some(run.environment_digest))
        }
    };

    let (mean, covariance_over_n) = sample_moments(&samples, n, d);
    let mean_over_n: Vec<f64> = mean.iter().map(|m| m / n as f64).collect();
    let payload = json!({
        "mode": mode,
        "count": samples.len(),
        "environment_digest": environment_digest,
        "empirical_mean": mean,
        "empirical_mean_over_n": mean_over_n,
        "empirical_covariance_over_n": covariance_over_n,
    });
    let csv = samples_csv(&samples, d);
    Ok(Report {
        kind: "simulate",
        model: Some(model_path(arg)),
        model_digest: Some(digest),
        seeds,
        params,
        pass: None,
        payload,
        csv,
        out: output.out,
        format: output.format,
    })
}

fn transfer(arg: &ModelArg, depth: &DepthArgs, output: OutputArgs) -> Result<Report, String> {
    let (chain, digest) = load_chain(arg)?;
    let law = Arc::new(PathLaw::new(chain));
    let (pipeline, auto) = resolve_pipeline(&law, depth.depth, depth.tol, DEFAULT_J_MAX)?;
    let summary = pipeline.rpf.summary(false);
    let drift = limits::drift(&pipeline.rpf);
    let mut csv = csv_row(&["iteration".into(), "residual_ratio".into()]);
    let first = (summary.iterations + 1).saturating_sub(summary.recent_ratios.len());
    for (offset, ratio) in summary.recent_ratios.iter().enumerate() {
        csv.push_str(&csv_row(&[(first + offset).to_string(), ratio.to_string()]));
    }
    let payload = json!({
        "summary": summary,
        "drift": drift,
    });
    Ok(Report {
        kind: "transfer",
        model: Some(model_path(arg)),
        model_digest: Some(digest),
        seeds: BTreeMap::new(),
        params: BTreeMap::from(depth_params(&pipeline, auto, depth.tol)),
        pass: None,
        payload,
        csv,
        out: output.out,
        format: output.format,
    })
}

fn green_kubo(
    arg: &ModelArg,
    depth: &DepthArgs,
    jmax: usize,
    output: OutputArgs,
) -> Result<Report, String> {
    if jmax == 0 {
        return Err("--jmax must be at least 1".into());
    }
    let (chain, digest) = load_chain(arg)?;
    let law = Arc::new(PathLaw::new(chain));
    let (pipeline, auto) = resolve_pipeline(&law, depth.depth, depth.tol, jmax)?;
    let mut params = BTreeMap::from(depth_params(&pipeline, auto, depth.tol));
    params.insert("jmax", json!(jmax));
    params.insert("gk_tol", json!(DEFAULT_GK_TOL));
    let mut csv = csv_row(&["lag".into(), "frobenius_norm".into()]);
    for (lag, norm) in pipeline.report.lag_norms.iter().enumerate() {
        csv.push_str(&csv_row(&[lag.to_string(), norm.to_string()]));
    }
    let payload = serde_json::to_value(&pipeline.report).expect("report serializes");
    Ok(Report {
        kind: "green-kubo",
        model: Some(model_path(arg)),
        model_digest: Some(digest),
        seeds: BTreeMap::new(),
        params,
        pass: None,
        payload,
        csv,
        out: output.out,
        format: output.format,
    })
}

fn clt_seeds(seed: u64) -> BTreeMap<&'static str, u64> {
    BTreeMap::from([
        ("seed", seed),
        ("dither_seed", CltOptions::default().dither_seed),
        ("direction_seed", DEFAULT_DIRECTION_SEED),
    ])
}

fn annealed_clt(
    arg: &ModelArg,
    n: usize,
    replicas: u64,
    seed: u64,
    alpha: f64,
    depth: &DepthArgs,
    output: OutputArgs,
) -> Result<Report, String> {
    if n == 0 {
        return Err("--n must be at least 1".into());
    }
    if !(0.0..1.0).contains(&alpha) || alpha <= 0.0 {
        return Err("--alpha must lie in (0, 1)".into());
    }
    let (chain, digest) = load_chain(arg)?;
    let d = chain.model().dimension();
    let law = Arc::new(PathLaw::new(chain.clone()));
    let (pipeline, auto) = resolve_pipeline(&law, depth.depth, depth.tol, DEFAULT_J_MAX)?;
    let samples = run_annealed(&chain, n, replicas, seed, SampleOptions::default())
        .map_err(|e| e.to_string())?;
    let directions = default_directions(d, DEFAULT_DIRECTION_SEED);
    let options = CltOptions {
        alpha,
        ..CltOptions::default()
    };
    let verdict = test_annealed_clt(
        chain.model(),
        &samples,
        n,
        &pipeline.report,
        &directions,
        &options,
    )
    .map_err(|e| e.to_string())?;

    let mut headers = coord_headers("w", d);
    headers.extend(
        [
            "projected_variance",
            "lattice_spacing",
            "ks_statistic",
            "ks_p_value",
            "standardized_mean",
            "standardized_variance",
        ]
        .map(String::from),
    );
    let mut csv = csv_row(&headers);
    for v in &verdict.directions {
        let mut fields: Vec<String> = v.direction.iter().map(f64::to_string).collect();
        fields.extend([
            v.projected_variance.to_string(),
            v.lattice_spacing.to_string(),
            v.ks.statistic.to_string(),
            v.ks.p_value.to_string(),
            v.standardized_mean.to_string(),
            v.standardized_variance.to_string(),
        ]);
        csv.push_str(&csv_row(&fields));
    }

    let mut params = BTreeMap::from(depth_params(&pipeline, auto, depth.tol));
    params.insert("n", json!(n));
    params.insert("replicas", json!(replicas));
    params.insert("alpha", json!(alpha));
    let pass = verdict.pass;
    Ok(Report {
        kind: "annealed-clt",
        model: Some(model_path(arg)),
        model_digest: Some(digest),
        seeds: clt_seeds(seed),
        params,
        pass: Some(pass),
        payload: serde_json::to_value(&verdict).expect("verdict serializes"),
        csv,
        out: output.out,
        format: output.format,
    })
}

/// Per-environment seeds for the quenched harness. Environment `e` gets the
/// first draw of the `env_master` stream and the second draw of the
/// `seed_master` stream, so equal masters still give independent roles
/// while either can be varied alone.
fn quenched_env_seeds(seed_master: u64, env_master: u64, e: u64) -> (u64, u64) {
    let mut env_stream = derive_rng(env_master, purpose::HARNESS, &[e]);
    let env_seed: u64 = env_stream.gen();
    let mut walker_stream = derive_rng(seed_master, purpose::HARNESS, &[e]);
    let _: u64 = walker_stream.gen();
    let walker_seed: u64 = walker_stream.gen();
    (env_seed, walker_seed)
}

#[allow(clippy::too_many_arguments)]
fn quenched_clt(
    arg: &ModelArg,
    n: usize,
    environments: usize,
    walkers: u64,
    seed: u64,
    env_seed: u64,
    alpha: f64,
    depth: &DepthArgs,
    output: OutputArgs,
) -> Result<Report, String> {
    if n == 0 {
        return Err("--n must be at least 1".into());
    }
    if !(0.0..1.0).contains(&alpha) || alpha <= 0.0 {
        return Err("--alpha must lie in (0, 1)".into());
    }
    let (chain, digest) = load_chain(arg)?;
    let d = chain.model().dimension();
    let law = Arc::new(PathLaw::new(chain.clone()));
    let (pipeline, auto) = resolve_pipeline(&law, depth.depth, depth.tol, DEFAULT_J_MAX)?;

    let mut environment_samples = Vec::with_capacity(environments);
    let mut environment_digests = Vec::with_capacity(environments);
    for env_idx in 0..environments as u64 {
        let (env_seed_e, walker_seed_e) = quenched_env_seeds(seed, env_seed, env_idx);
        let run = run_quenched_lockstep(
            &chain,
            n,
            walkers,
            env_seed_e,
            walker_seed_e,
            SampleOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        environment_digests.push(run.environment_digest);
        environment_samples.push(run.samples);
    }

    let directions = default_directions(d, DEFAULT_DIRECTION_SEED);
    let options = CltOptions {
        alpha,
        ..CltOptions::default()
    };
    let verdict = test_quenched_clt(
        chain.model(),
        &environment_samples,
        n,
        &pipeline.report,
        &directions,
        &options,
    )
    .map_err(|e| e.to_string())?;

    let mut headers = coord_headers("w", d);
    headers.extend(
        [
            "projected_variance",
            "lattice_spacing",
            "rejections",
            "rejection_fraction",
            "uniformity_statistic",
            "uniformity_p_value",
        ]
        .map(String::from),
    );
    let mut csv = csv_row(&headers);
    for v in &verdict.directions {
        let mut fields: Vec<String> = v.direction.iter().map(f64::to_string).collect();
        fields.extend([
            v.projected_variance.to_string(),
            v.lattice_spacing.to_string(),
            v.rejections.to_string(),
            v.rejection_fraction.to_string(),
            v.uniformity.statistic.to_string(),
            v.uniformity.p_value.to_string(),
        ]);
        csv.push_str(&csv_row(&fields));
    }

    let mut params = BTreeMap::from(depth_params(&pipeline, auto, depth.tol));
    params.insert("n", json!(n));
    params.insert("environments", json!(environments));
    params.insert("walkers", json!(walkers));
    params.insert("alpha", json!(alpha));
    let mut seeds = clt_seeds(seed);
    seeds.insert("env_seed", env_seed);
    let pass = verdict.pass;
    let payload = json!({
        "environment_digests": environment_digests,
        "verdict": verdict,
    });
    Ok(Report {
        kind: "quenched-clt",
        model: Some(model_path(arg)),
        model_digest: Some(digest),
        seeds,
        params,
        pass: Some(pass),
        payload,
        csv,
        out: output.out,
        format: output.format,
    })
}

fn degeneracy(arg: &ModelArg, output: OutputArgs) -> Result<Report, String> {
    let (chain, digest) = load_chain(arg)?;
    let outcome = limits::degeneracy_check(chain.model()).map_err(|e| e.to_string())?;
    let d = chain.model().dimension();
    let mut headers = vec!["normal".to_string()];
    headers.extend(coord_headers("w", d));
    let mut csv = csv_row(&headers);
    if let Degeneracy::Certificate(cert) = &outcome {
        for (idx, normal) in cert.normals.iter().enumerate() {
            let mut fields = vec![idx.to_string()];
            fields.extend(normal.iter().map(f64::to_string));
            csv.push_str(&csv_row(&fields));
        }
    }
    Ok(Report {
        kind: "degeneracy",
        model: Some(model_path(arg)),
        model_digest: Some(digest),
        seeds: BTreeMap::new(),
        params: BTreeMap::new(),
        pass: None,
        payload: serde_json::to_value(&outcome).expect("degeneracy serializes"),
        csv,
        out: output.out,
        format: output.format,
    })
}

fn mixing(
    arg: &ModelArg,
    jmax: usize,
    depth: &DepthArgs,
    output: OutputArgs,
) -> Result<Report, String> {
    if jmax == 0 {
        return Err("--jmax must be at least 1".into());
    }
    let (chain, digest) = load_chain(arg)?;
    let law = Arc::new(PathLaw::new(chain));
    let (pipeline, auto) = resolve_pipeline(&law, depth.depth, depth.tol, DEFAULT_J_MAX)?;
    let f = TruncatedPastFunction::state_indicator(&law, 0);
    let gaps: Vec<usize> = (1..=jmax).collect();
    let fit = fit_mixing_rate(&pipeline.rpf, &f, 2, &gaps, MixingMode::Exact);

    let mut csv = csv_row(&["gap".into(), "error".into()]);
    let payload = match fit {
        Ok(fit) => {
            for (gap, err) in fit.gaps.iter().zip(&fit.errors) {
                csv.push_str(&csv_row(&[gap.to_string(), err.to_string()]));
            }
            json!({
                "decay_detected": true,
                "observable": "state 0 indicator",
                "fit": fit,
            })
        }
        Err(StatsError::NoDecayDetected { floor }) => json!({
            "decay_detected": false,
            "observable": "state 0 indicator",
            "noise_floor": floor,
            "lambda": law.chain().lambda(),
            "gamma_hat": pipeline.rpf.gamma_hat(),
        }),
        Err(e) => return Err(e.to_string()),
    };

    let mut params = BTreeMap::from(depth_params(&pipeline, auto, depth.tol));
    params.insert("jmax", json!(jmax));
    params.insert("window", json!(2));
    Ok(Report {
        kind: "mixing",
        model: Some(model_path(arg)),
        model_digest: Some(digest),
        seeds: BTreeMap::new(),
        params,
        pass: None,
        payload,
        csv,
        out: output.out,
        format: output.format,
    })
}

/// One cross-check in the merged report.
#[derive(Serialize)]
struct Check {
    name: String,
    detail: String,
    pass: bool,
}

struct LoadedInput {
    path: String,
    kind: String,
    digest: Option<String>,
    pass: Option<bool>,
    params: Value,
    payload: Value,
}

fn load_input(path: &Path) -> Result<LoadedInput, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("reading {}: {e}", path.display()))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| format!("parsing {}: {e}", path.display()))?;
    let kind = value
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| format!("{}: not an rwme report (no kind)", path.display()))?
        .to_string();
    if value.get("tool").and_then(Value::as_str) != Some("rwme") {
        return Err(format!("{}: not an rwme report", path.display()));
    }
    Ok(LoadedInput {
        path: path.display().to_string(),
        kind,
        digest: value
            .get("model_digest")
            .and_then(Value::as_str)
            .map(str::to_string),
        pass: value.get("pass").and_then(Value::as_bool),
        params: value.get("params").cloned().unwrap_or(Value::Null),
        payload: value.get("payload").cloned().unwrap_or(Value::Null),
    })
}

fn f64_at<'v>(value: &'v Value, keys: &[&str]) -> Option<Vec<f64>> {
    let mut cur = value;
    for k in keys {
        cur = cur.get(k)?;
    }
    cur.as_array()?
        .iter()
        .map(Value::as_f64)
        .collect::<Option<Vec<f64>>>()
}

fn scalar_at(value: &Value, keys: &[&str]) -> Option<f64> {
    let mut cur = value;
    for k in keys {
        cur = cur.get(k)?;
    }
    cur.as_f64()
}

fn flatten_matrix(value: &Value, keys: &[&str]) -> Option<Vec<f64>> {
    let mut cur = value;
    for k in keys {
        cur = cur.get(k)?;
    }
    let rows = cur.as_array()?;
    let mut out = Vec::new();
    for row in rows {
        for v in row.as_array()? {
            out.push(v.as_f64()?);
        }
    }
    Some(out)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0_f64, f64::max)
}

fn frobenius(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Drift from an operator report may sit a truncation error away from the
/// sampled or enumerated mean; cross-checks allow this on top of the
/// statistical tolerance.
const DRIFT_TRUNCATION_ALLOWANCE: f64 = 1e-3;

/// Sampled covariance over n carries an O(1/n) centering bias relative to
/// the asymptotic Var², so the relative band is wider than the CLT gate.
const REPORT_COV_REL_TOL: f64 = 0.1;

fn cross_checks(inputs: &[LoadedInput]) -> Vec<Check> {
    let mut checks = Vec::new();
    for input in inputs {
        if let Some(pass) = input.pass {
            checks.push(Check {
                name: format!("{} verdict", input.kind),
                detail: input.path.clone(),
                pass,
            });
        }
    }

    let oracle = |digest: &Option<String>| {
        inputs
            .iter()
            .find(|i| i.kind == "oracle" && &i.digest == digest)
    };
    let operator = |digest: &Option<String>| {
        inputs
            .iter()
            .find(|i| (i.kind == "green-kubo" || i.kind == "transfer") && &i.digest == digest)
    };

    for input in inputs {
        match input.kind.as_str() {
            "simulate" => {
                let n = match scalar_at(&input.params, &["n"]) {
                    Some(n) if n >= 1.0 => n,
                    _ => continue,
                };
                let count = scalar_at(&input.payload, &["count"]).unwrap_or(1.0);
                if let Some(oracle) = oracle(&input.digest) {
                    if scalar_at(&oracle.params, &["n"]) == Some(n) {
                        let sim_mean = f64_at(&input.payload, &["empirical_mean"]);
                        let mean = f64_at(&oracle.payload, &["mean"]);
                        let cov = flatten_matrix(&oracle.payload, &["covariance"]);
                        if let (Some(sim_mean), Some(mean), Some(cov)) = (sim_mean, mean, cov) {
                            let d = mean.len();
                            let pass = (0..d).all(|c| {
                                let se = (cov[c * d + c] / count).sqrt();
                                (sim_mean[c] - mean[c]).abs() <= 4.0 * se + 1e-9
                            });
                            checks.push(Check {
                                name: "simulate mean vs oracle".into(),
                                detail: format!("{} vs {}", input.path, oracle.path),
                                pass,
                            });
                        }
                    }
                }
                if let Some(op) = operator(&input.digest) {
                    let sim_drift = f64_at(&input.payload, &["empirical_mean_over_n"]);
                    let drift = f64_at(&op.payload, &["drift"]);
                    if let (Some(sim_drift), Some(drift)) = (sim_drift, drift) {
                        let var2 = f64_at(&op.payload, &["var2"]);
                        let d = drift.len();
                        let pass = (0..d).all(|c| {
                            let per_step_var = var2
                                .as_ref()
                                .map(|m| m[c * d + c])
                                .unwrap_or(1.0)
                                .max(0.0);
                            let se = (per_step_var / (n * count)).sqrt();
                            (sim_drift[c] - drift[c]).abs()
                                <= 4.0 * se + DRIFT_TRUNCATION_ALLOWANCE
                        });
                        checks.push(Check {
                            name: "simulate drift vs operator".into(),
                            detail: format!("{} vs {}", input.path, op.path),
                            pass,
                        });
                        if let (Some(var2), Some(sim_cov)) = (
                            var2,
                            flatten_matrix(&input.payload, &["empirical_covariance_over_n"]),
                        ) {
                            if op.kind == "green-kubo" && n >= 1000.0 {
                                let denom = frobenius(&var2).max(f64::MIN_POSITIVE);
                                let rel = max_rel_frobenius(&sim_cov, &var2, denom);
                                checks.push(Check {
                                    name: "simulate covariance vs Var2".into(),
                                    detail: format!(
                                        "{} vs {} (rel {rel:.4})",
                                        input.path, op.path
                                    ),
                                    pass: rel <= REPORT_COV_REL_TOL,
                                });
                            }
                        }
                    }
                }
            }
            "oracle" => {
                if let Some(op) = operator(&input.digest) {
                    let estimate = f64_at(&input.payload, &["drift_estimate"]);
                    let drift = f64_at(&op.payload, &["drift"]);
                    if let (Some(estimate), Some(drift)) = (estimate, drift) {
                        let diff = max_abs_diff(&estimate, &drift);
                        checks.push(Check {
                            name: "oracle drift vs operator".into(),
                            detail: format!("{} vs {} (diff {diff:.2e})", input.path, op.path),
                            pass: diff <= DRIFT_TRUNCATION_ALLOWANCE,
                        });
                    }
                }
            }
            _ => {}
        }
    }
    checks
}

fn max_rel_frobenius(a: &[f64], b: &[f64], denom: f64) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    frobenius(&diff) / denom
}

fn merge_reports(inputs: &[PathBuf], output: OutputArgs) -> Result<Report, String> {
    let loaded: Vec<LoadedInput> = inputs
        .iter()
        .map(|p| load_input(p))
        .collect::<Result<_, _>>()?;
    let checks = cross_checks(&loaded);
    let all_pass = checks.iter().all(|c| c.pass);

    let mut csv = csv_row(&["check".into(), "pass".into(), "detail".into()]);
    for c in &checks {
        csv.push_str(&csv_row(&[
            c.name.clone(),
            c.pass.to_string(),
            c.detail.replace(',', ";"),
        ]));
    }

    let inputs_summary: Vec<Value> = loaded
        .iter()
        .map(|i| {
            json!({
                "path": i.path,
                "kind": i.kind,
                "model_digest": i.digest,
                "pass": i.pass,
            })
        })
        .collect();
    let payload = json!({
        "inputs": inputs_summary,
        "checks": checks,
    });
    Ok(Report {
        kind: "report",
        model: None,
        model_digest: None,
        seeds: BTreeMap::new(),
        params: BTreeMap::from([("inputs", json!(loaded.len()))]),
        pass: Some(all_pass),
        payload,
        csv,
        out: output.out,
        format: output.format,
    })
}
