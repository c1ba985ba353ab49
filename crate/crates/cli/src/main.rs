//! `sparselink` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use sparselink::factorization::{approx_causal_factorization, band_lower_bound, CausalFactorization};
use sparselink::lifted::{assert_blt, lift, TOL_STRUCTURE};
use sparselink::linalg;
use sparselink::pipeline::{self, SweepOutcome, SweepReport, SynthesisResult};
use sparselink::rankmin::{heuristics, min_achievable_gain, SolverConfig};
use sparselink::sls::response_from_phi_u;
use sparselink::{verify_guarantee, Error, SystemSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Synthesize,
    SweepGamma,
    SweepEpsilon,
    Factorize,
    Verify,
}

/// Low-communication controller synthesis with causal encoder/decoder factorizations.
#[derive(Debug, Parser)]
#[command(name = "sparselink", version)]
struct Args {
    /// System specification JSON file, or `benchmark`.
    #[arg(long, default_value = "benchmark")]
    scenario: String,

    #[arg(long, value_enum, default_value_t = Mode::Synthesize)]
    mode: Mode,

    /// Factorization tolerance.
    #[arg(long, default_value_t = pipeline::DEFAULT_EPSILON)]
    epsilon: f64,

    /// Overrides the scenario's gain bound.
    #[arg(long)]
    gamma: Option<f64>,

    /// Comma-separated gain bounds for `sweep-gamma`.
    #[arg(long, value_delimiter = ',')]
    gamma_list: Vec<f64>,

    /// Comma-separated tolerances for `sweep-epsilon`.
    #[arg(long, value_delimiter = ',')]
    epsilon_list: Vec<f64>,

    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Seed for the simulated disturbances (synthesis itself is deterministic).
    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long)]
    reweight_iters: Option<usize>,

    #[arg(long)]
    delta: Option<f64>,

    #[arg(long)]
    rank_tol: Option<f64>,

    /// Rank heuristic (see `--list-heuristics`).
    #[arg(long)]
    heuristic: Option<String>,

    /// ADMM primal and dual tolerance.
    #[arg(long)]
    admm_tol: Option<f64>,

    #[arg(long)]
    admm_max_iters: Option<usize>,

    /// Matrix JSON for `factorize`: nested rows, or an object with `matrix`,
    /// `block_rows` and `block_cols`.
    #[arg(long)]
    matrix: Option<PathBuf>,

    #[arg(long)]
    block_rows: Option<usize>,

    #[arg(long)]
    block_cols: Option<usize>,

    /// `result.json` for `verify`.
    #[arg(long)]
    result: Option<PathBuf>,

    #[arg(long)]
    list_heuristics: bool,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Io(String),
    Parse(String),
    Core(Error),
    Check(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) | CliError::Parse(_) => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(s) => write!(f, "usage: {s}"),
            CliError::Io(s) => write!(f, "i/o error: {s}"),
            CliError::Parse(s) => write!(f, "parse error: {s}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Check(s) => write!(f, "verification failed: {s}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// CSV writer with the header row already written, so empty tables keep their columns.
fn csv_writer(path: &Path, header: &[&str]) -> CliResult<csv::Writer<fs::File>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    w.write_record(header).map_err(io)?;
    Ok(w)
}

/// Deserializes JSON, reporting the path of the offending key on failure.
fn parse_json<T: serde::de::DeserializeOwned>(text: &str, origin: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            CliError::Parse(format!("{origin}: {}", e.inner()))
        } else {
            CliError::Parse(format!("{origin}: key `{path}`: {}", e.inner()))
        }
    })
}

fn io<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Io(e.to_string())
}

fn load_scenario(args: &Args) -> CliResult<SystemSpec> {
    let spec = if args.scenario == "benchmark" {
        pipeline::benchmark_double_integrator()
    } else {
        let text = read(Path::new(&args.scenario))?;
        parse_json::<SystemSpec>(&text, &args.scenario)?
    };
    match args.gamma {
        Some(g) => Ok(spec.with_gamma(g)?),
        None => Ok(spec),
    }
}

fn solver_config(args: &Args) -> CliResult<SolverConfig> {
    let mut cfg = SolverConfig::default();
    if let Some(v) = args.reweight_iters {
        cfg.reweight_iters = v;
    }
    if let Some(v) = args.delta {
        cfg.delta = v;
    }
    if let Some(v) = args.rank_tol {
        cfg.rank_tol = v;
    }
    if let Some(v) = &args.heuristic {
        cfg.heuristic = v.clone();
    }
    if let Some(v) = args.admm_tol {
        cfg.tol_primal = v;
        cfg.tol_dual = v;
    }
    if let Some(v) = args.admm_max_iters {
        cfg.admm_max_iters = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

#[derive(Serialize)]
struct Reference {
    minimax_transmissions: usize,
    minimax_period: usize,
    reported_transmissions: usize,
}

#[derive(Serialize)]
struct ResultFile<'a> {
    #[serde(flatten)]
    result: &'a SynthesisResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference: Option<Reference>,
}

#[derive(Serialize)]
struct ScheduleRow {
    k: usize,
    t_k: usize,
}

#[derive(Serialize)]
struct SparsityRow {
    row: usize,
    col: usize,
    value: f64,
}

#[derive(Serialize)]
struct MessageRow {
    k: usize,
    t_k: usize,
    m_k: f64,
}

fn write_synthesis_outputs(args: &Args, spec: &SystemSpec, result: &SynthesisResult) -> CliResult<()> {
    let out = &args.out;
    let reference = (args.scenario == "benchmark").then_some(Reference {
        minimax_transmissions: pipeline::MINIMAX_TRANSMISSIONS,
        minimax_period: pipeline::MINIMAX_PERIOD,
        reported_transmissions: pipeline::REFERENCE_TRANSMISSIONS,
    });
    write_json(&out.join("result.json"), &ResultFile { result, reference })?;
    write_json(
        &out.join("phi_u.json"),
        &MatrixFile {
            matrix: result.phi_u.clone(),
            block_rows: spec.n_u(),
            block_cols: spec.n_x(),
        },
    )?;

    let mut w = csv_writer(&out.join("schedule.csv"), &["k", "t_k"])?;
    for (k, &t_k) in result.factorization.schedule.iter().enumerate() {
        w.serialize(ScheduleRow { k: k + 1, t_k }).map_err(io)?;
    }
    w.flush().map_err(io)?;

    let mut w = csv_writer(&out.join("sparsity.csv"), &["row", "col", "value"])?;
    let k = result.controller.k.data();
    for row in 0..k.nrows() {
        for col in 0..k.ncols() {
            if k[(row, col)].abs() > TOL_STRUCTURE {
                w.serialize(SparsityRow {
                    row,
                    col,
                    value: k[(row, col)].abs(),
                })
                .map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)?;

    let (wseq, x0) = pipeline::seeded_disturbance(spec, args.seed);
    let (traj, trace) = pipeline::simulate_encoder_decoder(result, spec, &wseq, &x0)?;
    let mut w = csv_writer(&out.join("messages.csv"), &["k", "t_k", "m_k"])?;
    for m in &trace.messages {
        w.serialize(MessageRow {
            k: m.k,
            t_k: m.t_k,
            m_k: m.m_k,
        })
        .map_err(io)?;
    }
    w.flush().map_err(io)?;

    let mut header = vec!["t".to_string()];
    header.extend((0..spec.n_u()).map(|i| format!("u{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut w = csv_writer(&out.join("inputs.csv"), &header)?;
    for (t, u) in traj.u.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(u.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

fn cmd_synthesize(args: &Args) -> CliResult<()> {
    let spec = load_scenario(args)?;
    let cfg = solver_config(args)?;
    prepare_out(&args.out)?;
    let result = pipeline::synthesize(&spec, args.epsilon, &cfg)?;
    write_synthesis_outputs(args, &spec, &result)?;
    println!("transmissions: {}", result.transmissions);
    println!("transmission times: {}", result.transmission_times);
    println!("numerical rank of phi_u: {}", result.numerical_rank);
    println!("achieved gain: {:.9} (gamma {}, budget {:.9})", result.achieved_gain, result.gamma, result.gamma_eps);
    if args.scenario == "benchmark" {
        println!(
            "reference: minimax periodic baseline uses {} messages (period {})",
            pipeline::MINIMAX_TRANSMISSIONS,
            pipeline::MINIMAX_PERIOD
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct SweepCsvRow {
    gamma: f64,
    epsilon: f64,
    status: &'static str,
    transmissions: Option<usize>,
    transmission_times: Option<usize>,
    achieved_gain: Option<f64>,
    gamma_eps: Option<f64>,
}

fn write_sweep(args: &Args, name: &str, report: &SweepReport) -> CliResult<()> {
    prepare_out(&args.out)?;
    write_json(&args.out.join(format!("{name}.json")), report)?;
    let mut w = csv_writer(
        &args.out.join(format!("{name}.csv")),
        &["gamma", "epsilon", "status", "transmissions", "transmission_times", "achieved_gain", "gamma_eps"],
    )?;
    for row in &report.rows {
        let rec = match &row.outcome {
            SweepOutcome::Feasible {
                transmissions,
                transmission_times,
                achieved_gain,
                gamma_eps,
            } => SweepCsvRow {
                gamma: row.gamma,
                epsilon: row.epsilon,
                status: "feasible",
                transmissions: Some(*transmissions),
                transmission_times: Some(*transmission_times),
                achieved_gain: Some(*achieved_gain),
                gamma_eps: Some(*gamma_eps),
            },
            SweepOutcome::Infeasible { .. } => SweepCsvRow {
                gamma: row.gamma,
                epsilon: row.epsilon,
                status: "infeasible",
                transmissions: None,
                transmission_times: None,
                achieved_gain: None,
                gamma_eps: None,
            },
        };
        w.serialize(rec).map_err(io)?;
    }
    w.flush().map_err(io)?;
    for row in &report.rows {
        match &row.outcome {
            SweepOutcome::Feasible {
                transmissions,
                achieved_gain,
                ..
            } => println!(
                "gamma {:<10} epsilon {:<8e} transmissions {:>3}  gain {:.6}",
                row.gamma, row.epsilon, transmissions, achieved_gain
            ),
            SweepOutcome::Infeasible { reason } => {
                println!("gamma {:<10} epsilon {:<8e} infeasible: {reason}", row.gamma, row.epsilon)
            }
        }
    }
    Ok(())
}

fn cmd_sweep_gamma(args: &Args) -> CliResult<()> {
    if args.gamma_list.is_empty() {
        return Err(CliError::Usage("sweep-gamma requires --gamma-list g1,g2,...".into()));
    }
    let spec = load_scenario(args)?;
    let cfg = solver_config(args)?;
    let min_gain = min_achievable_gain(&lift(&spec), &cfg);
    println!("minimum achievable gain: {min_gain:.6}");
    let report = pipeline::sweep_gamma(&spec, &args.gamma_list, args.epsilon, &cfg)?;
    write_sweep(args, "sweep_gamma", &report)?;
    println!("monotonicity violations: {}", report.monotonicity_violations);
    Ok(())
}

fn cmd_sweep_epsilon(args: &Args) -> CliResult<()> {
    if args.epsilon_list.is_empty() {
        return Err(CliError::Usage("sweep-epsilon requires --epsilon-list e1,e2,...".into()));
    }
    let spec = load_scenario(args)?;
    let cfg = solver_config(args)?;
    let report = pipeline::sweep_epsilon(&spec, &args.epsilon_list, &cfg)?;
    write_sweep(args, "sweep_epsilon", &report)
}

#[derive(Serialize, Deserialize)]
struct MatrixFile {
    #[serde(with = "linalg::serde_matrix")]
    matrix: DMatrix<f64>,
    block_rows: usize,
    block_cols: usize,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MatrixInput {
    Described(MatrixFile),
    Bare(Vec<Vec<f64>>),
}

fn cmd_factorize(args: &Args) -> CliResult<()> {
    let path = args
        .matrix
        .as_ref()
        .ok_or_else(|| CliError::Usage("factorize requires --matrix FILE".into()))?;
    let text = read(path)?;
    let input: MatrixInput = parse_json(&text, &path.display().to_string())?;
    let (m, file_rows, file_cols) = match input {
        MatrixInput::Described(f) => (f.matrix, Some(f.block_rows), Some(f.block_cols)),
        MatrixInput::Bare(rows) => (
            linalg::from_row_major(&rows)
                .ok_or_else(|| CliError::Parse(format!("{}: ragged matrix rows", path.display())))?,
            None,
            None,
        ),
    };
    let block_rows = args.block_rows.or(file_rows).unwrap_or(1);
    let block_cols = args.block_cols.or(file_cols).unwrap_or(1);
    let x = assert_blt(&m, block_rows, block_cols)?;
    let f = approx_causal_factorization(&x, args.epsilon)?;
    prepare_out(&args.out)?;
    write_json(&args.out.join("factorization.json"), &f)?;
    println!("band: {}", f.band);
    println!("band lower bound: {}", band_lower_bound(&m, args.epsilon));
    println!("residual: {:e}", f.residual_norm);
    Ok(())
}

#[derive(Deserialize)]
struct StoredResult {
    spec: SystemSpec,
    #[serde(with = "linalg::serde_matrix")]
    controller: DMatrix<f64>,
    factorization: CausalFactorization,
    response_factorization: Option<CausalFactorization>,
    #[serde(default, deserialize_with = "optional_matrix")]
    phi_u: Option<DMatrix<f64>>,
    transmissions: usize,
    achieved_gain: f64,
    gamma: f64,
}

fn optional_matrix<'de, D: serde::Deserializer<'de>>(de: D) -> Result<Option<DMatrix<f64>>, D::Error> {
    linalg::serde_matrix::deserialize(de).map(Some)
}

#[derive(Serialize)]
struct VerifySummary {
    achieved_gain: f64,
    stored_gain: f64,
    gamma: f64,
    transmissions: usize,
    guarantee: Option<sparselink::VerifyReport>,
}

fn cmd_verify(args: &Args) -> CliResult<()> {
    let path = args
        .result
        .as_ref()
        .ok_or_else(|| CliError::Usage("verify requires --result FILE".into()))?;
    let text = read(path)?;
    let stored: StoredResult = parse_json(&text, &path.display().to_string())?;
    let spec = &stored.spec;
    let k = assert_blt(&stored.controller, spec.n_u(), spec.n_x())?;
    let gain = pipeline::recheck(spec, &k, &stored.factorization)?;
    if stored.transmissions != stored.factorization.band {
        return Err(CliError::Check(format!(
            "transmissions {} differ from the factorization band {}",
            stored.transmissions, stored.factorization.band
        )));
    }
    if (gain - stored.achieved_gain).abs() > 1e-12 * stored.achieved_gain.max(1.0) {
        return Err(CliError::Check(format!(
            "recomputed gain {gain} differs from stored {}",
            stored.achieved_gain
        )));
    }
    if gain > stored.gamma {
        return Err(CliError::Check(format!("gain {gain} exceeds gamma {}", stored.gamma)));
    }
    let guarantee = match (&stored.phi_u, &stored.response_factorization) {
        (Some(phi_u), Some(f)) => {
            let phi_u = assert_blt(phi_u, spec.n_u(), spec.n_x())?;
            let resp = response_from_phi_u(phi_u, &lift(spec))?;
            Some(verify_guarantee(spec, &resp, f)?)
        }
        _ => None,
    };
    let summary = VerifySummary {
        achieved_gain: gain,
        stored_gain: stored.achieved_gain,
        gamma: stored.gamma,
        transmissions: stored.transmissions,
        guarantee,
    };
    println!("{}", serde_json::to_string_pretty(&summary).map_err(io)?);
    println!("verified");
    Ok(())
}

fn run(args: &Args) -> CliResult<()> {
    if args.list_heuristics {
        let reg = heuristics::builtin();
        for name in reg.names() {
            println!("{name}: {}", reg.get(name)?.description());
        }
        return Ok(());
    }
    match args.mode {
        Mode::Synthesize => cmd_synthesize(args),
        Mode::SweepGamma => cmd_sweep_gamma(args),
        Mode::SweepEpsilon => cmd_sweep_epsilon(args),
        Mode::Factorize => cmd_factorize(args),
        Mode::Verify => cmd_verify(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPARSELINK_LOG", "warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
