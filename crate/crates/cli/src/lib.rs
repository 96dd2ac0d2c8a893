//! The `talift` command-line driver.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or input error,
//! 3 completion backend error. Human-readable output goes to stdout;
//! structured results go to `--out` under fixed file names.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use talift_core::cost::{program_cost, render_feedback, CostParams};
use talift_core::eval::{render_report, run_experiment, write_records, Ablation, EvalError, ExperimentConfig, ReportFormat};
use talift_core::isa::{parse_program, render_program, BufferRole};
use talift_core::kernels::{fixture, generate_testcases, verify_text, KernelSpec, TestCase};
use talift_core::llm::{Backend, CacheBackend, GenerationParams, HttpBackend, HttpConfig, LlmError, ReplayBackend, ENV_MODEL};
use talift_core::opt::{optimize_program, OptError, OptimizeMode};
use talift_core::prompt::{build_translation_prompt, PromptError};
use talift_core::repair::{extract_holes, repair, repair_template, RepairError, RepairMode, RepairOutcome, RepairOptions, HOLE_TOKEN};
use talift_core::sim::{Machine, MachineConfig};
use talift_sched::session::DOITGEN;
use talift_sched::{parse_kernel, Session, SessionConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "talift", version, about = "Translate, verify, repair and optimize accelerator programs")]
struct Cli {
    /// Worker threads for verification and completion requests (default: logical CPUs).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Directory for structured results.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a program on one generated test case and print its outputs.
    Simulate {
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check a program against the kernel reference on random test cases.
    Verify {
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of test cases.
        #[arg(long, default_value_t = 20)]
        n: usize,
    },
    /// Build a translation prompt and, with a backend, verify the samples.
    Translate {
        #[arg(long)]
        kernel: String,
        /// Experiment config; its first ablation and generation parameters are used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
        /// Samples to request.
        #[arg(long)]
        n: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an experiment config and report pass@k per ablation.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<u32>>,
        #[arg(long)]
        n: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Repair wrong constants in a candidate program.
    Repair {
        #[command(flatten)]
        target: Target,
        #[arg(long, value_delimiter = ',', default_value = "0,1,3,4,12", allow_negative_numbers = true)]
        constants: Vec<i64>,
        #[arg(long, value_enum, default_value_t = RepairModeArg::Enumerate)]
        mode: RepairModeArg,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of test cases.
        #[arg(long, default_value_t = 20)]
        n: usize,
    },
    /// Reduce the cost of a verified program.
    Optimize {
        #[command(flatten)]
        target: Target,
        #[arg(long, value_enum, default_value_t = OptimizeModeArg::Rules)]
        mode: OptimizeModeArg,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of test cases.
        #[arg(long, default_value_t = 20)]
        n: usize,
    },
    /// Drive a loop-scheduling session on a loop-nest kernel.
    Schedule {
        /// Kernel file; defaults to the built-in doitgen kernel.
        #[arg(long)]
        program: Option<PathBuf>,
        /// Model replies to apply instead of querying a backend, one per line.
        #[arg(long)]
        transcript: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
        /// Rounds to run against the backend.
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct Target {
    #[arg(long, visible_alias = "candidate")]
    program: PathBuf,
    #[arg(long)]
    kernel: String,
}

#[derive(Debug, Args)]
struct BackendArgs {
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Recorded completions for the replay backend.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Response cache for the http backend.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendKind {
    Http,
    Replay,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RepairModeArg {
    Llm,
    Enumerate,
    LlmThenEnumerate,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptimizeModeArg {
    Rules,
    Llm,
    LlmThenRules,
}

enum Status {
    Ok,
    Failed,
}

/// Parses `args` (including the program name) and runs one subcommand.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.unwrap_or(0)).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(Status::Ok) => EXIT_OK,
        Ok(Status::Failed) => EXIT_FAILED,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<LlmError>()) {
                EXIT_BACKEND
            } else {
                EXIT_USAGE
            }
        }
    }
}

fn run(cli: &Cli) -> Result<Status> {
    let out = cli.out.as_deref();
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let jobs = cli.jobs.unwrap_or_else(rayon::current_num_threads);
    match &cli.command {
        Command::Simulate { target, seed } => simulate(target, *seed, out),
        Command::Verify { target, seed, n } => verify(target, *seed, *n, out),
        Command::Translate { kernel, config, backend, n, seed } => {
            translate(kernel, config.as_deref(), &open_backend(backend, jobs)?, *n, *seed, out)
        }
        Command::Evaluate { config, backend, k, n, seed } => {
            let backend = open_backend(backend, jobs)?.context("evaluate needs --backend")?;
            evaluate(config, backend.as_ref(), k.clone(), *n, *seed, out)
        }
        Command::Repair { target, constants, mode, backend, seed, n } => {
            repair_cmd(target, constants, *mode, open_backend(backend, jobs)?.as_deref(), *seed, *n, out)
        }
        Command::Optimize { target, mode, backend, seed, n } => {
            optimize(target, *mode, open_backend(backend, jobs)?.as_deref(), *seed, *n, out)
        }
        Command::Schedule { program, transcript, backend, n, seed } => schedule(
            program.as_deref(),
            transcript.as_deref(),
            open_backend(backend, jobs)?.as_deref(),
            *n,
            *seed,
            out,
        ),
    }
}

fn open_backend(args: &BackendArgs, jobs: usize) -> Result<Option<Box<dyn Backend>>> {
    let Some(kind) = args.backend else {
        if args.fixtures.is_some() || args.cache.is_some() {
            bail!("--fixtures and --cache need --backend");
        }
        return Ok(None);
    };
    Ok(Some(match kind {
        BackendKind::Replay => {
            let dir = args.fixtures.as_ref().context("the replay backend needs --fixtures")?;
            if !dir.is_dir() {
                bail!("fixtures directory {} does not exist", dir.display());
            }
            Box::new(ReplayBackend::new(dir))
        }
        BackendKind::Http => {
            let mut config = HttpConfig::from_env()?;
            config.max_inflight = jobs.max(1);
            let http = HttpBackend::new(config);
            match &args.cache {
                Some(dir) => Box::new(CacheBackend::new(http, dir)),
                None => Box::new(http),
            }
        }
    }))
}

/// Default generation parameters, with the model name taken from the
/// environment when set.
fn generation_params() -> GenerationParams {
    let mut params = GenerationParams::default();
    if let Ok(model) = std::env::var(ENV_MODEL) {
        params.model = model;
    }
    params
}

fn write_text(out: Option<&Path>, name: &str, text: &str) -> Result<()> {
    if let Some(dir) = out {
        let path = dir.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(out: Option<&Path>, name: &str, value: &T) -> Result<()> {
    write_text(out, name, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_target(target: &Target) -> Result<(String, &'static KernelSpec)> {
    let spec = &fixture(&target.kernel)?.spec;
    Ok((read(&target.program)?, spec))
}

fn cases(spec: &KernelSpec, seed: u64, n: usize, cfg: &MachineConfig) -> Result<Vec<TestCase>> {
    if n == 0 {
        bail!("--n must be at least 1");
    }
    Ok(generate_testcases(spec, seed, n, cfg.dim))
}

fn status(ok: bool) -> Status {
    if ok {
        Status::Ok
    } else {
        Status::Failed
    }
}

#[derive(Serialize)]
struct SimulateReport {
    kernel: String,
    seed: u64,
    outputs: Vec<(String, Vec<f32>)>,
    bytes_in: u64,
    bytes_out: u64,
    matches_reference: bool,
}

fn simulate(target: &Target, seed: u64, out: Option<&Path>) -> Result<Status> {
    let cfg = MachineConfig::default();
    let (text, spec) = load_target(target)?;
    let program = match parse_program(&text, &spec.buffer_table(cfg.dim)) {
        Ok(p) => p,
        Err(e) => {
            println!("parse error: {e}");
            return Ok(Status::Failed);
        }
    };
    let case = &cases(spec, seed, 1, &cfg)?[0];
    let mut machine = Machine::with_buffers(cfg, &program.buffers, &case.inputs)?;
    if let Err(e) = machine.execute(&program) {
        println!("execution failed: {e}");
        return Ok(Status::Failed);
    }
    let mut outputs = Vec::new();
    let mut matches = true;
    for decl in program.buffers.values().filter(|d| d.role == BufferRole::Output) {
        let m = machine.read_output(&decl.name)?;
        println!("{}:", decl.name);
        for r in 0..m.rows {
            let row: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
            println!("  {}", row.join(" "));
        }
        matches &= m.data == case.expected.data;
        outputs.push((decl.name.clone(), m.data));
    }
    println!("bytes in: {}, bytes out: {}", machine.bytes_in, machine.bytes_out);
    println!("matches reference: {}", if matches { "yes" } else { "no" });
    let report = SimulateReport {
        kernel: spec.name.clone(),
        seed,
        outputs,
        bytes_in: machine.bytes_in,
        bytes_out: machine.bytes_out,
        matches_reference: matches,
    };
    write_json(out, "simulate.json", &report)?;
    Ok(Status::Ok)
}

fn verify(target: &Target, seed: u64, n: usize, out: Option<&Path>) -> Result<Status> {
    let cfg = MachineConfig::default();
    let (text, spec) = load_target(target)?;
    let verdict = verify_text(&text, spec, &cases(spec, seed, n, &cfg)?, cfg, false);
    println!("{}: {}", spec.name, verdict.label());
    if let Some(failure) = &verdict.failure {
        println!("{}", serde_json::to_string(failure)?);
    }
    write_json(out, "verify.json", &verdict)?;
    Ok(status(verdict.passed))
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = read(path)?;
    let config: ExperimentConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(config)
}

/// Lifts a backend failure out of a wrapping library error so that it maps
/// to the backend exit code.
fn eval_err(e: EvalError) -> anyhow::Error {
    match e {
        EvalError::Backend(e) => e.into(),
        e => e.into(),
    }
}

fn prompt_err(e: PromptError) -> anyhow::Error {
    e.into()
}

#[derive(Serialize)]
struct TranslateSample {
    index: usize,
    verdict: String,
    code: Option<String>,
}

fn translate(
    kernel: &str,
    config: Option<&Path>,
    backend: &Option<Box<dyn Backend>>,
    n: Option<u32>,
    seed: u64,
    out: Option<&Path>,
) -> Result<Status> {
    let spec = &fixture(kernel)?.spec;
    let (ablation, mut params, cfg) = match config {
        Some(path) => {
            let c = load_config(path)?;
            let ablation = c.ablations.first().cloned().context("config has no ablations")?;
            (ablation, GenerationParams { n_samples: c.n, ..c.params }, c.machine)
        }
        None => (Ablation::new("one-shot"), generation_params(), MachineConfig::default()),
    };
    if let Some(n) = n {
        params.n_samples = n;
    }
    let prompt = build_translation_prompt(&ablation.prompt_spec(spec)).map_err(prompt_err)?;
    write_text(out, "prompt.txt", &prompt.text())?;
    let Some(backend) = backend else {
        println!("{}", prompt.text());
        println!("fingerprint: {}", prompt.fingerprint);
        return Ok(Status::Ok);
    };
    let completions = backend.complete(&prompt, &params)?;
    let cases = cases(spec, seed, 20, &cfg)?;
    let samples: Vec<TranslateSample> = completions
        .iter()
        .enumerate()
        .map(|(index, c)| {
            let code = talift_core::eval::extract_code(&c.text);
            let verdict = match &code {
                Some(code) => verify_text(code, spec, &cases, cfg, true).label(),
                None => "no_code".into(),
            };
            TranslateSample { index, verdict, code }
        })
        .collect();
    let passed = samples.iter().filter(|s| s.verdict == "pass").count();
    for s in &samples {
        println!("sample {:>3}: {}", s.index, s.verdict);
    }
    println!("{}: {passed}/{} samples pass", spec.name, samples.len());
    write_json(out, "candidates.json", &samples)?;
    Ok(status(passed > 0))
}

fn evaluate(
    path: &Path,
    backend: &dyn Backend,
    k: Option<Vec<u32>>,
    n: Option<u32>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<Status> {
    let mut config = load_config(path)?;
    if let Some(k) = k {
        config.k = k;
    }
    if let Some(n) = n {
        config.n = n;
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let (report, records) = run_experiment(&config, backend).map_err(eval_err)?;
    let table = render_report(&report, ReportFormat::Table);
    print!("{table}");
    write_text(out, "report.txt", &table)?;
    write_text(out, "report.csv", &render_report(&report, ReportFormat::Csv))?;
    write_json(out, "report.json", &report)?;
    if let Some(dir) = out {
        write_records(&dir.join("candidates"), &records)?;
    }
    Ok(Status::Ok)
}

fn repair_err(e: RepairError) -> anyhow::Error {
    match e {
        RepairError::Backend(e) => e.into(),
        e => e.into(),
    }
}

fn repair_cmd(
    target: &Target,
    constants: &[i64],
    mode: RepairModeArg,
    backend: Option<&dyn Backend>,
    seed: u64,
    n: usize,
    out: Option<&Path>,
) -> Result<Status> {
    let cfg = MachineConfig::default();
    let (text, spec) = load_target(target)?;
    let cases = cases(spec, seed, n, &cfg)?;
    let opts = RepairOptions::default();
    let result = if text.contains(HOLE_TOKEN) {
        let template = extract_holes(&text, None).map_err(repair_err)?;
        repair_template(&template, spec, &cases, constants, &opts, cfg).map_err(repair_err)?
    } else {
        let backend = backend.context("marking holes needs --backend (or mark them with <CONST> in the input)")?;
        let mode = match mode {
            RepairModeArg::Llm => RepairMode::Llm,
            RepairModeArg::Enumerate => RepairMode::Enumerate,
            RepairModeArg::LlmThenEnumerate => RepairMode::LlmThenEnumerate,
        };
        repair(&text, spec, &cases, constants, mode, backend, &generation_params(), &opts, cfg).map_err(repair_err)?
    };
    match &result.outcome {
        RepairOutcome::Repaired { assignment, source, .. } => {
            let fills: Vec<String> = assignment.iter().map(|(h, v)| format!("{h}={v}")).collect();
            println!("repaired ({}): {}", serde_json::to_value(source)?.as_str().unwrap_or_default(), fills.join(", "));
        }
        RepairOutcome::Exhausted { tried } => println!("no passing fill after {tried} candidates"),
        RepairOutcome::Aborted { reason } => println!("aborted: {reason}"),
    }
    println!("candidates tried: {}", result.stats.candidates_tried);
    write_json(out, "repair.json", &result)?;
    if let RepairOutcome::Repaired { code, .. } = &result.outcome {
        write_text(out, "repaired.txt", code)?;
    }
    Ok(status(result.is_repaired()))
}

fn optimize(
    target: &Target,
    mode: OptimizeModeArg,
    backend: Option<&dyn Backend>,
    seed: u64,
    n: usize,
    out: Option<&Path>,
) -> Result<Status> {
    let cfg = MachineConfig::default();
    let (text, spec) = load_target(target)?;
    let program = parse_program(&text, &spec.buffer_table(cfg.dim))?;
    let cases = cases(spec, seed, n, &cfg)?;
    let params = CostParams::default();
    let mode = match mode {
        OptimizeModeArg::Rules => OptimizeMode::Rules,
        OptimizeModeArg::Llm => OptimizeMode::Llm,
        OptimizeModeArg::LlmThenRules => OptimizeMode::LlmThenRules,
    };
    let result = match optimize_program(&program, spec, &cases, mode, backend, &generation_params(), &params, cfg) {
        Ok(r) => r,
        Err(OptError::UnverifiedInput) => {
            println!("input program does not pass verification");
            return Ok(Status::Failed);
        }
        Err(OptError::Backend(e)) => return Err(e.into()),
        Err(e) => return Err(e.into()),
    };
    debug_assert_eq!(program_cost(&result.program, &params, &cfg).ok().map(|c| c.total), Some(result.after.total));
    print!("{}", render_feedback(&result.after, Some(&result.before)));
    for note in &result.notes {
        println!("note: {note}");
    }
    write_json(out, "optimize.json", &result)?;
    write_text(out, "optimized.txt", &render_program(&result.program))?;
    Ok(Status::Ok)
}

fn schedule(
    program: Option<&Path>,
    transcript: Option<&Path>,
    backend: Option<&dyn Backend>,
    steps: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<Status> {
    let source = match program {
        Some(path) => read(path)?,
        None => DOITGEN.to_string(),
    };
    let kernel = parse_kernel(&source)?;
    let mut session = Session::new(kernel, SessionConfig { seed, ..SessionConfig::default() });
    println!("initial cost: {}", session.cost());
    match (transcript, backend) {
        (Some(path), _) => {
            for reply in read(path)?.lines().filter(|l| !l.trim().is_empty()) {
                session.step(reply);
            }
        }
        (None, Some(backend)) => session.run(backend, &generation_params(), steps)?,
        (None, None) => bail!("schedule needs --transcript or --backend"),
    }
    for (i, r) in session.records.iter().enumerate() {
        let first = r.result.lines().next().unwrap_or_default();
        println!("step {i}: {first} (cost {})", r.cost);
    }
    println!("final cost: {}", session.cost());
    write_json(out, "schedule.json", &session.records)?;
    write_text(out, "schedule.exo", &session.kernel.render())?;
    Ok(Status::Ok)
}
