//! Command line runner: program validation, trajectory runs, the cellular
//! automaton experiments, and matrix morphing.
//!
//! Exit codes: 0 ok, 1 validation error, 2 runtime error. `MM_SEED` serves
//! as a seed fallback when neither a flag nor the program file provides
//! one.

mod render;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use matrixflow_core::elements::classify_element;
use matrixflow_core::experiments::{
    amplify_frame, build_ca_program, morph_programs, CaConfig, CaRunner, GridSpec, InitSpec,
    Pattern,
};
use matrixflow_core::machine::{run_machine, CompiledProgram, Machine};
use matrixflow_core::program::{Program, ProgramFile};
use matrixflow_core::signature::element_name;

#[derive(Parser)]
#[command(name = "matrixflow", version, about = "Runs dataflow programs represented as sparse coefficient matrices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a program file and print a summary.
    Validate { path: PathBuf },
    /// Run a program and emit a trajectory CSV.
    Run(RunArgs),
    /// Run a continuous cellular automaton and emit PGM frames plus stats.
    Ca(CaArgs),
    /// Interpolate between two constant-valued programs and run each point.
    Morph(MorphArgs),
}

#[derive(Args)]
struct RunArgs {
    path: PathBuf,
    /// Number of steps; the CSV covers t = 0..=steps.
    #[arg(long)]
    steps: u64,
    /// Nodes to record; defaults to the file's watch list, then every node
    /// the matrix mentions.
    #[arg(long)]
    watch: Vec<String>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the program file's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CaArgs {
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Propagator copy probability.
    #[arg(long, default_value_t = 0.995)]
    p: f64,
    /// vn-avg, shift:<dx>,<dy> or random-sparse:<k>,<seed>.
    #[arg(long, default_value = "vn-avg")]
    pattern: String,
    /// white, black, checker, random:<seed> or none.
    #[arg(long, default_value = "white")]
    init: String,
    /// Step at which the connectivity weights replace the constants.
    #[arg(long, default_value_t = 5)]
    switch_at: u64,
    /// Cross-fade the switch over this many steps instead of an abrupt
    /// change.
    #[arg(long)]
    ramp: Option<u64>,
    #[arg(long)]
    steps: u64,
    #[arg(long)]
    frames_dir: PathBuf,
    /// Emit a frame every this many steps (plus the first and last).
    #[arg(long, default_value_t = 1)]
    frame_every: u64,
    /// Rescale each frame so the maximal absolute value reaches 1.
    #[arg(long)]
    amplify: bool,
    /// Hold the cell values' RMS at this target, e.g. `rms=0.25`.
    #[arg(long, value_name = "rms=R")]
    stabilize: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MorphArgs {
    path_a: PathBuf,
    path_b: PathBuf,
    /// Number of interpolation intervals; runs K+1 programs.
    #[arg(long)]
    lambda_steps: u64,
    #[arg(long)]
    steps: u64,
    /// Nodes to record; defaults to the files' watch lists.
    #[arg(long)]
    watch: Vec<String>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides both program files' seeds.
    #[arg(long)]
    seed: Option<u64>,
}

enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn validation(e: impl std::fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { path } => cmd_validate(&path),
        Command::Run(args) => cmd_run(&args),
        Command::Ca(args) => cmd_ca(&args),
        Command::Morph(args) => cmd_morph(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn env_seed() -> Option<u64> {
    std::env::var("MM_SEED").ok().and_then(|s| s.parse().ok())
}

/// Seed priority: flag, then the file, then `MM_SEED`, then 0.
fn load_program(path: &Path, seed_flag: Option<u64>) -> Result<Program, CliError> {
    let file = load_file(path)?;
    let fallback = if file.seed.is_none() { env_seed() } else { None };
    file.into_program(seed_flag.or(fallback))
        .map_err(CliError::validation)
}

fn load_file(path: &Path) -> Result<ProgramFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    ProgramFile::from_str(&text).map_err(CliError::validation)
}

fn cmd_validate(path: &Path) -> Result<(), CliError> {
    let program = load_program(path, None)?;
    let compiled = CompiledProgram::compile(&program).map_err(CliError::validation)?;

    let mut histogram: BTreeMap<String, usize> = BTreeMap::new();
    for (col, row, source) in program.matrix.iter() {
        let elem = element_name(&program.signature, col, row).map_err(CliError::validation)?;
        let class = classify_element(Some(source), &elem, &program.signature);
        *histogram.entry(class.to_string()).or_insert(0) += 1;
    }

    println!("ok: {}", path.display());
    println!("  operations: {}", program.signature.operations.len());
    println!(
        "  nodes: {} outputs, {} inputs",
        compiled.output_count(),
        compiled.input_count()
    );
    println!("  elements: {}", compiled.element_count());
    for (class, count) in histogram {
        println!("    {class}: {count}");
    }
    println!(
        "  policy: {:?} ({:?})",
        program.policy, program.on_violation
    );
    Ok(())
}

/// Watch priority: flags, then the file's list, then every node the matrix
/// mentions, sorted.
fn resolve_watch(flags: &[String], program: &Program, compiled: &CompiledProgram) -> Vec<String> {
    if !flags.is_empty() {
        return flags.to_vec();
    }
    if !program.watch.is_empty() {
        return program.watch.clone();
    }
    let mut names: Vec<String> = compiled
        .output_names()
        .chain(compiled.input_names())
        .map(str::to_string)
        .collect();
    names.sort();
    names
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let program = load_program(&args.path, args.seed)?;
    let mut machine = Machine::new(&program).map_err(CliError::validation)?;
    let watch = resolve_watch(&args.watch, &program, machine.compiled());
    let traj = run_machine(&mut machine, args.steps, &watch).map_err(CliError::runtime)?;
    match &args.out {
        Some(path) => {
            let mut out = BufWriter::new(File::create(path).map_err(CliError::runtime)?);
            render::write_trajectory_csv(&mut out, &traj).map_err(CliError::runtime)?;
            out.flush().map_err(CliError::runtime)?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            render::write_trajectory_csv(&mut out, &traj).map_err(CliError::runtime)?;
        }
    }
    Ok(())
}

fn parse_stabilize(value: &str) -> Result<f64, CliError> {
    let raw = value.strip_prefix("rms=").unwrap_or(value);
    let rms: f64 = raw
        .parse()
        .map_err(|_| CliError::validation(format!("bad --stabilize value `{value}`")))?;
    if rms <= 0.0 {
        return Err(CliError::validation("--stabilize target must be positive"));
    }
    Ok(rms)
}

fn cmd_ca(args: &CaArgs) -> Result<(), CliError> {
    let grid = GridSpec::new(args.width, args.height).map_err(CliError::validation)?;
    let pattern: Pattern = args.pattern.parse().map_err(CliError::validation)?;
    let init: InitSpec = args.init.parse().map_err(CliError::validation)?;
    let stabilize = args.stabilize.as_deref().map(parse_stabilize).transpose()?;
    let cfg = CaConfig {
        grid,
        pattern,
        p: args.p,
        init,
        switch_at: args.switch_at,
        ramp: args.ramp,
        seed: args.seed.or_else(env_seed).unwrap_or(0),
    };
    let program = build_ca_program(&cfg).map_err(CliError::validation)?;
    let mut runner = CaRunner::new(&program, grid, stabilize).map_err(CliError::validation)?;

    std::fs::create_dir_all(&args.frames_dir).map_err(CliError::runtime)?;
    let stats_path = args.frames_dir.join("stats.csv");
    let mut stats =
        BufWriter::new(File::create(&stats_path).map_err(CliError::runtime)?);
    render::write_stats_header(&mut stats).map_err(CliError::runtime)?;

    let every = args.frame_every.max(1);
    let emit = |runner: &CaRunner, t: u64, stats: &mut BufWriter<File>| -> Result<(), CliError> {
        let frame = runner.frame();
        render::write_stats_row(stats, t, &frame.stats()).map_err(CliError::runtime)?;
        let rendered = if args.amplify { amplify_frame(&frame) } else { frame };
        let path = args.frames_dir.join(format!("frame_{t}.pgm"));
        let mut out = BufWriter::new(File::create(path).map_err(CliError::runtime)?);
        render::write_pgm(&mut out, &rendered).map_err(CliError::runtime)?;
        out.flush().map_err(CliError::runtime)
    };

    emit(&runner, 0, &mut stats)?;
    for t in 1..=args.steps {
        runner.step().map_err(CliError::runtime)?;
        if t % every == 0 || t == args.steps {
            emit(&runner, t, &mut stats)?;
        }
    }
    stats.flush().map_err(CliError::runtime)?;
    Ok(())
}

fn cmd_morph(args: &MorphArgs) -> Result<(), CliError> {
    let file_a = load_file(&args.path_a)?;
    let file_b = load_file(&args.path_b)?;
    // One shared seed: the flag, either file, the environment, then 0.
    let seed = args
        .seed
        .or(file_a.seed)
        .or(file_b.seed)
        .or_else(env_seed)
        .unwrap_or(0);
    let mut a = file_a.into_program(Some(seed)).map_err(CliError::validation)?;
    let mut b = file_b.into_program(Some(seed)).map_err(CliError::validation)?;
    if !args.watch.is_empty() {
        a.watch = args.watch.clone();
        b.watch = args.watch.clone();
    }
    if args.lambda_steps == 0 {
        return Err(CliError::validation("--lambda-steps must be at least 1"));
    }

    std::fs::create_dir_all(&args.out_dir).map_err(CliError::runtime)?;
    let k_max = args.lambda_steps;
    for k in 0..=k_max {
        let lambda = k as f64 / k_max as f64;
        let morphed = morph_programs(&a, &b, lambda).map_err(CliError::validation)?;
        let mut machine = Machine::new(&morphed).map_err(CliError::validation)?;
        let watch = resolve_watch(&args.watch, &morphed, machine.compiled());
        let traj = run_machine(&mut machine, args.steps, &watch).map_err(CliError::runtime)?;
        let path = args.out_dir.join(format!("lambda_{k}.csv"));
        let mut out = BufWriter::new(File::create(path).map_err(CliError::runtime)?);
        render::write_trajectory_csv(&mut out, &traj).map_err(CliError::runtime)?;
        out.flush().map_err(CliError::runtime)?;
    }
    Ok(())
}
