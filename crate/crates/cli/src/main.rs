use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use trainvar_core::infer::InferConfig;
use trainvar_core::invariant::{apply_cap, InvariantFile};
use trainvar_core::precondition::Strategy;
use trainvar_core::synth::{self, FaultSpec, RunConfig};
use trainvar_core::trace::{Run, TraceReader, SCHEMA_VERSION};
use trainvar_core::verify::{self, Checker, Manifest, Mode, ReportSummary};
use trainvar_core::{Registry, RelationKind};

#[derive(Parser)]
#[command(name = "trainvar", version, about = "Infer training invariants from traces and check new traces against them")]
struct Cli {
    /// Schema version of traces and invariant files; only 1 is understood.
    #[arg(long, global = true, default_value_t = 1)]
    schema: u64,

    /// Worker threads (defaults to available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic training run.
    Gen(GenArgs),
    /// Infer invariants from one or more run directories.
    Infer(InferArgs),
    /// Check a run directory (or `-` for stdin) against an invariant file.
    Check(CheckArgs),
    /// Summarize a violation report file.
    Report(ReportArgs),
    /// Print what traces must contain to check an invariant file.
    Manifest(ManifestArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 2)]
    dp: u32,
    #[arg(long, default_value_t = 2)]
    tp: u32,
    #[arg(long, default_value_t = 8)]
    params: u32,
    #[arg(long, default_value_t = 6)]
    steps: u32,
    #[arg(long, default_value_t = 0.25)]
    replicated_fraction: f64,
    /// Fault to inject, as KIND@STEP.
    #[arg(long)]
    fault: Option<FaultSpec>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only emit what this manifest asks for.
    #[arg(long)]
    select: Option<PathBuf>,
    /// Print the fault catalog and exit.
    #[arg(long)]
    list_faults: bool,
    #[arg(long, required_unless_present = "list_faults")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Augment,
    Split,
}

#[derive(Args)]
struct InferArgs {
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated relation names (default: all).
    #[arg(long, value_delimiter = ',')]
    relations: Vec<String>,
    /// Keep at most this many invariants.
    #[arg(long)]
    cap: Option<usize>,
    /// Safety checks per hypothesis.
    #[arg(long, default_value_t = 1000)]
    budget: usize,
    #[arg(long, default_value_t = 10_000)]
    max_examples: usize,
    #[arg(long, value_enum, default_value_t = StrategyArg::Augment)]
    strategy: StrategyArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Ndjson,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Online,
    Batch,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    invariants: PathBuf,
    /// Run directory, or `-` to read one merged trace from stdin.
    input: PathBuf,
    /// Also write violations here, one JSON object per line.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[arg(long, value_enum, default_value_t = ModeArg::Online)]
    mode: ModeArg,
}

#[derive(Args)]
struct ReportArgs {
    file: PathBuf,
}

#[derive(Args)]
struct ManifestArgs {
    #[arg(long)]
    invariants: PathBuf,
}

fn ensure_dir(p: &Path) -> Result<()> {
    if !p.is_dir() {
        bail!("{} is not a directory", p.display());
    }
    Ok(())
}

fn gen(a: GenArgs) -> Result<u8> {
    if a.list_faults {
        println!("{}", serde_json::to_string_pretty(&synth::describe_faults())?);
        return Ok(0);
    }
    let out = a.out.expect("clap requires --out");
    let cfg = RunConfig {
        dp: a.dp,
        tp: a.tp,
        n_params: a.params,
        replicated_fraction: a.replicated_fraction,
        n_steps: a.steps,
        seed: a.seed,
        fault: a.fault,
        ..RunConfig::default()
    };
    let selection: Option<Manifest> = match &a.select {
        Some(p) => Some(serde_json::from_str(&fs::read_to_string(p).with_context(|| p.display().to_string())?)?),
        None => None,
    };
    let id = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let run = synth::generate_selected(&cfg, &id, selection.as_ref())?;
    synth::write_run(&cfg, &run, &out)?;
    eprintln!(
        "wrote {} records from {} processes to {}",
        run.record_count(),
        run.processes.len(),
        out.display()
    );
    Ok(0)
}

fn infer(a: InferArgs) -> Result<u8> {
    for r in &a.runs {
        ensure_dir(r)?;
    }
    let relations = if a.relations.is_empty() {
        RelationKind::ALL.to_vec()
    } else {
        a.relations
            .iter()
            .map(|n| RelationKind::from_name(n.trim()).with_context(|| format!("unknown relation `{n}`")))
            .collect::<Result<_>>()?
    };
    let cfg = InferConfig {
        relations,
        budget: a.budget,
        max_examples: a.max_examples,
        strategy: match a.strategy {
            StrategyArg::Augment => Strategy::Augment,
            StrategyArg::Split => Strategy::SplitSubgroups,
        },
        ..InferConfig::default()
    };
    let runs = a
        .runs
        .iter()
        .map(|p| Run::read_dir(p).with_context(|| p.display().to_string()))
        .collect::<Result<Vec<_>>>()?;
    let result = trainvar_core::infer(&runs, &Registry::builtin(), &cfg)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    let s = result.stats;
    let invariants = match a.cap {
        Some(cap) => apply_cap(result.invariants, cap),
        None => result.invariants,
    };
    eprintln!(
        "{} hypotheses: {} invariants, {} superficial, {} budget-exhausted, {} never held, {} unstable; wrote {}",
        s.hypotheses,
        s.invariants,
        s.superficial,
        s.budget_exhausted,
        s.no_passing,
        s.unstable,
        invariants.len()
    );
    InvariantFile::new(invariants).write(&a.out)?;
    Ok(0)
}

fn check(a: CheckArgs) -> Result<u8> {
    let file = InvariantFile::read(&a.invariants).with_context(|| a.invariants.display().to_string())?;
    let mode = match a.mode {
        ModeArg::Online => Mode::Online,
        ModeArg::Batch => Mode::Batch,
    };
    let mut report = match &a.report {
        Some(p) => Some(BufWriter::new(File::create(p).with_context(|| p.display().to_string())?)),
        None => None,
    };
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let mut io_err: Option<io::Error> = None;
    let mut sink = |v: verify::Violation| {
        let line = serde_json::to_string(&v).expect("violations serialize");
        let res = (|| {
            if let Some(r) = report.as_mut() {
                writeln!(r, "{line}")?;
            }
            match a.format {
                Format::Text => writeln!(out, "{}", verify::render_violation(&v)),
                Format::Ndjson => writeln!(out, "{line}"),
            }
        })();
        if let Err(e) = res {
            io_err.get_or_insert(e);
        }
    };

    let summary = if a.input.as_os_str() == "-" {
        let mut checker = Checker::new(&file.invariants, mode, BTreeSet::new())?;
        for r in TraceReader::new(io::stdin().lock()) {
            checker.push(&r?, &mut sink)?;
        }
        checker.finish(&mut sink)?
    } else {
        ensure_dir(&a.input)?;
        let run = Run::read_dir(&a.input).with_context(|| a.input.display().to_string())?;
        let mut checker = Checker::new(&file.invariants, mode, run.processes.keys().copied().collect())?;
        for r in &run.merged() {
            checker.push(r, &mut sink)?;
        }
        checker.finish(&mut sink)?
    };
    if let Some(e) = io_err {
        return Err(e.into());
    }
    if let Some(mut r) = report {
        r.flush()?;
    }
    out.flush()?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!(
        "checked {} records against {} invariants: {} violations",
        summary.records, summary.invariants, summary.violations
    );
    Ok(if summary.violations > 0 { 1 } else { 0 })
}

fn report(a: ReportArgs) -> Result<u8> {
    let text = fs::read_to_string(&a.file).with_context(|| a.file.display().to_string())?;
    let reports = verify::parse_reports(&text)?;
    print!("{}", verify::render_summary(&ReportSummary::of(&reports)));
    Ok(0)
}

fn manifest(a: ManifestArgs) -> Result<u8> {
    let file = InvariantFile::read(&a.invariants)?;
    let m = verify::required_descriptors(&file.invariants)?;
    println!("{}", serde_json::to_string_pretty(&m)?);
    Ok(0)
}

fn run(cli: Cli) -> Result<u8> {
    if cli.schema != SCHEMA_VERSION {
        bail!("unsupported schema version {} (this build understands {SCHEMA_VERSION})", cli.schema);
    }
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.cmd {
        Cmd::Gen(a) => gen(a),
        Cmd::Infer(a) => infer(a),
        Cmd::Check(a) => check(a),
        Cmd::Report(a) => report(a),
        Cmd::Manifest(a) => manifest(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
