//! `framevault` command-line driver.
//!
//! Exit codes: 0 clean, 1 protection violation or fuzz finding, 2 usage,
//! parse or annotation error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use framevault::exec::{describe, stats_table, REPORT_HEADER};
use framevault::instrument::{emit, parse_instrumented};
use framevault::program::ListError;
use framevault::scenario::{identity_from_map, ScenarioError};
use framevault::{
    instrument, parse_lists, parse_program, ApiRow, ExecutionReport, FuzzConfig, IdentityError,
    IdentityTable, InstrumentError, InstrumentedProgram, Lists, RunOptions, Scenario, VaultState,
};

pub const EXIT_CLEAN: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "framevault",
    version,
    about = "Stack-data protection for untrusted calls, simulated"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Insert runtime calls into an annotated program.
    Instrument {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        out: Output,
    },
    /// Execute with protection enabled.
    Run {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        exec: Exec,
        #[command(flatten)]
        out: Output,
    },
    /// Execute without any runtime calls, as an unprotected baseline.
    Native {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        exec: Exec,
        #[command(flatten)]
        out: Output,
    },
    /// Run native and protected and compare what untrusted code observed.
    Diff {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        exec: Exec,
        #[command(flatten)]
        out: Output,
    },
    /// Per-syscall counts and inserted calls by mapping row.
    Stats {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        exec: Exec,
        #[command(flatten)]
        out: Output,
    },
    /// Generate random programs with hostile untrusted code and check them.
    Fuzz(FuzzArgs),
}

#[derive(Args, Debug, Default)]
pub struct Input {
    /// Program description (JSON).
    #[arg(long, conflicts_with = "scenario")]
    pub program: Option<PathBuf>,
    /// Self-contained scenario file, as saved by `fuzz`.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// The program file is `instrument` output; skip instrumentation.
    #[arg(long, requires = "program")]
    pub instrumented: bool,
    /// Third-party functions, one `name(arity)` per line
    #[arg(long)]
    pub untrusted_list: Option<PathBuf>,
    /// Functions to protect as whole frames, one name per line
    #[arg(long)]
    pub sensitive_list: Option<PathBuf>,
    /// Directory holding `UntrustedList` and `SensitiveList`.
    #[arg(long)]
    pub list_dir: Option<PathBuf>,
    /// Function spans; synthesized from the program when omitted.
    #[arg(long)]
    pub image_map: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct Exec {
    /// Function to start in; `main` unless the scenario says otherwise.
    #[arg(long)]
    pub entry: Option<String>,
    /// Stop at the first runtime exception.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Args, Debug, Default)]
pub struct Output {
    /// Write here instead of standard output.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Text,
    Json,
}

#[derive(Args, Debug)]
pub struct FuzzArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub cases: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Sensitive functions per call chain, at most.
    #[arg(long, default_value_t = 3)]
    pub max_depth: usize,
    /// Largest generated frame in bytes.
    #[arg(long, default_value_t = 4096)]
    pub max_frame: u64,
    /// Untrusted code runs no read/write probes.
    #[arg(long)]
    pub no_probes: bool,
    /// Untrusted code issues no runtime calls of its own.
    #[arg(long)]
    pub no_forged: bool,
    /// Save findings unminimized.
    #[arg(long)]
    pub no_minimize: bool,
    /// Directory for counterexample scenarios.
    #[arg(long)]
    pub save_dir: Option<PathBuf>,
    #[command(flatten)]
    pub out: Output,
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() {
                EXIT_ERROR
            } else {
                EXIT_CLEAN
            };
        }
    };
    match execute(&cli.command, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e:#}");
            EXIT_ERROR
        }
    }
}

pub fn execute(command: &Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Instrument { input, out } => cmd_instrument(input, out, stdout, stderr),
        Command::Run { input, exec, out } => cmd_run(input, exec, out, stdout),
        Command::Native { input, exec, out } => cmd_native(input, exec, out, stdout),
        Command::Diff { input, exec, out } => cmd_diff(input, exec, out, stdout),
        Command::Stats { input, exec, out } => cmd_stats(input, exec, out, stdout),
        Command::Fuzz(args) => cmd_fuzz(args, stdout),
    }
}

/// Instrumented program ready to execute.
pub struct Loaded {
    pub program: InstrumentedProgram,
    pub identity: Arc<IdentityTable>,
    pub entry: String,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn json_error(path: &Path, e: &serde_json::Error) -> anyhow::Error {
    let msg = e.to_string();
    let msg = msg
        .rsplit_once(" at line ")
        .map_or(msg.as_str(), |(head, _)| head)
        .to_string();
    anyhow!("{}:{}:{}: {msg}", path.display(), e.line(), e.column())
}

/// Line of the `"name": "<function>"` entry, and of `<var>` after it.
pub fn locate(source: &str, function: Option<&str>, var: Option<&str>) -> Option<usize> {
    let names = |name: &str, from: usize| {
        let quoted = format!("\"{name}\"");
        source
            .lines()
            .enumerate()
            .skip(from)
            .find(|(_, l)| {
                l.split_once("\"name\"")
                    .is_some_and(|(_, rest)| rest.contains(&quoted))
            })
            .map(|(i, _)| i)
    };
    let f = names(function?, 0)?;
    match var {
        Some(v) => names(v, f + 1).or(Some(f)).map(|i| i + 1),
        None => Some(f + 1),
    }
}

fn instrument_error(path: &Path, source: &str, e: &InstrumentError) -> anyhow::Error {
    let (function, var) = e.location();
    match locate(source, function, var) {
        Some(line) => anyhow!("{}:{line}: {e}", path.display()),
        None => anyhow!("{}: {e}", path.display()),
    }
}

fn list_error(untrusted: &Path, sensitive: &Path, e: ListError) -> anyhow::Error {
    match e {
        ListError::Parse {
            list,
            line,
            message,
        } => {
            let path = match list {
                framevault::program::ListKind::Untrusted => untrusted,
                framevault::program::ListKind::Sensitive => sensitive,
            };
            anyhow!("{}:{line}: {message}", path.display())
        }
        e => anyhow!(e),
    }
}

fn identity_error(path: &Path, e: ScenarioError) -> anyhow::Error {
    match e {
        ScenarioError::Identity(IdentityError::Parse { line, message }) => {
            anyhow!("{}:{line}: {message}", path.display())
        }
        e => anyhow!("{}: {e}", path.display()),
    }
}

fn list_paths(input: &Input) -> (Option<PathBuf>, Option<PathBuf>) {
    let from_dir = |name: &str| {
        input
            .list_dir
            .as_ref()
            .map(|d| d.join(name))
            .filter(|p| p.exists())
    };
    (
        input
            .untrusted_list
            .clone()
            .or_else(|| from_dir("UntrustedList")),
        input
            .sensitive_list
            .clone()
            .or_else(|| from_dir("SensitiveList")),
    )
}

fn load_lists(input: &Input) -> Result<Lists> {
    let (u, s) = list_paths(input);
    let untrusted = u.as_deref().map(read).transpose()?.unwrap_or_default();
    let sensitive = s.as_deref().map(read).transpose()?.unwrap_or_default();
    let none = PathBuf::new();
    parse_lists(&untrusted, &sensitive).map_err(|e| {
        list_error(
            u.as_deref().unwrap_or(&none),
            s.as_deref().unwrap_or(&none),
            e,
        )
    })
}

fn load_identity(
    input: &Input,
    program: &InstrumentedProgram,
    scenario: Option<&Scenario>,
) -> Result<Arc<IdentityTable>> {
    if let Some(path) = &input.image_map {
        return identity_from_map(&read(path)?, program).map_err(|e| identity_error(path, e));
    }
    match scenario {
        Some(s) => s.identity(program).map_err(|e| {
            identity_error(
                input.scenario.as_deref().unwrap_or(Path::new("scenario")),
                e,
            )
        }),
        None => Ok(framevault::exec::synthesize_identity(program)),
    }
}

pub fn load(input: &Input, entry: Option<&str>) -> Result<Loaded> {
    if let Some(path) = &input.scenario {
        let source = read(path)?;
        let scenario = Scenario::from_json(&source).map_err(|e| json_error(path, &e))?;
        let program = match scenario.instrument() {
            Ok(p) => p,
            Err(ScenarioError::Instrument(e)) => return Err(instrument_error(path, &source, &e)),
            Err(e) => bail!("{}: {e}", path.display()),
        };
        let identity = load_identity(input, &program, Some(&scenario))?;
        return Ok(Loaded {
            program,
            identity,
            entry: entry.unwrap_or(&scenario.entry).to_string(),
        });
    }
    let Some(path) = &input.program else {
        bail!("one of --program or --scenario is required");
    };
    let source = read(path)?;
    let program = if input.instrumented {
        parse_instrumented(&source).map_err(|e| json_error(path, &e))?
    } else {
        let program = parse_program(&source).map_err(|e| json_error(path, &e))?;
        let lists = load_lists(input)?;
        instrument(&program, &lists).map_err(|e| instrument_error(path, &source, &e))?
    };
    let identity = load_identity(input, &program, None)?;
    Ok(Loaded {
        program,
        identity,
        entry: entry.unwrap_or("main").to_string(),
    })
}

fn write_out(out: &Output, text: &str, stdout: &mut dyn Write) -> Result<()> {
    match &out.output {
        Some(path) => {
            fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
        }
        None => stdout
            .write_all(text.as_bytes())
            .context("cannot write output"),
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    s
}

fn options(exec: &Exec) -> RunOptions {
    RunOptions {
        strict: exec.strict,
        ..RunOptions::default()
    }
}

pub fn protected(loaded: &Loaded, exec: &Exec) -> ExecutionReport {
    let kernel = VaultState::new(loaded.identity.clone());
    framevault::run(
        &loaded.program,
        loaded.identity.clone(),
        kernel,
        &loaded.entry,
        &options(exec),
    )
    .report
}

pub fn native(loaded: &Loaded, exec: &Exec) -> ExecutionReport {
    framevault::run_native(
        &loaded.program,
        loaded.identity.clone(),
        &loaded.entry,
        &options(exec),
    )
    .report
}

fn cmd_instrument(
    input: &Input,
    out: &Output,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<i32> {
    if input.instrumented {
        bail!("--instrumented makes no sense for `instrument`");
    }
    let loaded = load(input, None)?;
    let listing = loaded.program.listing();
    match (&out.output, out.format) {
        (Some(_), _) => {
            write_out(out, &emit(&loaded.program), stdout)?;
            stdout.write_all(listing.as_bytes())?;
        }
        (None, Format::Json) => {
            stdout.write_all(emit(&loaded.program).as_bytes())?;
            stderr.write_all(listing.as_bytes())?;
        }
        (None, Format::Text) => stdout.write_all(listing.as_bytes())?,
    }
    Ok(EXIT_CLEAN)
}

fn render(report: &ExecutionReport, format: Format) -> String {
    match format {
        Format::Text => report.to_text(),
        Format::Json => report.to_json(),
    }
}

fn cmd_run(input: &Input, exec: &Exec, out: &Output, stdout: &mut dyn Write) -> Result<i32> {
    let loaded = load(input, exec.entry.as_deref())?;
    let report = protected(&loaded, exec);
    write_out(out, &render(&report, out.format), stdout)?;
    Ok(if report.has_violations() {
        EXIT_VIOLATION
    } else {
        EXIT_CLEAN
    })
}

fn cmd_native(input: &Input, exec: &Exec, out: &Output, stdout: &mut dyn Write) -> Result<i32> {
    let loaded = load(input, exec.entry.as_deref())?;
    let report = native(&loaded, exec);
    write_out(out, &render(&report, out.format), stdout)?;
    // leaks are the expected outcome of a baseline run
    Ok(EXIT_CLEAN)
}

#[derive(Serialize)]
struct RowCount {
    row: usize,
    name: ApiRow,
    description: &'static str,
    inserted: usize,
    executed: u64,
}

fn row_counts(program: &InstrumentedProgram, report: &ExecutionReport) -> Vec<RowCount> {
    let inserted = program.provenance_counts();
    ApiRow::ALL
        .iter()
        .map(|&row| RowCount {
            row: row.number(),
            name: row,
            description: row.describe(),
            inserted: inserted.get(&row).copied().unwrap_or(0),
            executed: report.provenance.get(&row).copied().unwrap_or(0),
        })
        .collect()
}

fn rows_text(rows: &[RowCount]) -> String {
    let mut s = format!(
        "{:<4} {:>8} {:>8}  {}\n",
        "row", "inserted", "executed", "mapping"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<4} {:>8} {:>8}  {}\n",
            r.row, r.inserted, r.executed, r.description
        ));
    }
    s
}

#[derive(Serialize)]
struct Diff<'a> {
    entry: &'a str,
    secret_bytes_native: u64,
    secret_bytes_protected: u64,
    leaks_native: usize,
    leaks_protected: usize,
    rows: Vec<RowCount>,
    native: &'a ExecutionReport,
    protected: &'a ExecutionReport,
}

fn cmd_diff(input: &Input, exec: &Exec, out: &Output, stdout: &mut dyn Write) -> Result<i32> {
    let loaded = load(input, exec.entry.as_deref())?;
    let n = native(&loaded, exec);
    let p = protected(&loaded, exec);
    let diff = Diff {
        entry: &loaded.entry,
        secret_bytes_native: n.secret_bytes_observed,
        secret_bytes_protected: p.secret_bytes_observed,
        leaks_native: n.leaks().count(),
        leaks_protected: p.leaks().count(),
        rows: row_counts(&loaded.program, &p),
        native: &n,
        protected: &p,
    };
    let text = match out.format {
        Format::Json => to_json(&diff),
        Format::Text => {
            let mut s = format!("{REPORT_HEADER}\ndiff: entry {}\n", diff.entry);
            s.push_str(&format!(
                "secret bytes observed: native {}, protected {}\n",
                diff.secret_bytes_native, diff.secret_bytes_protected
            ));
            s.push_str(&format!(
                "leaks: native {}, protected {}\n",
                diff.leaks_native, diff.leaks_protected
            ));
            s.push_str(&stats_table(&[
                ("native", &n.stats),
                ("protected", &p.stats),
            ]));
            s.push_str(&rows_text(&diff.rows));
            s.push_str(&format!("protected violations: {}\n", p.violations.len()));
            for v in &p.violations {
                s.push_str(&format!("  {}\n", describe(v)));
            }
            for note in &p.notes {
                s.push_str(&format!("note: {note}\n"));
            }
            s
        }
    };
    write_out(out, &text, stdout)?;
    Ok(if p.has_violations() {
        EXIT_VIOLATION
    } else {
        EXIT_CLEAN
    })
}

#[derive(Serialize)]
struct Stats<'a> {
    entry: &'a str,
    stats: &'a framevault::SyscallStats,
    rows: Vec<RowCount>,
}

fn cmd_stats(input: &Input, exec: &Exec, out: &Output, stdout: &mut dyn Write) -> Result<i32> {
    let loaded = load(input, exec.entry.as_deref())?;
    let p = protected(&loaded, exec);
    let stats = Stats {
        entry: &loaded.entry,
        stats: &p.stats,
        rows: row_counts(&loaded.program, &p),
    };
    let text = match out.format {
        Format::Json => to_json(&stats),
        Format::Text => {
            let mut s = format!("{REPORT_HEADER}\nstats: entry {}\n", stats.entry);
            s.push_str(&stats_table(&[("protected", &p.stats)]));
            s.push_str(&rows_text(&stats.rows));
            s
        }
    };
    write_out(out, &text, stdout)?;
    Ok(EXIT_CLEAN)
}

fn cmd_fuzz(args: &FuzzArgs, stdout: &mut dyn Write) -> Result<i32> {
    let config = FuzzConfig {
        seed: args.seed,
        cases: args.cases,
        max_depth: args.max_depth,
        max_frame: args.max_frame,
        probes: !args.no_probes,
        forged: !args.no_forged,
        jobs: args.jobs,
        minimize: !args.no_minimize,
    };
    if config.max_depth == 0 {
        bail!("--max-depth must be at least 1");
    }
    let summary = framevault::fuzz(&config);
    if let Some(dir) = &args.save_dir {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        for f in &summary.findings {
            let name = format!(
                "case-{}-{}.json",
                f.case,
                to_json(&f.kind).trim().trim_matches('"')
            );
            let path = dir.join(name);
            fs::write(&path, f.scenario.to_json())
                .with_context(|| format!("cannot write {}", path.display()))?;
        }
    }
    let text = match args.out.format {
        Format::Text => summary.to_text(),
        Format::Json => to_json(&summary),
    };
    write_out(&args.out, &text, stdout)?;
    Ok(if summary.findings.is_empty() {
        EXIT_CLEAN
    } else {
        EXIT_VIOLATION
    })
}
