use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};
use seqpar::attention::EngineKind;
use seqpar::harness::{run_command, Command, ExperimentSpec};
use seqpar::partition::LayoutMode;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Verify,
    Train,
    PitfallDemo,
    CommReport,
    BalanceReport,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Verify => Command::Verify,
            Cmd::Train => Command::Train,
            Cmd::PitfallDemo => Command::PitfallDemo,
            Cmd::CommReport => Command::CommReport,
            Cmd::BalanceReport => Command::BalanceReport,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Layout {
    Naive,
    Zigzag,
}

/// Sequence-parallel attention and training simulator.
#[derive(Debug, Parser)]
#[command(name = "seqpar", version)]
struct Args {
    command: Cmd,
    /// Experiment spec (JSON). Defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for CSV and SVG outputs.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated engine names, e.g. ulysses,ring_zigzag.
    #[arg(long, value_delimiter = ',')]
    engines: Option<Vec<String>>,
    /// Runs a single sequence-parallel size instead of the spec's list.
    #[arg(long)]
    sp: Option<usize>,
    #[arg(long, value_enum)]
    layout: Option<Layout>,
}

fn parse_engine(name: &str) -> Result<EngineKind> {
    let canonical = match name.trim() {
        "ring" => "ring_zigzag",
        "dummy" | "dummy-head" => "dummy_head",
        other => other,
    };
    Ok(canonical.parse()?)
}

fn build_spec(args: &Args) -> Result<ExperimentSpec> {
    let mut spec = match &args.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec = spec.with_seed(seed);
    }
    if let Some(names) = &args.engines {
        spec.engines = names.iter().map(|n| parse_engine(n)).collect::<Result<_>>()?;
    }
    if let Some(sp) = args.sp {
        spec.sp_values = vec![sp];
    }
    if let Some(layout) = args.layout {
        spec = spec.with_layout(match layout {
            Layout::Naive => LayoutMode::Naive,
            Layout::Zigzag => LayoutMode::Zigzag,
        });
    }
    spec.validate()?;
    Ok(spec)
}

fn check_writable(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let probe = dir.join(".seqpar-write-probe");
    std::fs::write(&probe, b"").with_context(|| format!("output directory {} is not writable", dir.display()))?;
    let _ = std::fs::remove_file(probe);
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    let setup = build_spec(&args).and_then(|spec| check_writable(&args.out).map(|_| spec));
    let spec = match setup {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let command: Command = args.command.into();
    let output = match run_command(command, &spec) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {}: {e}", command.as_str());
            return ExitCode::from(2);
        }
    };
    if let Err(e) = output.write_to(&args.out) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    for line in &output.summary {
        println!("{line}");
    }
    for row in output.failures() {
        println!(
            "FAIL {} sp={} {}: measured {} expected {} tolerance {}",
            row.engine, row.sp, row.metric, row.measured, row.expected, row.tolerance
        );
    }
    let failed = output.failures().count();
    println!(
        "{}: {} of {} checks passed, {} files in {}",
        command.as_str(),
        output.rows.len() - failed,
        output.rows.len(),
        output.files.len(),
        args.out.display()
    );
    ExitCode::from(output.exit_code() as u8)
}
