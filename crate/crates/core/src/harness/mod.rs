//! Experiment specs, report rows and the five harness commands.

mod pitfall;
mod reports;
mod suite;
pub mod svg;
mod training;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use pitfall::{cmd_pitfall_demo, toy_gradients, toy_local_gradient};
pub use reports::{cmd_balance_report, cmd_comm_report};
pub use suite::cmd_verify;
pub use training::cmd_train;

use crate::attention::{select_insp, AttentionConfig, EngineKind};
use crate::comm::Scheduler;
use crate::error::{Error, Result};
use crate::model::{synthetic_dpo, synthetic_sft, Dataset, ModelConfig, Task, TrainerConfig};
use crate::partition::{read_batches, read_pairs, LayoutMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Verify,
    Train,
    PitfallDemo,
    CommReport,
    BalanceReport,
}

impl Command {
    pub const ALL: [Command; 5] = [
        Command::Verify,
        Command::Train,
        Command::PitfallDemo,
        Command::CommReport,
        Command::BalanceReport,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::Train => "train",
            Command::PitfallDemo => "pitfall-demo",
            Command::CommReport => "comm-report",
            Command::BalanceReport => "balance-report",
        }
    }
}

impl std::str::FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown command '{s}'")))
    }
}

fn default_engines() -> Vec<EngineKind> {
    EngineKind::ALL.into_iter().filter(|e| *e != EngineKind::Oracle).collect()
}

/// Everything a command needs besides the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    /// Engines under test; the oracle is always run as the reference.
    pub engines: Vec<EngineKind>,
    pub sp_values: Vec<usize>,
    /// Synthetic dataset size when `dataset` is absent.
    pub samples: usize,
    /// JSON-lines file of batches (sft) or preference pairs (dpo).
    pub dataset: Option<PathBuf>,
    pub scheduler: Scheduler,
    pub seed: u64,
    /// Sequence lengths for the parity grid.
    pub parity_lengths: Vec<usize>,
    /// Sequence lengths for the communication report.
    pub comm_lengths: Vec<usize>,
    /// Sequence lengths for the balance report.
    pub balance_lengths: Vec<usize>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            model: ModelConfig::default(),
            trainer: TrainerConfig::default(),
            engines: default_engines(),
            sp_values: vec![2, 4],
            samples: 30,
            dataset: None,
            scheduler: Scheduler::Lockstep,
            seed: 0,
            parity_lengths: vec![32, 64],
            comm_lengths: vec![64, 128, 256],
            balance_lengths: vec![8, 16, 32, 64],
        }
    }
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies a seed to the spec and to the model and trainer inside it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self.trainer.seed = seed;
        self
    }

    pub fn with_layout(mut self, layout: LayoutMode) -> Self {
        self.trainer.layout = Some(layout);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.trainer.validate()?;
        if self.sp_values.is_empty() || self.sp_values.contains(&0) {
            return Err(Error::Config("sp_values must be a non-empty list of positive sizes".into()));
        }
        if self.engines.is_empty() {
            return Err(Error::Config("no engines requested".into()));
        }
        if self.dataset.is_none() && self.samples == 0 {
            return Err(Error::Config("samples must be positive".into()));
        }
        Ok(())
    }

    /// The configured dataset, or a synthetic one for the trainer's task.
    pub fn dataset(&self) -> Result<Dataset> {
        let vocab = self.model.vocab;
        let data = match (&self.dataset, self.trainer.task) {
            (None, Task::Sft) => synthetic_sft(self.samples, vocab, self.seed)?,
            (None, Task::Dpo) => synthetic_dpo(self.samples, vocab, self.seed)?,
            (Some(path), task) => {
                let file = std::fs::File::open(path)
                    .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
                let reader = std::io::BufReader::new(file);
                match task {
                    Task::Sft => Dataset::Sft(read_batches(reader)?),
                    Task::Dpo => Dataset::Dpo(read_pairs(reader)?),
                }
            }
        };
        if data.is_empty() {
            return Err(Error::Config("empty dataset".into()));
        }
        Ok(data)
    }
}

/// Why an engine cannot run a head/sp combination, if it cannot.
pub fn infeasibility(cfg: &AttentionConfig) -> Option<&'static str> {
    match cfg.engine {
        EngineKind::Ulysses if cfg.hs % cfg.sp != 0 => Some("divisibility error expected"),
        EngineKind::Xtuner if select_insp(cfg.hs, cfg.dim, cfg.sp).is_err() => Some("no inner degree expected"),
        EngineKind::Usp if !cfg.pad_heads && cfg.hs % cfg.ulysses_degree != 0 => Some("divisibility error expected"),
        _ => None,
    }
}

/// How a row's measured value is judged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    /// `|measured - expected| <= tolerance`.
    Close,
    /// `measured > expected`.
    Greater,
    /// `expected <= measured <= tolerance`, the tolerance column holding the upper bound.
    Within,
    /// An expected failure occurred (`measured` is 1 when it did).
    ExpectedError,
    /// Reported only.
    Info,
}

impl Check {
    fn as_str(self) -> &'static str {
        match self {
            Check::Close => "close",
            Check::Greater => "greater",
            Check::Within => "within",
            Check::ExpectedError => "expected_error",
            Check::Info => "info",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub engine: String,
    pub sp: usize,
    pub metric: String,
    pub measured: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub check: Check,
    pub pass: bool,
}

impl ReportRow {
    fn new(engine: impl ToString, sp: usize, metric: impl Into<String>, measured: f64, expected: f64, tolerance: f64, check: Check) -> Self {
        let pass = match check {
            Check::Close => (measured - expected).abs() <= tolerance,
            Check::Greater => measured > expected,
            Check::Within => expected <= measured && measured <= tolerance,
            Check::ExpectedError => measured == 1.0,
            Check::Info => true,
        };
        ReportRow {
            engine: engine.to_string(),
            sp,
            metric: metric.into(),
            measured,
            expected,
            tolerance,
            check,
            pass,
        }
    }

    pub fn close(engine: impl ToString, sp: usize, metric: impl Into<String>, measured: f64, expected: f64, tol: f64) -> Self {
        Self::new(engine, sp, metric, measured, expected, tol, Check::Close)
    }

    pub fn greater(engine: impl ToString, sp: usize, metric: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self::new(engine, sp, metric, measured, bound, 0.0, Check::Greater)
    }

    pub fn within(engine: impl ToString, sp: usize, metric: impl Into<String>, measured: f64, lo: f64, hi: f64) -> Self {
        Self::new(engine, sp, metric, measured, lo, hi, Check::Within)
    }

    pub fn expected_error(engine: impl ToString, sp: usize, metric: impl Into<String>, occurred: bool) -> Self {
        Self::new(engine, sp, metric, if occurred { 1.0 } else { 0.0 }, 1.0, 0.0, Check::ExpectedError)
    }

    pub fn info(engine: impl ToString, sp: usize, metric: impl Into<String>, measured: f64) -> Self {
        Self::new(engine, sp, metric, measured, f64::NAN, f64::NAN, Check::Info)
    }

    /// A failing row for an unexpected error.
    pub fn failure(engine: impl ToString, sp: usize, metric: impl Into<String>, err: &Error) -> Self {
        let mut row = Self::new(engine, sp, format!("{}: {err}", metric.into()), f64::NAN, f64::NAN, f64::NAN, Check::Close);
        row.metric = row.metric.replace(',', ";");
        row
    }
}

pub const REPORT_HEADER: &str = "engine,sp,metric,measured,expected,tolerance,check,pass";

fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:e}")
    }
}

pub fn rows_to_csv(rows: &[ReportRow]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.engine,
            r.sp,
            r.metric,
            fmt_num(r.measured),
            fmt_num(r.expected),
            fmt_num(r.tolerance),
            r.check.as_str(),
            r.pass
        );
    }
    s
}

/// Files and report rows produced by one command.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CommandOutput {
    /// `(file name, contents)` in write order.
    pub files: Vec<(String, String)>,
    pub rows: Vec<ReportRow>,
    /// Human-readable lines for the terminal.
    pub summary: Vec<String>,
}

impl CommandOutput {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(|r| !r.pass)
    }

    /// 0 when every row passes, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.all_pass() {
            0
        } else {
            1
        }
    }

    fn push_file(&mut self, name: String, contents: String) {
        self.files.push((name, contents));
    }

    /// One `<command>_<engine>_sp<k>.csv` report per engine/sp pair, in first-seen order.
    fn push_grouped_reports(&mut self, command: Command) {
        let mut keys: Vec<(String, usize)> = Vec::new();
        for r in &self.rows {
            let k = (r.engine.clone(), r.sp);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        for (engine, sp) in keys {
            let rows: Vec<ReportRow> = self
                .rows
                .iter()
                .filter(|r| r.engine == engine && r.sp == sp)
                .cloned()
                .collect();
            self.push_file(csv_name(command, &engine, sp), rows_to_csv(&rows));
        }
    }

    /// Writes every file into `dir`, creating it if needed.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::Io(format!("cannot create {}: {e}", dir.display())))?;
        for (name, contents) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, contents).map_err(|e| Error::Io(format!("cannot write {}: {e}", path.display())))?;
        }
        Ok(())
    }
}

pub fn csv_name(command: Command, engine: &str, sp: usize) -> String {
    format!("{}_{engine}_sp{sp}.csv", command.as_str())
}

pub fn run_command(command: Command, spec: &ExperimentSpec) -> Result<CommandOutput> {
    spec.validate()?;
    match command {
        Command::Verify => cmd_verify(spec),
        Command::Train => cmd_train(spec),
        Command::PitfallDemo => cmd_pitfall_demo(spec),
        Command::CommReport => cmd_comm_report(spec),
        Command::BalanceReport => cmd_balance_report(spec),
    }
}
