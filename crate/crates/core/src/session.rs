//! Loading programs and schedules, and running a schedule against the oracle.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::inputs::{generate, LogicalInputs};
use crate::oracle::{oracle_execute, OracleError, Results};
use crate::program::json::{program_from_str, Bindings, JsonError};
use crate::program::Program;
use crate::runtime::{execute_program, CommConfig, ExecMode, RunReport, RuntimeError};
use crate::transform::{apply_schedule, Schedule, ScheduleError};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Parse(String),
    #[error(transparent)]
    Transform(#[from] ScheduleError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

impl From<JsonError> for SessionError {
    fn from(e: JsonError) -> Self {
        SessionError::Parse(e.to_string())
    }
}

fn read(path: &Path) -> Result<String, SessionError> {
    fs::read_to_string(path).map_err(|e| SessionError::Io { path: path.display().to_string(), message: e.to_string() })
}

pub fn load_program(path: &Path, b: &Bindings) -> Result<Program, SessionError> {
    Ok(program_from_str(&read(path)?, b)?)
}

pub fn load_schedule(path: &Path) -> Result<Schedule, SessionError> {
    Schedule::from_str(&read(path)?).map_err(|e| SessionError::Parse(format!("{}: {e}", path.display())))
}

/// Inputs and oracle results of a base program, shared by every schedule of it.
#[derive(Debug, Clone)]
pub struct Reference {
    pub base: Program,
    pub seed: u64,
    pub inputs: LogicalInputs,
    pub expected: Results,
}

impl Reference {
    pub fn new(base: &Program, seed: u64) -> Result<Reference, SessionError> {
        Reference::with_inputs(base, seed, generate(base, seed))
    }

    pub fn with_inputs(base: &Program, seed: u64, inputs: LogicalInputs) -> Result<Reference, SessionError> {
        let expected = oracle_execute(base, &inputs, seed)?;
        Ok(Reference { base: base.clone(), seed, inputs, expected })
    }

    /// Runs an already transformed program and records its deviation.
    pub fn check(&self, transformed: &Program, cfg: &CommConfig, mode: ExecMode) -> Result<RunReport, SessionError> {
        let mut report = execute_program(transformed, cfg, &self.inputs, self.seed, mode)?;
        report.deviation = Some(report.results.deviation_from(&self.expected));
        Ok(report)
    }

    pub fn run(&self, s: &Schedule, cfg: &CommConfig, mode: ExecMode) -> Result<RunReport, SessionError> {
        let t = apply_schedule(&self.base, s)?;
        self.check(&t.program, cfg, mode)
    }
}

/// Applies `s` to `base`, executes it, and compares with the oracle.
pub fn run_schedule(
    base: &Program,
    s: &Schedule,
    cfg: &CommConfig,
    seed: u64,
    mode: ExecMode,
) -> Result<RunReport, SessionError> {
    Reference::new(base, seed)?.run(s, cfg, mode)
}
