//! Run reports: a JSON record plus a plain-text log of the same content.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub name: String,
    pub residual: f64,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Ok,
    NotSolvable,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Stage that raised `error`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    pub config: RunConfig,
    pub stages: Vec<StageRecord>,
    pub checks: Vec<CheckRecord>,
    pub values: BTreeMap<String, f64>,
    pub notes: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(skip)]
    record_timings: bool,
}

impl RunReport {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.mc.seed,
            status: Status::Ok,
            error: None,
            failed_stage: None,
            config: cfg.clone(),
            stages: Vec::new(),
            checks: Vec::new(),
            values: BTreeMap::new(),
            notes: Vec::new(),
            outputs: Vec::new(),
            record_timings: cfg.output.record_timings,
        }
    }

    /// Runs `f` as the stage `name`. Stage names are unique within a report.
    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<(T, f64, usize)>) -> Result<T> {
        assert!(
            self.stages.iter().all(|s| s.name != name),
            "stage `{name}` recorded twice"
        );
        let t = Instant::now();
        match f() {
            Ok((v, residual, iterations)) => {
                let elapsed_s = self.record_timings.then(|| t.elapsed().as_secs_f64());
                self.stages.push(StageRecord {
                    name: name.to_string(),
                    residual,
                    iterations,
                    elapsed_s,
                });
                Ok(v)
            }
            Err(e) => {
                self.failed_stage = Some(name.to_string());
                Err(e)
            }
        }
    }

    /// Records `value <= bound`.
    pub fn check_le(&mut self, name: &str, value: f64, bound: f64) -> bool {
        self.check(name, value <= bound, value, bound)
    }

    pub fn check(&mut self, name: &str, passed: bool, value: f64, bound: f64) -> bool {
        self.checks.push(CheckRecord {
            name: name.to_string(),
            passed,
            value,
            bound,
        });
        passed
    }

    pub fn value(&mut self, name: &str, v: f64) {
        self.values.insert(name.to_string(), v);
    }

    pub fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    pub fn all_checks_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn fail(&mut self, e: &Error) {
        self.status = match e {
            Error::NotSolvable(_) => Status::NotSolvable,
            _ => Status::Failed,
        };
        self.error = Some(e.to_string());
    }

    pub fn exit_code(&self) -> i32 {
        match self.status {
            Status::Ok => 0,
            Status::NotSolvable => 2,
            Status::Failed => 1,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_log(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command {} (version {}, seed {})", self.command, self.version, self.seed);
        for st in &self.stages {
            let _ = write!(s, "stage {:<28} residual {:.3e} iterations {}", st.name, st.residual, st.iterations);
            if let Some(t) = st.elapsed_s {
                let _ = write!(s, " elapsed {t:.3}s");
            }
            s.push('\n');
        }
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{verdict} {:<40} value {:.6e} bound {:.6e}", c.name, c.value, c.bound);
        }
        for (k, v) in &self.values {
            let _ = writeln!(s, "value {k} = {v:.17e}");
        }
        for n in &self.notes {
            let _ = writeln!(s, "note {n}");
        }
        let status = match self.status {
            Status::Ok => "ok",
            Status::NotSolvable => "not-solvable",
            Status::Failed => "failed",
        };
        let _ = write!(s, "status {status}");
        if let Some(e) = &self.error {
            let _ = write!(s, ": {e}");
            if let Some(st) = &self.failed_stage {
                let _ = write!(s, " (stage {st})");
            }
        }
        s.push('\n');
        s
    }

    /// Writes `report.json` and `log.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json())?;
        std::fs::write(dir.join("log.txt"), self.to_log())?;
        Ok(())
    }
}
