use std::time::Instant;

use serde::Serialize;

use crate::error::CliError;

/// One pass/fail check with its measured value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub check: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Verdict {
    pub fn at_most(check: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            check: check.into(),
            value,
            threshold,
            passed: value <= threshold,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} value={} threshold={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.check,
            self.value,
            self.threshold
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Phase {
    pub name: String,
    pub seconds: f64,
}

/// Everything an experiment produces: CSV bodies, phase timings, verdicts
/// and a short human-readable summary.
#[derive(Debug, Default)]
pub struct Report {
    pub files: Vec<(String, Vec<u8>)>,
    pub phases: Vec<Phase>,
    pub verdicts: Vec<Verdict>,
    pub summary: Vec<(String, f64)>,
}

impl Report {
    pub fn timed<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T, CliError>) -> Result<T, CliError> {
        let start = Instant::now();
        let out = f()?;
        self.phases.push(Phase {
            name: name.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    pub fn csv(
        &mut self,
        name: &str,
        wanted: bool,
        write: impl FnOnce(&mut Vec<u8>) -> mfspde::Result<()>,
    ) -> Result<(), CliError> {
        if wanted {
            let mut buf = Vec::new();
            write(&mut buf)?;
            self.files.push((format!("{name}.csv"), buf));
        }
        Ok(())
    }

    pub fn record(&mut self, key: impl Into<String>, value: f64) {
        self.summary.push((key.into(), value));
    }
}
