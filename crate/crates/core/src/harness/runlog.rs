//! Line-delimited JSON run logs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One logged evaluation point of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub step: u64,
    /// Mean loss over the training split; `None` if it was not finite.
    pub train_loss: Option<f64>,
    /// Mean loss over the held-out split.
    pub eval_loss: Option<f64>,
    /// Held-out accuracy; `None` for regression.
    pub eval_accuracy: Option<f64>,
    /// Privacy spent after exactly `step` compositions; `None` if not private.
    pub epsilon: Option<f64>,
    /// Coordinates that hit the `gamma'` floor at this step.
    pub floored_count: u64,
    /// Seconds since training started; only present when enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
    /// Set on the final record of an aborted run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort: Option<String>,
}

pub fn runlog_string(records: &[RunRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_runlog(records: &[RunRecord], path: &Path) -> Result<()> {
    fs::write(path, runlog_string(records)).map_err(|e| Error::io(path, e))
}

pub fn parse_runlog(text: &str, path: &Path) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            msg: format!("{e}; last valid line is {}", i),
        })?;
        out.push(rec);
    }
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: text.lines().count() as u64,
            msg: format!("truncated record; last valid line is {}", text.lines().count() - 1),
        });
    }
    Ok(out)
}

pub fn read_runlog(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_runlog(&text, path)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Flat CSV view of a run log for plotting, with a leading `run` column.
pub fn runlog_csv(runs: &[(String, Vec<RunRecord>)]) -> String {
    let mut s = String::from("run,step,train_loss,eval_loss,eval_accuracy,epsilon,floored_count\n");
    for (name, records) in runs {
        for r in records {
            writeln!(
                s,
                "{name},{},{},{},{},{},{}",
                r.step,
                opt(r.train_loss),
                opt(r.eval_loss),
                opt(r.eval_accuracy),
                opt(r.epsilon),
                r.floored_count
            )
            .unwrap();
        }
    }
    s
}
