use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::MaskReport;
use crate::error::{Error, Result};
use crate::objectives::Diagnostics;

/// First 16 hex digits of the SHA-256 of the canonical JSON form of
/// `value` (keys sorted).
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    // `Value` keeps object keys in a BTreeMap, so this is canonical.
    let canonical = serde_json::to_string(&serde_json::to_value(value)?)?;
    let digest = Sha256::digest(canonical.as_bytes());
    let mut hex = String::with_capacity(16);
    for b in &digest[..8] {
        write!(hex, "{b:02x}").unwrap();
    }
    Ok(hex)
}

pub const MASK_COLUMNS: &str = "step,mean_gate,relevant_gate,background_gate,selectivity,iou";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lambda: f64,
    pub task: f64,
    pub penalty: f64,
    pub total: f64,
    pub mean_gate: f64,
    pub pos_score: f64,
    pub neg_score: f64,
}

impl StepRecord {
    pub fn new(step: usize, lambda: f64, d: &Diagnostics) -> Self {
        Self {
            step,
            lambda,
            task: d.task,
            penalty: d.penalty,
            total: d.total,
            mean_gate: d.mean_gate,
            pos_score: d.pos_score,
            neg_score: d.neg_score,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Number of completed training steps.
    pub step: usize,
    pub masks: Option<MaskReport>,
    pub probe_accuracy: Option<f64>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line<'a> {
    Run { seed: u64, config_hash: &'a str },
    Step(&'a StepRecord),
    Eval(&'a EvalRecord),
}

/// Metrics of one training run.
///
/// As JSONL: a `{"kind":"run","seed","config_hash"}` header, then `step`
/// records (`step, lambda, task, penalty, total, mean_gate, pos_score,
/// neg_score`) and `eval` records (`step, masks, probe_accuracy`), the
/// latter following the step record they were taken after.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub config_hash: String,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl RunLog {
    pub fn push_step(&mut self, rec: StepRecord) -> Result<()> {
        if let Some(last) = self.steps.last() {
            if rec.step <= last.step {
                return Err(Error::Config(format!(
                    "step {} logged after step {}",
                    rec.step, last.step
                )));
            }
        }
        self.steps.push(rec);
        Ok(())
    }

    pub fn last_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }

    /// Record lines only, without the header.
    pub fn body_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let mut evals = self.evals.iter().peekable();
        let mut emit = |line: Line| -> Result<()> {
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
            Ok(())
        };
        while let Some(e) = evals.next_if(|e| e.step == 0) {
            emit(Line::Eval(e))?;
        }
        for s in &self.steps {
            emit(Line::Step(s))?;
            while let Some(e) = evals.next_if(|e| e.step <= s.step + 1) {
                emit(Line::Eval(e))?;
            }
        }
        for e in evals {
            emit(Line::Eval(e))?;
        }
        Ok(out)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&Line::Run {
            seed: self.seed,
            config_hash: &self.config_hash,
        })?;
        out.push('\n');
        out.push_str(&self.body_jsonl()?);
        Ok(out)
    }

    /// One row per evaluation that carries a mask report.
    pub fn masks_csv(&self) -> String {
        let mut out = format!("{MASK_COLUMNS}\n");
        for e in &self.evals {
            if let Some(m) = &e.masks {
                writeln!(
                    out,
                    "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    e.step, m.mean_gate, m.relevant_gate, m.background_gate, m.selectivity, m.iou
                )
                .unwrap();
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}
