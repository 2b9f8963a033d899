use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{eval_masks, probe_run, train, TrainConfig};
use crate::error::{Error, Result};
use crate::gating::{GateLocation, LambdaSchedule, MaskSource};
use crate::worldgen::Dataset;

pub const SWEEP_COLUMNS: &str = "lambda,seed,mean_gate,accuracy,chance";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub seed: u64,
    pub mean_gate: f64,
    pub accuracy: f64,
    pub chance: f64,
}

/// One row per (λ, seed), ordered by λ then seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl SweepTable {
    pub fn lambdas(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.rows {
            if out.last() != Some(&r.lambda) {
                out.push(r.lambda);
            }
        }
        out
    }

    /// Per-λ medians over seeds: `(λ, mean gate, accuracy)`.
    pub fn medians(&self) -> Vec<(f64, f64, f64)> {
        self.lambdas()
            .into_iter()
            .map(|l| {
                let rows = self.rows.iter().filter(|r| r.lambda == l);
                let gate = median(rows.clone().map(|r| r.mean_gate).collect());
                let acc = median(rows.map(|r| r.accuracy).collect());
                (l, gate, acc)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_COLUMNS}\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6}",
                r.lambda, r.seed, r.mean_gate, r.accuracy, r.chance
            )
            .unwrap();
        }
        out
    }
}

/// Counts adjacent increases in a sequence that should not increase.
pub fn inversions(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] > w[0]).count()
}

/// Trains and probes once per (λ, seed) with a constant λ schedule.
///
/// Mean gate is measured on `probe_eval` for learned input gates and taken
/// from the last training step otherwise. The λ = 0 rows are the ungated
/// baseline.
pub fn lambda_sweep(
    base: &TrainConfig,
    lambdas: &[f64],
    seeds: &[u64],
    train_data: &Dataset,
    probe_eval: &Dataset,
) -> Result<SweepTable> {
    if lambdas.len() < 2 {
        return Err(Error::Config("a sweep needs at least two λ values".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one seed".into()));
    }
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut table = SweepTable::default();
    for &lambda in &sorted {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.gate.lambda = LambdaSchedule::constant(lambda);
            if lambda == 0.0 {
                cfg.gate.source = MaskSource::Off;
                cfg.gate.mix_unmasked = false;
            }
            let out = train(&cfg, train_data, None)?;
            let mean_gate = if cfg.gate.source == MaskSource::Learned
                && cfg.gate.location == GateLocation::Input
            {
                eval_masks(&out.model.mask, probe_eval, cfg.mask_threshold)?.mean_gate
            } else {
                out.log.steps.last().map_or(1.0, |s| s.mean_gate)
            };
            let probe = probe_run(&cfg, &out.model, None, train_data, probe_eval, seed)?;
            table.rows.push(SweepRow {
                lambda,
                seed,
                mean_gate,
                accuracy: probe.accuracy,
                chance: probe.chance,
            });
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(lambda: f64, seed: u64, gate: f64) -> SweepRow {
        SweepRow {
            lambda,
            seed,
            mean_gate: gate,
            accuracy: 0.5,
            chance: 0.2,
        }
    }

    #[test]
    fn medians_per_lambda() {
        let t = SweepTable {
            rows: vec![
                row(0.1, 0, 0.9),
                row(0.1, 1, 0.7),
                row(0.1, 2, 0.8),
                row(1.0, 0, 0.2),
                row(1.0, 1, 0.4),
            ],
        };
        let m = t.medians();
        assert_eq!(m.len(), 2);
        assert!((m[0].1 - 0.8).abs() < 1e-12);
        assert!((m[1].1 - 0.3).abs() < 1e-12);
        assert_eq!(inversions(&[0.9, 0.5, 0.6, 0.1]), 1);
    }

    #[test]
    fn csv_has_stable_columns() {
        let t = SweepTable {
            rows: vec![row(0.01, 3, 0.95)],
        };
        assert_eq!(
            t.to_csv(),
            "lambda,seed,mean_gate,accuracy,chance\n0.01,3,0.950000,0.500000,0.200000\n"
        );
    }
}
