//! Sparsity weight sweep: final mean gate and probe accuracy per λ.
//!
//! Four λ values, one seed and 1000 steps each (several minutes). `STEPS`
//! and `SEEDS` (comma separated) override.

use infogate::trainer::{inversions, lambda_sweep, TrainConfig};
use infogate::worldgen::{generate_dataset, DatasetSpec, DistractorLevel, EnvConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: usize = std::env::var("STEPS").map_or(Ok(1000), |s| s.parse())?;
    let seeds: Vec<u64> = std::env::var("SEEDS")
        .unwrap_or_else(|_| "0".into())
        .split(',')
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    let env = EnvConfig {
        level: DistractorLevel::Medium,
        ..EnvConfig::default()
    };
    let data = generate_dataset(&DatasetSpec {
        env: env.clone(),
        episodes: 100,
        seed: 1000,
        ..DatasetSpec::default()
    })?;
    let clean = generate_dataset(&DatasetSpec {
        env,
        episodes: 20,
        seed: 2000,
        eval_mode: true,
        ..DatasetSpec::default()
    })?;
    let cfg = TrainConfig {
        steps,
        eval_interval: 0,
        ..TrainConfig::desk()
    };
    let table = lambda_sweep(&cfg, &[0.01, 0.1, 1.0, 10.0], &seeds, &data, &clean)?;
    print!("{}", table.to_csv());
    let medians = table.medians();
    for (l, gate, acc) in &medians {
        println!("λ = {l:<5} median gate {gate:.3}  median accuracy {acc:.3}");
    }
    let gates: Vec<f64> = medians.iter().map(|m| m.1).collect();
    println!("inversions in mean gate: {}", inversions(&gates));
    Ok(())
}
