//! Cooperative input gating with multi-step inverse dynamics on the medium
//! level, then a behavior-cloning probe of the encoder.
//!
//! Takes a couple of minutes. `STEPS=600` gives a quick (unconverged) run.

use infogate::trainer::{probe_run, train, TrainConfig};
use infogate::worldgen::{generate_dataset, DatasetSpec, DistractorLevel, EnvConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: usize = std::env::var("STEPS").map_or(Ok(3000), |s| s.parse())?;
    let env = EnvConfig {
        level: DistractorLevel::Medium,
        ..EnvConfig::default()
    };
    let spec = |episodes, seed, eval_mode| DatasetSpec {
        env: env.clone(),
        episodes,
        seed,
        eval_mode,
        ..DatasetSpec::default()
    };
    let data = generate_dataset(&spec(100, 1000, false))?;
    let held_out = generate_dataset(&spec(10, 3000, false))?;
    let clean = generate_dataset(&spec(20, 2000, true))?;

    let cfg = TrainConfig {
        steps,
        eval_interval: steps / 3,
        ..TrainConfig::desk()
    };
    let out = train(&cfg, &data, Some(&held_out))?;
    for r in out.log.steps.iter().step_by(steps / 10) {
        println!(
            "step {:5}  task {:.4}  penalty {:.4}  mean gate {:.3}",
            r.step, r.task, r.penalty, r.mean_gate
        );
    }
    for e in &out.log.evals {
        if let Some(m) = e.masks {
            println!(
                "after {:5}: relevant {:.3}  background {:.3}  selectivity {:.1}  IoU {:.3}",
                e.step, m.relevant_gate, m.background_gate, m.selectivity, m.iou
            );
        }
    }
    let p = probe_run(&cfg, &out.model, None, &data, &clean, cfg.seed)?;
    println!("BC probe accuracy {:.3} (chance {:.3})", p.accuracy, p.chance);
    Ok(())
}
