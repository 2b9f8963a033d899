//! Adversarial gating: the mask network maximizes the encoder's loss, so it
//! learns to hide the controllable region. A second encoder trained on the
//! reversed mask (`1 − mask`) then sees mostly the agent.

use infogate::gating::{GateConfig, GateMode, LambdaSchedule};
use infogate::trainer::{eval_masks, probe_run, reverse_mask_train, TrainConfig};
use infogate::worldgen::{generate_dataset, DatasetSpec, DistractorLevel, EnvConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: usize = std::env::var("STEPS").map_or(Ok(2000), |s| s.parse())?;
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

    let desk = TrainConfig::desk();
    let cfg = TrainConfig {
        steps,
        gate: GateConfig {
            mode: GateMode::Adversarial,
            // The penalty rewards open gates here; at 0.1 it outweighs the
            // task gradient and the mask stays fully open.
            lambda: LambdaSchedule::constant(0.01),
            ..desk.gate.clone()
        },
        ..desk
    };
    let out = reverse_mask_train(&cfg, &data, Some(&held_out))?;
    let m = eval_masks(&out.model.mask, &held_out, cfg.mask_threshold)?;
    println!(
        "adversarial mask: relevant {:.3}  background {:.3}",
        m.relevant_gate, m.background_gate
    );
    let p = probe_run(&cfg, &out.model, out.reverse.as_ref(), &data, &clean, cfg.seed)?;
    println!(
        "reverse-mask encoder BC probe {:.3} (chance {:.3})",
        p.accuracy, p.chance
    );
    Ok(())
}
