//! Train a gate briefly and write its masks as PGM and greyed-out overlays
//! as PPM.

use infogate::cli::images::{render_mask_pgm, render_overlay_ppm};
use infogate::trainer::{train, TrainConfig};
use infogate::worldgen::{generate_dataset, DatasetSpec, DistractorLevel, EnvConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: usize = std::env::var("STEPS").map_or(Ok(2000), |s| s.parse())?;
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
    let shown = generate_dataset(&DatasetSpec {
        env,
        episodes: 1,
        seed: 3000,
        ..DatasetSpec::default()
    })?;
    let cfg = TrainConfig {
        steps,
        eval_interval: 0,
        ..TrainConfig::desk()
    };
    let model = train(&cfg, &data, None)?.model;

    let idx: Vec<usize> = (0..4).collect();
    let batch = shown.batch(&idx, None)?;
    let gates = model.mask.predict(&batch.obs_t)?;
    let [c, h, w] = shown.obs_shape();
    let dir = std::env::temp_dir().join("infogate-masks");
    std::fs::create_dir_all(&dir)?;
    for i in idx {
        let m = &gates.data()[i * h * w..(i + 1) * h * w];
        let obs = &batch.obs_t.data()[i * c * h * w..(i + 1) * c * h * w];
        render_mask_pgm(m, h, w, &dir.join(format!("mask_{i}.pgm")))?;
        render_overlay_ppm(obs, m, h, w, &dir.join(format!("overlay_{i}.ppm")))?;
    }
    println!("wrote 4 masks and overlays to {}", dir.display());
    Ok(())
}
