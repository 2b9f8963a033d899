//! Every training objective evaluated once on a fresh model, gated and
//! ungated, plus the scalar losses on hand-picked inputs.

use infogate::diffcore::{Graph, Tensor};
use infogate::gating::GateConfig;
use infogate::nets::{build_model, NetConfig, Trainable};
use infogate::objectives::{
    bc_gated_loss, forward_dynamics_loss, infonce, inverse_dynamics_loss, neg_cosine,
    simsiam_gated_loss, td_gated_loss, td_residual_loss, Gating, LossBundle, Net, Objective,
    Streams,
};
use infogate::worldgen::{generate_dataset, DatasetSpec, EnvConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut g = Graph::<f64>::new();
    let pos = g.constant(Tensor::new(&[1], vec![0.0])?);
    let neg = g.constant(Tensor::new(&[1, 3], vec![0.0; 3])?);
    let l = infonce(&mut g, pos, neg)?;
    println!("InfoNCE, four equal scores: {:.6} (ln 4)", g.value(l).item());
    let q = g.constant(Tensor::new(&[1], vec![1.0])?);
    let qn = g.constant(Tensor::new(&[1], vec![0.5])?);
    let l = td_residual_loss(&mut g, q, &[0.5], qn, 0.9)?;
    println!("TD, (1 − 0.5 − 0.9·0.5)²: {:.6}", g.value(l).item());
    let p = g.constant(Tensor::new(&[1, 2], vec![1.0, 0.0])?);
    let z = g.constant(Tensor::new(&[1, 2], vec![-3.0, 0.0])?);
    let l = neg_cosine(&mut g, p, z)?;
    println!("negative cosine of opposite vectors: {:.6}", g.value(l).item());

    let data = generate_dataset(&DatasetSpec {
        env: EnvConfig {
            size: 16,
            ..EnvConfig::default()
        },
        episodes: 2,
        ..DatasetSpec::default()
    })?;
    let idx: Vec<usize> = (0..8).collect();
    let batch = data.batch(&idx, None)?;
    let net = NetConfig {
        obs_shape: [3, 16, 16],
        ..NetConfig::desk()
    };
    let gated = GateConfig::default();
    let plain = GateConfig::ungated();
    let model = build_model(&net, gated.location, 0)?;
    for objective in [
        Objective::Inverse,
        Objective::Forward,
        Objective::Td,
        Objective::Bc,
        Objective::Simsiam,
    ] {
        for (name, cfg) in [("gated", &gated), ("ungated", &plain)] {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, Trainable::ALL);
            let net = Net {
                model: &model,
                bound: &bound,
            };
            let gate = Gating::new(cfg, 0.1);
            let mut rngs = Streams::new(0);
            let b: LossBundle = match objective {
                Objective::Inverse => inverse_dynamics_loss(&mut g, net, &batch, &gate, &mut rngs)?,
                Objective::Forward => forward_dynamics_loss(&mut g, net, &batch, &gate, &mut rngs)?,
                Objective::Td => td_gated_loss(&mut g, net, net, &batch, 0.99, &gate, &mut rngs)?,
                Objective::Bc => bc_gated_loss(&mut g, net, &batch, &gate, &mut rngs)?,
                Objective::Simsiam => {
                    simsiam_gated_loss(&mut g, net, &batch.obs_t, &batch.obs_k, &gate, &mut rngs)?
                }
            };
            let d = b.diagnostics;
            println!(
                "{:8} {name:8} task {:.4}  penalty {:.4}  total {:.4}  mean gate {:.3}",
                format!("{objective:?}"),
                d.task,
                d.penalty,
                d.total,
                d.mean_gate
            );
        }
    }
    Ok(())
}
