//! The gate blend at its endpoints, the sparsity penalty, λ schedules and
//! the random-mask baseline.

use infogate::diffcore::{Graph, Tensor};
use infogate::gating::{
    gate_input, noise_tensor, random_mask, sparsity_penalty, LambdaSchedule, NoiseSpec,
};
use infogate::rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut r = rng::stream(0, 0);
    let x = Tensor::from_fn(&[1, 3, 4, 4], |i| (i % 7) as f32 / 7.0);
    let eps = noise_tensor::<f32>(NoiseSpec::INPUT, x.shape(), &mut r);
    for (name, m) in [("open", 1.0f32), ("closed", 0.0), ("half", 0.5)] {
        let mut g = Graph::new();
        let (xv, ev) = (g.constant(x.clone()), g.constant(eps.clone()));
        let mv = g.constant(Tensor::full(&[1, 1, 4, 4], m));
        let out = gate_input(&mut g, xv, mv, ev)?;
        let out = g.value(out);
        println!(
            "{name:6} gate: equals input {}, equals noise {}",
            out == &x,
            out == &eps
        );
    }

    let mask = random_mask::<f32>(&[2, 1, 8, 8], 0.3, &mut r)?;
    let mut g = Graph::new();
    let mv = g.constant(mask);
    let p = sparsity_penalty(&mut g, mv);
    println!("random mask (keep 0.3) penalty {:.3}", g.value(p).item());

    let ramp = LambdaSchedule::LinearRamp {
        start: 0.1,
        end: 3.0,
        steps: 2000,
    };
    for step in [0, 500, 1000, 2000, 5000] {
        println!("λ at step {step:4}: {:.3}", ramp.lambda_at(step));
    }
    Ok(())
}
