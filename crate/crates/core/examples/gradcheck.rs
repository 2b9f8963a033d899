//! Finite-difference check of every differentiable primitive plus random
//! composite graphs, in 64- and 32-bit precision.

use infogate::diffcore::gradcheck::{composite_suite, primitive_suite};

fn main() -> infogate::Result<()> {
    let prims = primitive_suite(0)?;
    let comps = composite_suite(0, 100, 8)?;
    for (name, r) in [("primitives", &prims), ("composites", &comps)] {
        println!(
            "{name:>10}: {:3} cases  max rel. err {:.2e} (f64)  {:.2e} (f32)",
            r.cases, r.f64.max_rel_err, r.f32.max_rel_err
        );
    }
    Ok(())
}
