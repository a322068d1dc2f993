//! Builds kernels from decaying modes and certifies them.

use taper::models::{certify_lpop, certify_opponent, coarsen, ImpulseResponse, Mode, ModeConditions, DEFAULT_TAIL_TOL};

fn main() -> taper::Result<()> {
    // A fast positive effect and a slower, shallower rebound.
    let modes = [Mode::new(1.0, 0.5)?, Mode::new(-0.4, 0.9)?];
    let g = ImpulseResponse::from_modes(&modes, DEFAULT_TAIL_TOL)?;
    println!("horizon {}, g(0) = {}, dc gain {:.4}", g.horizon(), g.head(), g.dc_gain());
    println!("mode conditions hold: {}", ModeConditions::check(&modes, &g).holds());

    match certify_lpop(&g) {
        Ok(c) => println!("certified: tau0 = {}, rates in [{:.4}, {:.4}]", c.tau0, c.alpha_lo, c.alpha_hi),
        Err(v) => println!("not certified: {v}"),
    }

    let tau0 = certify_opponent(&g).map_err(|v| taper::Error::InvalidKernel(v.to_string()))?.tau0;
    let coarse = coarsen(&g, tau0)?;
    println!("coarsened by {tau0}: first values {:?}", &coarse.values()[..3.min(coarse.horizon())]);

    let positive = ImpulseResponse::from_values(vec![1.0, 0.5, 0.25])?;
    if let Err(v) = certify_lpop(&positive) {
        println!("all-positive kernel: {v}");
    }
    Ok(())
}
