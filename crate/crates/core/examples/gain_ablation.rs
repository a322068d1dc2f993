//! Integral-controller curves for several gain brackets, with bound checks.

use taper::experiments::{
    canonical_system, check_population_bounds, run_gain_ablation, ExperimentConfig, DEFAULT_ABLATION_PAIRS,
};

fn main() -> taper::Result<()> {
    let sys = canonical_system("C")?;
    let cfg = ExperimentConfig { population: 30, ..Default::default() };
    let deltas = [0.0, 0.25, 0.5];
    let curves = run_gain_ablation(&sys, &DEFAULT_ABLATION_PAIRS, &deltas, &cfg)?;

    for (curve, &pair) in curves.iter().zip(&DEFAULT_ABLATION_PAIRS) {
        let b = check_population_bounds(&sys, pair, 0.0, &cfg)?;
        let p = &curve.points[0];
        println!(
            "{:<22} violation {:.4}  dose {:.4}  compliant {:<5}  per-step failures {}/{}",
            curve.protocol, p.mean_violation, p.mean_dose, b.gains_compliant, b.step_failures, b.units
        );
    }
    Ok(())
}
