//! Dose against violation for the baselines, the integral controller and MED.

use taper::experiments::{canonical_system, run_tradeoff, write_summary_csv, ExperimentConfig, TradeoffSpec};

fn main() -> taper::Result<()> {
    let sys = canonical_system("B")?;
    let cfg = ExperimentConfig { population: 40, ..Default::default() };
    let report = run_tradeoff(&sys, &TradeoffSpec::default(), &cfg)?;

    for curve in report.curves.iter().chain([&report.med]) {
        println!("{}", curve.protocol);
        for p in &curve.points {
            println!("  {:>8.3}  violation {:.4} ± {:.4}  dose {:.4} ± {:.4}", p.param, p.mean_violation, p.se_violation, p.mean_dose, p.se_dose);
        }
    }
    println!("baselines not below-left of integral: {}", report.baselines_not_below_left.holds());
    println!("MED over integral: {}", report.med_over_integral.holds());
    write_summary_csv(std::io::stdout().lock(), report.curves.iter())?;
    Ok(())
}
