//! One noisy integral-controller run on a canonical system, with its bounds.

use taper::dynamics::{run_closed_loop, NoiseSpec, Scenario};
use taper::experiments::canonical_system;
use taper::oracles::{check_average_bound, check_step_bound};
use taper::protocols::{ConstraintPath, Gains, TaperPolicy};

fn main() -> taper::Result<()> {
    let sys = canonical_system("A")?;
    let g = sys.kernel()?;
    let gains = Gains::from_g0_fractions(g.head(), 0.5, 1.5)?;
    let delta = 0.1;
    let scenario = Scenario::new(g.clone(), ConstraintPath::Constant(-0.5), sys.taper_steps)
        .with_noise(NoiseSpec::Uniform { half_width: 0.25, seed: 1 })
        .with_warmup(1.0, 60);
    let trace = run_closed_loop(&scenario, &TaperPolicy::integral(gains, delta))?;

    let m = trace.metrics()?;
    println!(
        "{} steps: avg cumulative dose {:.4}, avg violation {:.4}, tapered at {:?}",
        m.horizon, m.avg_cum_dose, m.avg_cum_violation, m.taper_time
    );
    let frame = trace.taper_frame(&g)?;
    let step = check_step_bound(&frame, &g, delta);
    let avg = check_average_bound(&frame, delta, gains, g.head());
    println!("per-step bound: passed {}, min margin {:.3e}", step.passed, step.min_margin);
    println!(
        "prefix average: without final dose {} ({} violations), with final dose {}",
        avg.stated.passed, avg.stated.violations, avg.with_final_dose.passed
    );
    trace.write_csv(std::io::stdout().lock())?;
    Ok(())
}
