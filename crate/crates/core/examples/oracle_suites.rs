//! Small runs of the randomized verification suites.

use taper::oracles::suites::{bisection_suite, controller_suite, med_oracle_suite, monotone_taper_suite};
use taper::oracles::DoseGrid;
use taper::protocols::DEFAULT_BISECTION_EPS;

fn main() -> taper::Result<()> {
    let seed = 3;
    let c = controller_suite(200, seed)?;
    println!(
        "controller: {} runs, step failures {}, prefix-average failures {} without and {} with the final dose",
        c.runs, c.step_failures, c.stated_average_failures, c.corrected_average_failures
    );
    let t = monotone_taper_suite(20, seed)?;
    println!("monotone taper: {} systems, passed {}", t.systems, t.passed());
    let m = med_oracle_suite(20, seed, DoseGrid::default(), 3)?;
    println!("MED oracle: {} instances, passed {}, max excess {:.3e}", m.instances, m.passed(), m.max_excess);
    let b = bisection_suite(20, seed, DEFAULT_BISECTION_EPS)?;
    println!("bisection: passed {}, linear max error {:.3e}", b.passed(), b.linear_max_error);
    Ok(())
}
