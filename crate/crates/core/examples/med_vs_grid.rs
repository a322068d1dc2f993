//! The greedy minimum effective dose against an exhaustive grid search.

use taper::dynamics::simulate_open_loop;
use taper::models::ImpulseResponse;
use taper::oracles::{brute_force_min_dose, DoseGrid};
use taper::protocols::med_dose;

fn main() -> taper::Result<()> {
    let g = ImpulseResponse::from_values(vec![0.8, 0.1, -0.3, -0.2, -0.1])?;
    let nat = [0.0, -0.6, -0.5, -0.9, -0.4];
    let y_min = [0.0, -0.2, -0.2, -0.2, -0.2];
    let horizon = 4;

    let mut doses = Vec::new();
    for t in 0..horizon {
        doses.push(med_dose(&g, &doses, y_min[t + 1], nat[t + 1])?);
    }
    let y = simulate_open_loop(&g, &doses, &nat)?;
    let grid = DoseGrid::new(2.0, 0.05)?;
    let best = brute_force_min_dose(&g, &nat, &y_min, horizon, grid)?;

    println!("MED doses  {doses:.4?}, total {:.4}", doses.iter().sum::<f64>());
    println!("well-being {y:.4?}");
    println!("grid best  {:.4?}, total {:.4} ({} prefixes)", best.schedule, best.cum_dose, best.visited);
    Ok(())
}
