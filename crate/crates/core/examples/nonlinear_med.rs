//! Minimum effective dose for a saturating response, found by bisection.

use taper::models::GeneralizedResponse;
use taper::protocols::{bisection_iteration_bound, generalized_med_dose};

fn main() -> taper::Result<()> {
    // g(k, u) = a_k * tanh(u): slope between a_k * (1 - tanh(cap)^2) and a_k.
    let a = [1.2, 0.2, -0.5, -0.3];
    let cap: f64 = 3.0;
    let sech2 = 1.0 - cap.tanh().powi(2);
    let lo: Vec<f64> = a.iter().map(|&x| if x > 0.0 { x * sech2 } else { x }).collect();
    let hi: Vec<f64> = a.iter().map(|&x| if x > 0.0 { x } else { x * sech2 }).collect();
    let gr = GeneralizedResponse::new(move |k, u| a[k] * u.tanh(), lo, hi.clone(), cap)?;

    let history = [0.9, 0.7];
    let eps = 1e-8;
    let out = generalized_med_dose(&gr, &history, 0.0, -0.4, eps)?;
    println!(
        "dose {:.8} after {} iterations (bound {}), immediate effect {:.8} for target {:.8}",
        out.dose,
        out.iterations,
        bisection_iteration_bound(cap, eps, hi[0]),
        gr.eval(0, out.dose),
        out.target
    );
    Ok(())
}
