//! Landweber iteration on a small well-conditioned system, compared with the
//! least-squares solution from an SVD.

use labelshift::fredholm::{landweber_solve, DiscretizedFredholm, SolverConfig};
use nalgebra::{DMatrix, DVector};

fn main() -> labelshift::Result<()> {
    let phi = DMatrix::from_fn(8, 5, |i, j| 1.0 / (1.0 + i as f64 + j as f64) + if i == j { 1.0 } else { 0.0 });
    let target: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
    let problem = DiscretizedFredholm::new(phi.clone(), target.clone(), vec![1.0; 5])?
        .with_config(SolverConfig { tol: 1e-24, ..Default::default() });

    let (lo, hi) = problem.spectral_range();
    println!("spectrum of the normal operator: [{lo:.4}, {hi:.4}]");
    let (a, diag) = landweber_solve(&problem, &[0.0; 5])?;
    let lstsq = phi.svd(true, true).solve(&DVector::from_vec(target), 1e-12).unwrap();
    println!("iterations {} (converged: {}), residual {:.3e}", diag.iterations, diag.converged, diag.final_residual_norm);
    for (j, (x, z)) in a.iter().zip(lstsq.iter()).enumerate() {
        println!("  a[{j}] = {x:+.8}   least squares {z:+.8}");
    }
    Ok(())
}
