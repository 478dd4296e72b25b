//! Nadaraya-Watson smoothing in one and three dimensions on the synthetic design.

use labelshift::kernels::{default_bandwidth_1d, default_bandwidth_multi, nw_regress_1d, nw_regress_multi, KernelSpec};
use labelshift::sampling::generate_design;

fn main() -> labelshift::Result<()> {
    let sample = generate_design(4000, 3)?.sample;
    let mask = sample.indicators().to_vec();
    let y: Vec<f64> = (0..sample.n()).map(|i| sample.outcome(i).unwrap_or(0.0)).collect();

    // E(X3 | Y = y) = y among source units
    let h = default_bandwidth_1d(sample.n1())?;
    let spec = KernelSpec::gaussian(h)?;
    let x3: Vec<f64> = (0..sample.n()).map(|i| sample.x(i)[2]).collect();
    println!("1-d smoother, h = {h:.3}");
    for q in [-1.0, 0.0, 1.0] {
        println!("  E(x3 | y={q:+.1}) ~ {:.3}", nw_regress_1d(&spec, &y, &x3, &mask, q)?);
    }

    // E(Y | X = x) among source units: linear with slope (-0.2, 0.2, 0.4)
    let hx = default_bandwidth_multi(sample.n1(), 3, 2.5)?;
    let spec = KernelSpec::gaussian(hx)?;
    println!("3-d smoother, h = {hx:.3}");
    for x in [[0.0, 0.0, 0.0], [-0.5, 0.5, 1.0]] {
        let fit = nw_regress_multi(&spec, sample.covariates(), &y, &mask, &x)?;
        let truth = -0.2 * x[0] + 0.2 * x[1] + 0.4 * x[2];
        println!("  E(y | x={x:?}) ~ {fit:.3} (linear truth {truth:.3})");
    }
    Ok(())
}
