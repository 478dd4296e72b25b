//! Gauss-Legendre versus trapezoid on the standard normal mass over [-5, 5].

use labelshift::quadrature::QuadratureRule;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn main() -> labelshift::Result<()> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let exact = normal.cdf(5.0) - normal.cdf(-5.0);
    println!("exact mass {exact:.15}");
    for m in [5, 10, 20, 50] {
        let gl = QuadratureRule::gauss_legendre(m, -5.0, 5.0)?.integrate(|y| normal.pdf(y))?;
        let tr = QuadratureRule::trapezoid(m, -5.0, 5.0)?.integrate(|y| normal.pdf(y))?;
        println!("m={m:>3}  gauss-legendre err {:9.2e}  trapezoid err {:9.2e}", gl - exact, tr - exact);
    }

    let two = QuadratureRule::gauss_legendre(2, -1.0, 1.0)?;
    println!("2-point nodes {:?} weights {:?}", two.nodes(), two.weights());
    Ok(())
}
