//! Quadrature rules on a finite interval.

use crate::error::{Error, Result};

/// Nodes and positive weights on `[a, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    a: f64,
    b: f64,
}

const NEWTON_TOL: f64 = 1e-15;
const NEWTON_MAX_ITER: usize = 100;

fn check_interval(m: usize, a: f64, b: f64) -> Result<()> {
    if m == 0 {
        return Err(Error::InvalidArgument("quadrature needs at least one node".into()));
    }
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid interval [{a}, {b}]")));
    }
    Ok(())
}

/// Legendre polynomial `P_m(x)` and its derivative by the three-term recurrence.
fn legendre(m: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if m == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=m {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

impl QuadratureRule {
    /// Gauss-Legendre rule with `m` nodes on `[a, b]`, exact for polynomials
    /// of degree `2m - 1`.
    pub fn gauss_legendre(m: usize, a: f64, b: f64) -> Result<Self> {
        check_interval(m, a, b)?;
        let mut xs = vec![0.0; m];
        let mut ws = vec![0.0; m];
        let mf = m as f64;
        for i in 0..m.div_ceil(2) {
            // Chebyshev-like initial guess for the i-th largest root.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (mf + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..NEWTON_MAX_ITER {
                let (p, d) = legendre(m, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() <= NEWTON_TOL {
                    break;
                }
            }
            let (_, d) = legendre(m, x);
            if d.is_finite() {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            xs[i] = -x;
            xs[m - 1 - i] = x;
            ws[i] = w;
            ws[m - 1 - i] = w;
        }
        if m % 2 == 1 {
            xs[m / 2] = 0.0;
        }
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        Ok(Self {
            nodes: xs.iter().map(|x| mid + half * x).collect(),
            weights: ws.iter().map(|w| half * w).collect(),
            a,
            b,
        })
    }

    /// Composite trapezoid rule on `m >= 2` equally spaced points including
    /// both endpoints.
    pub fn trapezoid(m: usize, a: f64, b: f64) -> Result<Self> {
        check_interval(m, a, b)?;
        if m < 2 {
            return Err(Error::InvalidArgument("trapezoid rule needs at least two points".into()));
        }
        let step = (b - a) / (m - 1) as f64;
        let nodes = (0..m).map(|i| if i == m - 1 { b } else { a + step * i as f64 }).collect();
        let weights = (0..m).map(|i| if i == 0 || i == m - 1 { 0.5 * step } else { step }).collect();
        Ok(Self { nodes, weights, a, b })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `sum_i w_i f(t_i)`; a non-finite `f(t_i)` is an error.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64> {
        let mut acc = 0.0;
        for (&t, &w) in self.nodes.iter().zip(&self.weights) {
            let v = f(t);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("integrand at node {t}")));
            }
            acc += w * v;
        }
        Ok(acc)
    }
}

pub fn gauss_legendre(m: usize, a: f64, b: f64) -> Result<QuadratureRule> {
    QuadratureRule::gauss_legendre(m, a, b)
}

pub fn integrate<F: Fn(f64) -> f64>(rule: &QuadratureRule, f: F) -> Result<f64> {
    rule.integrate(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_rule() {
        let r = gauss_legendre(2, -1.0, 1.0).unwrap();
        let s = 1.0 / 3f64.sqrt();
        assert!((r.nodes()[0] + s).abs() < 1e-15 && (r.nodes()[1] - s).abs() < 1e-15);
        assert!((r.weights()[0] - 1.0).abs() < 1e-15 && (r.weights()[1] - 1.0).abs() < 1e-15);
        assert!((r.integrate(|x| x * x).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn one_point_rule() {
        let r = gauss_legendre(1, 0.0, 2.0).unwrap();
        assert_eq!(r.nodes(), &[1.0]);
        assert!((r.weights()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn fifty_points_on_default_interval() {
        let r = gauss_legendre(50, -5.0, 5.0).unwrap();
        assert!((r.integrate(|_| 1.0).unwrap() - 10.0).abs() < 1e-12);
        assert!(r.nodes().windows(2).all(|w| w[0] < w[1]));
        assert!(r.nodes()[0] > -5.0 && r.nodes()[49] < 5.0);
        assert!(r.weights().iter().all(|&w| w > 0.0));
        let odd = gauss_legendre(50, -1.0, 1.0).unwrap().integrate(|x| x.powi(99)).unwrap();
        assert!(odd.abs() < 1e-12);
    }

    #[test]
    fn invalid_arguments() {
        assert!(gauss_legendre(0, 0.0, 1.0).is_err());
        assert!(gauss_legendre(3, 1.0, 1.0).is_err());
        assert!(gauss_legendre(3, 2.0, 1.0).is_err());
        assert!(QuadratureRule::trapezoid(1, 0.0, 1.0).is_err());
    }

    #[test]
    fn non_finite_integrand() {
        let r = gauss_legendre(3, -1.0, 1.0).unwrap();
        assert!(matches!(r.integrate(|x| 1.0 / x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn trapezoid_grid() {
        let r = QuadratureRule::trapezoid(50, 0.0, 19.0).unwrap();
        assert_eq!(r.nodes()[0], 0.0);
        assert_eq!(r.nodes()[49], 19.0);
        assert!((r.integrate(|_| 1.0).unwrap() - 19.0).abs() < 1e-12);
        assert!((r.integrate(|x| 2.0 * x + 1.0).unwrap() - (361.0 + 19.0)).abs() < 1e-10);
    }

    #[test]
    fn high_order_rules_stay_accurate() {
        for m in [100, 200] {
            let r = gauss_legendre(m, -1.0, 1.0).unwrap();
            assert!((r.integrate(|_| 1.0).unwrap() - 2.0).abs() < 1e-12);
            assert!((r.integrate(|x| x.powi(10)).unwrap() - 2.0 / 11.0).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn affine_mapping_consistency(a in -10.0f64..10.0, len in 0.1f64..20.0, m in 1usize..30) {
            let b = a + len;
            let f = |x: f64| (0.3 * x).sin() + x * x * 0.01;
            let direct = gauss_legendre(m, a, b).unwrap().integrate(f).unwrap();
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            let pulled = gauss_legendre(m, -1.0, 1.0).unwrap().integrate(|u| half * f(mid + half * u)).unwrap();
            proptest::prop_assert!((direct - pulled).abs() < 1e-12 * (1.0 + direct.abs()));
        }
    }
}
