//! Kernel weights and Nadaraya-Watson regression, one-dimensional (smoothing
//! in the outcome) and multivariate through a product kernel (smoothing in
//! the covariates).

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel-sum floor below which a Nadaraya-Watson query is rejected.
pub const DENOMINATOR_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    #[default]
    Gaussian,
    /// Compactly supported on `(-1, 1)`.
    Epanechnikov,
}

impl KernelFamily {
    /// Unscaled kernel `K(v)`.
    pub fn eval(self, v: f64) -> f64 {
        match self {
            KernelFamily::Gaussian => (-0.5 * v * v).exp() / (2.0 * PI).sqrt(),
            KernelFamily::Epanechnikov => {
                if v.abs() < 1.0 {
                    0.75 * (1.0 - v * v)
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Epanechnikov => "epanechnikov",
        })
    }
}

impl FromStr for KernelFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(KernelFamily::Gaussian),
            "epanechnikov" => Ok(KernelFamily::Epanechnikov),
            other => Err(Error::InvalidArgument(format!("unknown kernel `{other}`"))),
        }
    }
}

/// Kernel family with a bandwidth `h > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    family: KernelFamily,
    bandwidth: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!("bandwidth must be positive and finite, got {bandwidth}")));
        }
        Ok(Self { family, bandwidth })
    }

    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, bandwidth)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Scaled kernel `K_h(u) = K(u / h) / h`.
    pub fn weight(&self, u: f64) -> f64 {
        self.family.eval(u / self.bandwidth) / self.bandwidth
    }

    /// Product kernel `prod_k K_h(u_k)` with one shared bandwidth.
    pub fn product_weight(&self, u: &[f64]) -> f64 {
        match self.family {
            // One exponential instead of d of them.
            KernelFamily::Gaussian => {
                let h = self.bandwidth;
                let sq: f64 = u.iter().map(|v| v * v).sum::<f64>() / (h * h);
                (-0.5 * sq).exp() / ((2.0 * PI).sqrt() * h).powi(u.len() as i32)
            }
            KernelFamily::Epanechnikov => u.iter().map(|&v| self.weight(v)).product(),
        }
    }
}

/// Kernel weight `K(u/h)/h`.
pub fn kernel_weight(spec: &KernelSpec, u: f64) -> f64 {
    spec.weight(u)
}

fn check_lengths(n: usize, values: usize, mask: usize) -> Result<()> {
    if values != n || mask != n {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {n} centers, {values} values, {mask} mask entries"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no centers".into()));
    }
    Ok(())
}

/// Normalized one-dimensional Nadaraya-Watson weights at `query`; entries
/// with `mask[i] == false` get weight zero.
pub fn nw_weights_1d(spec: &KernelSpec, centers: &[f64], mask: &[bool], query: f64) -> Result<Vec<f64>> {
    check_lengths(centers.len(), centers.len(), mask.len())?;
    let mut w: Vec<f64> =
        centers.iter().zip(mask).map(|(&c, &m)| if m { spec.weight(query - c) } else { 0.0 }).collect();
    normalize(&mut w, &[query])?;
    Ok(w)
}

fn normalize(w: &mut [f64], query: &[f64]) -> Result<()> {
    let total: f64 = w.iter().sum();
    if !(total >= DENOMINATOR_FLOOR) {
        return Err(Error::DegenerateQuery { query: query.to_vec(), denominator: total });
    }
    w.iter_mut().for_each(|v| *v /= total);
    Ok(())
}

/// One-dimensional Nadaraya-Watson estimate at `query`.
pub fn nw_regress_1d(spec: &KernelSpec, centers: &[f64], values: &[f64], mask: &[bool], query: f64) -> Result<f64> {
    check_lengths(centers.len(), values.len(), mask.len())?;
    let (mut num, mut den) = (0.0, 0.0);
    for ((&c, &v), &m) in centers.iter().zip(values).zip(mask) {
        if m {
            let k = spec.weight(query - c);
            num += k * v;
            den += k;
        }
    }
    if !(den >= DENOMINATOR_FLOOR) {
        return Err(Error::DegenerateQuery { query: vec![query], denominator: den });
    }
    Ok(num / den)
}

/// Normalized product-kernel weights; `centers` is row-major with `query.len()` columns.
pub fn nw_weights_multi(spec: &KernelSpec, centers: &[f64], mask: &[bool], query: &[f64]) -> Result<Vec<f64>> {
    let d = query.len();
    if d == 0 || centers.len() != mask.len() * d {
        return Err(Error::InvalidArgument(format!(
            "centers hold {} entries, expected {} rows of dimension {d}",
            centers.len(),
            mask.len()
        )));
    }
    let mut diff = vec![0.0; d];
    let mut w: Vec<f64> = centers
        .chunks_exact(d)
        .zip(mask)
        .map(|(c, &m)| {
            if !m {
                return 0.0;
            }
            for k in 0..d {
                diff[k] = query[k] - c[k];
            }
            spec.product_weight(&diff)
        })
        .collect();
    normalize(&mut w, query)?;
    Ok(w)
}

/// Product-kernel Nadaraya-Watson estimate at a `d`-dimensional query.
pub fn nw_regress_multi(
    spec: &KernelSpec,
    centers: &[f64],
    values: &[f64],
    mask: &[bool],
    query: &[f64],
) -> Result<f64> {
    check_lengths(mask.len(), values.len(), mask.len())?;
    let w = nw_weights_multi(spec, centers, mask, query)?;
    Ok(w.iter().zip(values).map(|(a, b)| a * b).sum())
}

/// Outcome-smoothing bandwidth `n1^(-1/3)`.
pub fn default_bandwidth_1d(n1: usize) -> Result<f64> {
    if n1 == 0 {
        return Err(Error::InvalidArgument("n1 must be positive".into()));
    }
    Ok((n1 as f64).powf(-1.0 / 3.0))
}

/// Covariate-smoothing bandwidth `scale * n1^(-1/(4+d))`.
pub fn default_bandwidth_multi(n1: usize, d: usize, scale: f64) -> Result<f64> {
    if n1 == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!("n1 and d must be positive (n1 = {n1}, d = {d})")));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("bandwidth scale must be positive, got {scale}")));
    }
    Ok(scale * (n1 as f64).powf(-1.0 / (4.0 + d as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(h: f64) -> KernelSpec {
        KernelSpec::gaussian(h).unwrap()
    }

    #[test]
    fn weights() {
        assert!((kernel_weight(&g(1.0), 0.0) - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!((kernel_weight(&g(2.0), 0.0) - 0.199_471_140_200_716_35).abs() < 1e-15);
        let e = KernelSpec::new(KernelFamily::Epanechnikov, 1.0).unwrap();
        assert_eq!(kernel_weight(&e, 2.0), 0.0);
        assert_eq!(kernel_weight(&e, 0.0), 0.75);
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::gaussian(f64::INFINITY).is_err());
    }

    #[test]
    fn nw_1d_examples() {
        let s = g(1.0);
        assert_eq!(nw_regress_1d(&s, &[0.0], &[3.0], &[true], 17.0).unwrap(), 3.0);
        let v = nw_regress_1d(&s, &[-1.0, 1.0], &[0.0, 2.0], &[true, true], 0.0).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        let v = nw_regress_1d(&s, &[0.0, 1.0], &[0.0, 1.0], &[true, true], 0.0).unwrap();
        let e = (-0.5f64).exp();
        assert!((v - e / (1.0 + e)).abs() < 1e-15);
        assert!((v - 0.37754).abs() < 1e-5);
    }

    #[test]
    fn nw_mask_excludes_points() {
        let v = nw_regress_1d(&g(1.0), &[0.0, 5.0], &[1.0, 100.0], &[true, false], 5.0).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn nw_degenerate_query() {
        let e = KernelSpec::new(KernelFamily::Epanechnikov, 0.5).unwrap();
        let err = nw_regress_1d(&e, &[0.0, 1.0], &[0.0, 1.0], &[true, true], 10.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateQuery { .. }));
        assert!(nw_regress_1d(&g(1.0), &[0.0], &[1.0], &[false], 0.0).is_err());
    }

    #[test]
    fn nw_multi_examples() {
        let s = g(1.0);
        let v = nw_regress_multi(&s, &[0.0, 0.0, 1.0, 1.0], &[0.0, 1.0], &[true, true], &[0.0, 0.0]).unwrap();
        let e = (-1.0f64).exp();
        assert!((v - e / (1.0 + e)).abs() < 1e-15);
        assert!((v - 0.26894).abs() < 1e-5);
        let c = [0.3, -1.0, 2.0];
        let vals = [0.2, 0.9, -0.4];
        let m = [true, true, true];
        let a = nw_regress_multi(&s, &c, &vals, &m, &[0.7]).unwrap();
        let b = nw_regress_1d(&s, &c, &vals, &m, 0.7).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn bandwidth_rules() {
        assert!((default_bandwidth_1d(1000).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(default_bandwidth_1d(1).unwrap(), 1.0);
        assert!((default_bandwidth_1d(125).unwrap() - 0.2).abs() < 1e-12);
        assert!((default_bandwidth_multi(128, 3, 2.5).unwrap() - 1.25).abs() < 1e-12);
        assert_eq!(default_bandwidth_multi(1, 5, 1.0).unwrap(), 1.0);
        assert!(default_bandwidth_multi(16, 0, 1.0).is_err());
    }

    #[test]
    fn huge_bandwidth_gives_masked_mean() {
        let c = [0.0, 1.0, 2.5, -3.0];
        let v = [1.0, 2.0, 4.0, 100.0];
        let m = [true, true, true, false];
        let out = nw_regress_1d(&g(1e6), &c, &v, &m, 0.3).unwrap();
        assert!((out - 7.0 / 3.0).abs() < 1e-6);
    }

    fn pts() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
        (1usize..12).prop_flat_map(|n| {
            (
                proptest::collection::vec(-3.0f64..3.0, n),
                proptest::collection::vec(-10.0f64..10.0, n),
                -3.0f64..3.0,
            )
        })
    }

    proptest! {
        #[test]
        fn convex_combination((c, v, q) in pts(), h in 0.2f64..3.0) {
            let m = vec![true; c.len()];
            let out = nw_regress_1d(&g(h), &c, &v, &m, q).unwrap();
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out >= lo - 1e-9 && out <= hi + 1e-9);
        }

        #[test]
        fn shift_equivariance((c, v, q) in pts(), shift in -5.0f64..5.0) {
            let m = vec![true; c.len()];
            let s = g(0.7);
            let base = nw_regress_1d(&s, &c, &v, &m, q).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let out = nw_regress_1d(&s, &c, &shifted, &m, q).unwrap();
            prop_assert!((out - base - shift).abs() < 1e-9);
        }

        #[test]
        fn product_kernel_reduces_with_constant_coordinates((c, v, q) in pts(), fixed in -2.0f64..2.0) {
            let m = vec![true; c.len()];
            let s = g(0.9);
            let centers: Vec<f64> = c.iter().flat_map(|&ci| [fixed, ci]).collect();
            let a = nw_regress_multi(&s, &centers, &v, &m, &[fixed, q]).unwrap();
            let b = nw_regress_1d(&s, &c, &v, &m, q).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
