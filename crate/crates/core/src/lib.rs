//! Semiparametric estimation of target-population means and quantiles
//! under label (outcome) shift.

/// Serde through the `FromStr`/`Display` string forms.
macro_rules! string_serde {
    ($($t:ty),*) => {$(
        impl TryFrom<String> for $t {
            type Error = $crate::Error;
            fn try_from(s: String) -> $crate::Result<Self> {
                s.parse()
            }
        }
        impl From<$t> for String {
            fn from(v: $t) -> String {
                v.to_string()
            }
        }
    )*};
}
pub(crate) use string_serde;

pub mod cli;
pub mod error;
pub mod estimators;
pub mod fredholm;
pub mod kernels;
pub mod models;
pub mod quadrature;
pub mod sampling;
pub mod simulation;

pub use error::{Error, Result};
