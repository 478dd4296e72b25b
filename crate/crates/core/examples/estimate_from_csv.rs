//! Round trip through the stacked CSV format, then a bootstrap standard
//! error for the median.

use labelshift::estimators::{estimate, Estimand, EstimatorConfig, EstimatorSpec, OutcomeModelSpec, RatioSpec, SeMethod};
use labelshift::models::{FeatureMap, RatioBase};
use labelshift::sampling::{generate_design, load_csv};

fn main() -> labelshift::Result<()> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("sample.csv");
    generate_design(400, 2)?.sample.write_csv(std::fs::File::create(&path)?, None)?;
    println!("wrote {}", path.display());

    let sample = load_csv(std::fs::File::open(&path)?)?;
    println!("{} units, {} labelled, {} covariates", sample.n(), sample.n1(), sample.dim());

    let spec = EstimatorSpec::Doubly {
        ratio: RatioSpec::Normalize(RatioBase::exp_tilt(-0.7, 1.2)),
        outcome: OutcomeModelSpec::Fit(FeatureMap::Identity),
    };
    let config = EstimatorConfig { se: SeMethod::Bootstrap { replicates: 40, seed: 7 }, ..Default::default() };
    let r = estimate(&spec, &sample, Estimand::median(), &config)?;
    let (lo, hi) = r.ci.unwrap();
    println!("median {:.4}, bootstrap se {:.4}, percentile ci [{lo:.4}, {hi:.4}]", r.theta, r.se.unwrap());
    Ok(())
}
