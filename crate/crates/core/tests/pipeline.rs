use labelshift::estimators::{
    doubly_flexible, estimate, estimate_se, singly_flexible, Estimand, EstimatorConfig, EstimatorSpec,
    OutcomeModelSpec, RatioSpec, RegressorSpec, SeMethod,
};
use labelshift::models::{fit_gaussian_linear, normalize_ratio, FeatureMap, RatioBase};
use labelshift::sampling::{generate_design, load_csv};
use labelshift::simulation::SimConfig;

#[test]
fn spec_route_matches_direct_call() {
    let s = generate_design(300, 4).unwrap().sample;
    let config = EstimatorConfig::default();
    let spec = EstimatorSpec::Doubly {
        ratio: RatioSpec::Normalize(RatioBase::exp_tilt(-0.7, 1.2)),
        outcome: OutcomeModelSpec::Fit(FeatureMap::Misspecified),
    };
    let via_spec = estimate(&spec, &s, Estimand::Mean, &config).unwrap();
    let ratio = normalize_ratio(RatioBase::exp_tilt(-0.7, 1.2), &s).unwrap();
    let model = fit_gaussian_linear(&s, FeatureMap::Misspecified).unwrap().into_model().unwrap();
    let direct = doubly_flexible(&s, &ratio, &model, Estimand::Mean, &config).unwrap();
    assert_eq!(via_spec.theta, direct.theta);
    assert_eq!(via_spec.se, direct.se);

    let regressor = RegressorSpec::default();
    let via_spec = estimate(&EstimatorSpec::Singly { ratio: RatioSpec::Fixed(ratio.clone()), regressor }, &s, Estimand::Mean, &config)
        .unwrap();
    let direct = singly_flexible(&s, &ratio, &regressor.build(&s).unwrap(), Estimand::Mean, &config).unwrap();
    assert_eq!(via_spec.theta, direct.theta);
}

#[test]
fn csv_round_trip_preserves_estimate() {
    let s = generate_design(250, 6).unwrap().sample;
    let mut buf = Vec::new();
    s.write_csv(&mut buf, None).unwrap();
    let back = load_csv(buf.as_slice()).unwrap();
    let spec = EstimatorSpec::ShiftDependent { ratio: RatioSpec::Normalize(RatioBase::exp_tilt(-0.7, 1.2)) };
    let config = EstimatorConfig::default();
    let a = estimate(&spec, &s, Estimand::median(), &config).unwrap();
    let b = estimate(&spec, &back, Estimand::median(), &config).unwrap();
    assert_eq!(a.theta, b.theta);
}

#[test]
fn bootstrap_se_repeatable_and_seed_sensitive() {
    let s = generate_design(200, 2).unwrap().sample;
    let spec = EstimatorSpec::Doubly {
        ratio: RatioSpec::Normalize(RatioBase::exp_tilt(-0.7, 1.2)),
        outcome: OutcomeModelSpec::Fit(FeatureMap::Identity),
    };
    let config = EstimatorConfig::default();
    let boot = |seed| {
        estimate_se(&spec, &s, Estimand::Mean, &config, SeMethod::Bootstrap { replicates: 25, seed }).unwrap().unwrap()
    };
    assert_eq!(boot(3), boot(3));
    assert_ne!(boot(3), boot(4));
}

#[test]
fn sim_config_json_round_trip() {
    let cfg = SimConfig { estimands: vec![Estimand::Mean, Estimand::Quantile(0.25)], ..Default::default() };
    let text = serde_json::to_string(&cfg).unwrap();
    assert!(text.contains("\"quantile:0.25\""));
    let back: SimConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    assert!(serde_json::from_str::<SimConfig>(r#"{"n": 10, "bogus": 1}"#).is_err());
}
