use flowforge::density::{AnalyticDensity, GridDensity};
use flowforge::metrics::{verify_gronwall, verify_l2_stability, StabilityConfig};
use flowforge::transport::kr_construct;
use flowforge::velocity::{Bump, PerturbedField, StraightLineField, VelocityField};

fn sine_field() -> StraightLineField {
    StraightLineField::new(
        kr_construct(
            GridDensity::from_analytic(&AnalyticDensity::sine(0.5), 256).unwrap(),
            GridDensity::uniform(1, 256).unwrap(),
        )
        .unwrap(),
    )
}

fn quick() -> StabilityConfig {
    StabilityConfig {
        sup_samples: 2000,
        lipschitz_samples: 200,
        density_grid: 128,
        ..StabilityConfig::default()
    }
}

fn perturbed(f: &StraightLineField, epsilon: f64) -> impl VelocityField {
    let bump = Bump::new(vec![1.0], 3.0, 0.4).unwrap();
    PerturbedField::new(f.clone(), bump, epsilon).unwrap()
}

#[test]
fn unperturbed_field_has_zero_deviation() {
    let f = sine_field();
    let source = f.map().source().clone();
    let g = perturbed(&f, 0.0);
    let r = verify_gronwall(&f, &g, &source, &quick()).unwrap();
    assert_eq!(r.check.measured, 0.0);
    assert_eq!(r.check.bound, 0.0);
    assert!(r.check.satisfied);
    let l2 = verify_l2_stability(&f, &g, &quick()).unwrap();
    assert_eq!(l2.check.measured, 0.0);
    assert!(l2.check.satisfied);
}

#[test]
fn flow_deviation_grows_linearly_in_epsilon() {
    let f = sine_field();
    let source = f.map().source().clone();
    let small = verify_gronwall(&f, &perturbed(&f, 1e-3), &source, &quick()).unwrap();
    let large = verify_gronwall(&f, &perturbed(&f, 1e-2), &source, &quick()).unwrap();
    assert!(small.check.satisfied && small.check.slack > 0.0);
    assert!(large.check.satisfied);
    let ratio = large.check.measured / small.check.measured;
    assert!((ratio - 10.0).abs() < 0.5, "ratio {ratio}");
}

#[test]
fn l2_bound_holds_and_scales_quadratically() {
    let f = sine_field();
    let full = verify_l2_stability(&f, &perturbed(&f, 1e-3), &quick()).unwrap();
    let half = verify_l2_stability(&f, &perturbed(&f, 5e-4), &quick()).unwrap();
    assert!(full.check.satisfied, "{full:?}");
    assert!(half.check.satisfied);
    assert!(full.check.measured > 0.0);
    let ratio = full.check.measured / half.check.measured;
    assert!((2.0..=8.0).contains(&ratio), "ratio {ratio}");
    assert!((full.delta / half.delta - 2.0).abs() < 0.05);
}
