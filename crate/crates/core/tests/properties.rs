//! Randomized invariants across modules.

use moving_frames::cli::{Command, Config, Overrides, Settings};
use moving_frames::grid::{codifferential, exterior_derivative, Field, GridDomain};
use moving_frames::norms::{bmo_seminorm, morrey_norm, BallFamily};
use proptest::prelude::*;

fn trig_field(dom: &std::sync::Arc<GridDomain>, a: f64, b: f64, k: f64) -> Field {
    let pi = std::f64::consts::PI;
    Field::scalar_fn(dom, move |x| {
        a * (pi * k * x[0]).sin() * (pi * x[1]).cos() + b * (pi * x[1]).sin()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn d_squared_vanishes(a in -2.0..2.0f64, b in -2.0..2.0f64, k in 1u32..4) {
        let dom = GridDomain::periodic(2, 16).unwrap();
        let f = trig_field(&dom, a, b, k as f64);
        let dd = exterior_derivative(&exterior_derivative(&f).unwrap()).unwrap();
        prop_assert!(dd.data().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn codifferential_squared_vanishes(a in -2.0..2.0f64, b in -2.0..2.0f64) {
        let dom = GridDomain::periodic(3, 10).unwrap();
        let f = Field::from_fn(&dom, 2, moving_frames::ValueShape::Scalar, |_, x, out| {
            out[0] = a * x[0].sin() + x[2];
            out[1] = b * x[1].cos();
            out[2] = a * b * (x[0] * x[2]).sin();
        }).unwrap();
        let dd = codifferential(&codifferential(&f).unwrap()).unwrap();
        prop_assert!(dd.data().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn morrey_norm_is_homogeneous(c in -5.0..5.0f64) {
        let dom = GridDomain::ball(2, 20).unwrap();
        let f = trig_field(&dom, 1.0, 0.5, 2.0);
        let fam = BallFamily::dyadic(&dom);
        let base = morrey_norm(&f, &fam).unwrap().value;
        let scaled = morrey_norm(&f.scaled(c), &fam).unwrap().value;
        prop_assert!((scaled - c.abs() * base).abs() <= 1e-12 * (1.0 + base));
    }

    #[test]
    fn bmo_ignores_constants(shift in -10.0..10.0f64) {
        let dom = GridDomain::ball(2, 20).unwrap();
        let f = trig_field(&dom, 1.0, 0.5, 1.0);
        let g = Field::scalar_fn(&dom, |_| shift).add(&f).unwrap();
        let fam = BallFamily::dyadic(&dom);
        let a = bmo_seminorm(&f, &fam).unwrap().value;
        let b = bmo_seminorm(&g, &fam).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
    }

    #[test]
    fn numeric_config_values_round_trip(n in 8usize..200, amp in 0.0..10.0f64) {
        let text = format!("# generated\n[grid]\nn = {n}\n\n[map]\namplitude = {amp}\n");
        let s = Settings::resolve(Command::Norms, &Config::parse(&text).unwrap(), Overrides::default()).unwrap();
        prop_assert_eq!(s.usize_in("grid.n", 8, 512).unwrap(), n);
        prop_assert_eq!(s.f64("map.amplitude").unwrap(), amp);
    }

    #[test]
    fn garbage_values_never_panic(v in "[ -~]{0,12}") {
        let text = format!("[grid]\nn = {v}\n");
        if let Ok(c) = Config::parse(&text) {
            let _ = Settings::resolve(Command::Hedgehog, &c, Overrides::default());
        }
    }
}
