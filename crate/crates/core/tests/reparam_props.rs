use std::f64::consts::FRAC_PI_2;

use proptest::prelude::*;
use wcomp::reparam::{
    psi, psi_grad_ab, psi_inverse, psi_prime, weight_norm_materialize, ReparamKind, ReparamParams,
};
use wcomp::{Error, Tensor};

fn fixed(a: f64, b: f64) -> ReparamParams {
    ReparamParams::fixed(a, b)
}

fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-6;
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn close(x: f64, y: f64, tol: f64) -> bool {
    (x - y).abs() <= tol * x.abs().max(y.abs()).max(1e-3)
}

proptest! {
    #[test]
    fn arctan_is_odd(v in -1e3f64..1e3, a in 0.5f64..2.0, b in 0.5f64..2.0) {
        let k = ReparamKind::Arctan;
        prop_assert_eq!(psi(k, &fixed(a, b), -v).unwrap(), -psi(k, &fixed(a, b), v).unwrap());
    }

    #[test]
    fn arctan_is_strictly_bounded(e in -300i32..300, sign in prop::bool::ANY, a in 0.05f64..3.0, b in 0.05f64..3.0) {
        let v = if sign { 10f64.powi(e) } else { -(10f64.powi(e)) };
        let w = psi(ReparamKind::Arctan, &fixed(a, b), v).unwrap();
        prop_assert!(w.abs() < a * FRAC_PI_2, "{} reaches the bound {}", w, a * FRAC_PI_2);
    }

    #[test]
    fn arctan_is_monotone(v in -50f64..50.0, dv in 1e-6f64..5.0, a in 0.5f64..1.0, b in 0.5f64..1.0) {
        let p = fixed(a, b);
        let k = ReparamKind::Arctan;
        prop_assert!(psi(k, &p, v + dv).unwrap() > psi(k, &p, v).unwrap());
        prop_assert!(psi_prime(k, &p, v).unwrap() > 0.0);
    }

    #[test]
    fn arctan_inverse_roundtrip(t in -0.999f64..0.999, a in 0.5f64..1.0, b in 0.5f64..1.0) {
        let p = fixed(a, b);
        let k = ReparamKind::Arctan;
        let w = t * a * FRAC_PI_2;
        let v = psi_inverse(k, &p, w).unwrap();
        let back = psi(k, &p, v).unwrap();
        prop_assert!((back - w).abs() <= 1e-12 * w.abs().max(1.0));
    }

    #[test]
    fn arctan_derivatives_match_differences(v in -5f64..5.0, a in 0.5f64..1.0, b in 0.5f64..1.0) {
        let k = ReparamKind::Arctan;
        let d = psi_prime(k, &fixed(a, b), v).unwrap();
        prop_assert!(close(d, central(|x| a * (x / b).atan(), v), 1e-6));
        let (da, db) = psi_grad_ab(k, &fixed(a, b), v).unwrap();
        prop_assert!(close(da, central(|x| x * (v / b).atan(), a), 1e-6));
        prop_assert!(close(db, central(|x| a * (v / x).atan(), b), 1e-6));
    }

    #[test]
    fn other_kinds_roundtrip_and_differentiate(v in -1.5f64..1.5, a in 0.5f64..1.0, b in 0.5f64..1.0, alpha in 1.0f64..3.0) {
        let p = fixed(a, b);
        for k in [ReparamKind::Arcsinh, ReparamKind::Erf, ReparamKind::Powerprop { alpha }, ReparamKind::Identity] {
            let w = psi(k, &p, v).unwrap();
            let d = psi_prime(k, &p, v).unwrap();
            prop_assert!(close(d, central(|x| psi(k, &p, x).unwrap(), v), 1e-5), "{k}: {d}");
            // Powerprop flattens at zero, so its inverse is ill-conditioned there.
            if !matches!(k, ReparamKind::Powerprop { .. }) || v.abs() > 0.1 {
                let back = psi_inverse(k, &p, w).unwrap();
                prop_assert!((back - v).abs() < 1e-8, "{k}: {back} vs {v}");
            }
        }
    }

    #[test]
    fn weight_norm_rows_have_gain_norm(rows in prop::collection::vec(prop::collection::vec(-3f64..3.0, 4), 1..6)) {
        prop_assume!(rows.iter().all(|r| r.iter().any(|x| x.abs() > 1e-3)));
        let n = rows.len();
        let v = Tensor::new(vec![n, 4], rows.concat()).unwrap();
        let g: Vec<f64> = (0..n).map(|i| 0.5 + i as f64).collect();
        let w = weight_norm_materialize(&v, &g).unwrap();
        for (r, row) in w.data().chunks(4).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - g[r]).abs() < 1e-12);
        }
    }
}

#[test]
fn inverse_outside_image_is_a_domain_error() {
    let p = fixed(0.8, 1.0);
    for w in [0.8 * FRAC_PI_2, 2.0, -1.3, f64::INFINITY] {
        assert!(matches!(
            psi_inverse(ReparamKind::Arctan, &p, w),
            Err(Error::Domain { .. } | Error::InvalidInput(_))
        ));
    }
    assert!(matches!(psi_inverse(ReparamKind::Erf, &p, 0.8), Err(Error::Domain { .. })));
}

#[test]
fn invalid_parameters_are_rejected() {
    for (a, b) in [(0.0, 1.0), (1.0, -1.0), (f64::NAN, 1.0), (1.0, f64::INFINITY)] {
        assert!(psi(ReparamKind::Arctan, &fixed(a, b), 0.3).is_err());
    }
    assert!(psi(ReparamKind::Arctan, &fixed(1.0, 1.0), f64::NAN).is_err());
    assert!(matches!(
        psi(ReparamKind::WeightNorm, &fixed(1.0, 1.0), 0.3),
        Err(Error::UnsupportedKind { .. })
    ));
}

#[test]
fn zero_row_has_no_direction() {
    let v = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    assert!(matches!(
        weight_norm_materialize(&v, &[1.0, 1.0]),
        Err(Error::DegenerateDirection { row: 1 })
    ));
}
