use mpflow::dynamics::{integrate, FlowConfig, SeparableLoss};
use mpflow::maxent::{self, MaxEntProblem};
use mpflow::measure_algebra::MonomialSpec;
use mpflow::spectrum::{reduced_eigs, second_variation_quadform, second_variation_quadform_entrywise};
use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;

fn symmetric(m: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0f64..2.0, m * m).prop_map(move |v| {
        let b = DMatrix::from_vec(m, m, v);
        (&b + b.transpose()) * 0.5
    })
}

/// `B B^T` with `B` of shape `m x r`.
fn psd(m: usize, r: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.5f64..1.5, m * r).prop_map(move |v| {
        let b = DMatrix::from_vec(m, r, v);
        &b * b.transpose()
    })
}

fn pair() -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>, usize)> {
    (1usize..=8, 1usize..=8).prop_flat_map(|(m, r)| (symmetric(m), psd(m, r), Just(r)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reduced_spectrum_matches_power_sums((a, k, r) in pair()) {
        let m = a.nrows();
        let spec = reduced_eigs(&a, &k).unwrap();
        prop_assert_eq!(spec.values.len(), m);
        prop_assert!(spec.nonzero <= m && spec.nonzero <= spec.rank && spec.rank <= r.min(m));
        prop_assert!(spec.max_residual() <= 1e-8, "{:e}", spec.max_residual());

        // Power sums of the eigenvalues are traces of powers of A K.
        let ak = &a * &k;
        let scale = 1.0 + ak.norm().powi(2);
        let s1: Complex64 = spec.values.iter().sum();
        let s2: Complex64 = spec.values.iter().map(|v| v * v).sum();
        prop_assert!((s1.re - ak.trace()).abs() <= 1e-9 * scale, "{s1} vs {}", ak.trace());
        prop_assert!((s2.re - (&ak * &ak).trace()).abs() <= 1e-9 * scale * scale);
        prop_assert!(spec.values.iter().all(|v| v.im == 0.0));
    }

    #[test]
    fn quadform_is_order_independent(
        (a, k, _) in pair(),
        c in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        let c = &c[..a.nrows()];
        let x = second_variation_quadform(c, &a, &k).unwrap();
        let y = second_variation_quadform_entrywise(c, &a, &k);
        prop_assert_eq!(x.to_bits(), y.to_bits());
    }

    #[test]
    fn maxent_identities_and_round_trip(
        two_d in any::<bool>(),
        l0 in -1.5f64..1.5,
        l1 in -1.5f64..1.5,
        b in 0.5f64..2.0,
    ) {
        let (dim, fam, lambda) = if two_d {
            (2, vec![MonomialSpec::new(vec![0]).unwrap(), MonomialSpec::new(vec![0, 1]).unwrap()], vec![l0, l1])
        } else {
            (1, vec![MonomialSpec::new(vec![0]).unwrap()], vec![l0])
        };
        let m = lambda.len();
        let p = MaxEntProblem::new(dim, fam, vec![0.0; m], b).unwrap();
        let (mom, cov) = p.moments_and_covariance(&lambda).unwrap();
        let h = 1e-5;
        for i in 0..m {
            let (mut lp, mut lm) = (lambda.clone(), lambda.clone());
            lp[i] += h;
            lm[i] -= h;
            let fd = (p.log_partition(&lp).unwrap() - p.log_partition(&lm).unwrap()) / (2.0 * h);
            prop_assert!((fd - mom[i]).abs() <= 1e-6);
            let (mp, mm) = (p.moments(&lp).unwrap(), p.moments(&lm).unwrap());
            for j in 0..m {
                prop_assert!(((mp[j] - mm[j]) / (2.0 * h) - cov[(i, j)]).abs() <= 1e-6);
            }
        }

        let sol = maxent::solve(&p.with_targets(mom).unwrap(), 1e-12, 100).unwrap();
        prop_assert!(sol.converged);
        prop_assert_eq!(sol.lambda.len(), m);
        prop_assert!(sol.condition_number.is_finite() && sol.condition_number >= 1.0);
        for (got, want) in sol.lambda.iter().zip(&lambda) {
            prop_assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
        }
    }
}

#[test]
fn abelian_second_variation_is_constant_along_flow() {
    let loss = SeparableLoss::abelian(3);
    let cfg = FlowConfig { q: 32, d: loss.dim(), dt: 1e-3, steps: 100, record_every: 10, ..FlowConfig::default() };
    let traj = integrate(&loss, &cfg).unwrap();
    let a0 = loss.loss().hessian(&traj.frames[0].rho);
    for f in &traj.frames {
        let drift = (loss.loss().hessian(&f.rho) - &a0).amax();
        assert!(drift <= 1e-10, "t = {}: {drift:e}", f.t);
    }
}
