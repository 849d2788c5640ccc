use mpflow::abelian_task::{AbelianTask, ParticleSystem, Role};
use mpflow::acceptance::gradient_discrepancy;
use mpflow::potentials::{decomposed_loss, eval_mps, AbelianMpVector};
use num_complex::Complex64;
use proptest::prelude::*;

fn scale_roles(ps: &ParticleSystem, ta: f64, tb: f64, tc: f64) -> ParticleSystem {
    let mut out = ps.clone();
    for j in 0..ps.q() {
        for k in 1..ps.n() {
            out.set_z(j, Role::A, k, ps.z(j, Role::A, k) * ta);
            out.set_z(j, Role::B, k, ps.z(j, Role::B, k) * tb);
            out.set_z(j, Role::C, k, ps.z(j, Role::C, k) * tc);
        }
    }
    out
}

fn close(a: Complex64, b: Complex64, rel: f64) -> bool {
    (a - b).norm() <= rel * (1.0 + a.norm().max(b.norm()))
}

#[test]
fn gradient_matches_finite_differences_on_fixed_grid() {
    for n in [3, 5] {
        let task = AbelianTask::mean_over_pairs(n).unwrap();
        for q in [2, 8] {
            for seed in 0..20 {
                let ps = ParticleSystem::random(n, q, 1.0, seed).unwrap();
                let err = gradient_discrepancy(&task, &ps, 1e-5).unwrap();
                assert!(err <= 1e-6, "n={n} q={q} seed={seed}: {err:e}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradient_matches_finite_differences(
        n in prop::sample::select(vec![3usize, 4, 5, 7]),
        q in 1usize..=6,
        std in 0.2f64..1.5,
        seed in any::<u64>(),
    ) {
        let task = AbelianTask::mean_over_pairs(n).unwrap();
        let ps = ParticleSystem::random(n, q, std, seed).unwrap();
        let err = gradient_discrepancy(&task, &ps, 1e-5).unwrap();
        prop_assert!(err <= 1e-6, "{err:e}");
    }

    #[test]
    fn relabeling_particles_permutes_gradients(
        n in 3usize..=6,
        q in 2usize..=8,
        seed in any::<u64>(),
        shuffle in any::<u64>(),
    ) {
        let task = AbelianTask::mean_over_pairs(n).unwrap();
        let ps = ParticleSystem::random(n, q, 0.8, seed).unwrap();
        let mut perm: Vec<usize> = (0..q).collect();
        perm.rotate_left((shuffle % q as u64) as usize);
        perm.swap(0, q - 1);
        let moved = ps.permuted(&perm);

        let (l0, l1) = (task.direct_loss(&ps).unwrap(), task.direct_loss(&moved).unwrap());
        prop_assert!((l0 - l1).abs() <= 1e-12 * (1.0 + l0.abs()));

        let g0 = task.loss_gradient(&ps).unwrap();
        let g1 = task.loss_gradient(&moved).unwrap();
        let w = 3 * (n - 1);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..w {
                prop_assert!(close(g1[dst * w + c], g0[src * w + c], 1e-12));
            }
        }
    }

    #[test]
    fn mps_are_permutation_invariant_and_scale_with_role_a(
        n in 3usize..=6,
        q in 1usize..=8,
        seed in any::<u64>(),
        k1 in 1usize..6,
        t in -3.0f64..3.0,
    ) {
        let k1 = 1 + (k1 - 1) % (n - 1);
        let ps = ParticleSystem::random(n, q, 1.0, seed).unwrap();
        let base = eval_mps(&ps);

        let perm: Vec<usize> = (0..q).rev().collect();
        let moved = eval_mps(&ps.permuted(&perm));
        for (a, b) in base.iter().zip(moved.iter()) {
            prop_assert!(close(*a, *b, 1e-12));
        }

        let mut scaled = ps.clone();
        for j in 0..q {
            scaled.set_z(j, Role::A, k1, ps.z(j, Role::A, k1) * t);
        }
        let s = eval_mps(&scaled);
        for k2 in 1..n {
            for k in 1..n {
                prop_assert!(close(s.rho3(k1, k2, k), base.rho3(k1, k2, k) * t, 1e-12));
                prop_assert_eq!(s.rho_p(1, k1, k2, k), base.rho_p(1, k1, k2, k));
            }
        }
    }

    #[test]
    fn decomposed_loss_sees_parameters_only_through_mps(
        n in 3usize..=7,
        q in 1usize..=8,
        seed in any::<u64>(),
    ) {
        // Powers of two rescale exactly, so the MPs agree bit for bit while
        // the parameters differ.
        let ps = ParticleSystem::random(n, q, 1.0, seed).unwrap();
        let other = scale_roles(&ps, 2.0, 2.0, 0.25);
        let (m0, m1) = (eval_mps(&ps), eval_mps(&other));
        prop_assert_eq!(&m0, &m1);
        prop_assert_eq!(decomposed_loss(&m0).to_bits(), decomposed_loss(&m1).to_bits());

        let flat = AbelianMpVector::from_flat(n, &m0.as_flat()).unwrap();
        prop_assert_eq!(decomposed_loss(&flat).to_bits(), decomposed_loss(&m0).to_bits());
    }
}
