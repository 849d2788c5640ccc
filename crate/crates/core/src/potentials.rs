//! Monomial potentials of the Abelian task and the exact rewrite of the
//! direct loss in terms of them:
//!
//! `H = P * sum_{k != 0} l_k + (n-1)/n` with
//! `l_k = -2 Re rho_kkk + sum_{k1,k2} |rho_{k1 k2 k}|^2
//!        + 1/4 |sum_p sum_k' rho_{p,k',-k',k}|^2
//!        + 1/4 sum_{m != 0} sum_p |sum_k' rho_{p,k',m-k',k}|^2`.
//!
//! All frequency indices are nonzero; a term whose wrapped index is 0 is
//! dropped.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::abelian_task::{AbelianTask, ParticleSystem, Role};
use crate::error::{Error, Result};
use crate::group_fourier::{FourierBasis, GroupSpec};
use crate::rng;

/// `rho_{k1 k2 k}` (shape (n-1)^3) and `rho_{p k1 k2 k}` for `p in {a, b}`
/// (shape 2 x (n-1)^3), indices over nonzero frequencies.
#[derive(Clone, Debug, PartialEq)]
pub struct AbelianMpVector {
    n: usize,
    rho3: Vec<Complex64>,
    rho_p: Vec<Complex64>,
}

impl AbelianMpVector {
    pub fn zeros(n: usize) -> Self {
        let m = (n - 1).pow(3);
        Self {
            n,
            rho3: vec![Complex64::default(); m],
            rho_p: vec![Complex64::default(); 2 * m],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx3(&self, k1: usize, k2: usize, k: usize) -> usize {
        let w = self.n - 1;
        ((k1 - 1) * w + (k2 - 1)) * w + (k - 1)
    }

    #[inline]
    fn idx_p(&self, p: usize, k1: usize, k2: usize, k: usize) -> usize {
        p * (self.n - 1).pow(3) + self.idx3(k1, k2, k)
    }

    pub fn rho3(&self, k1: usize, k2: usize, k: usize) -> Complex64 {
        self.rho3[self.idx3(k1, k2, k)]
    }

    /// `p = 0` for role a, `p = 1` for role b.
    pub fn rho_p(&self, p: usize, k1: usize, k2: usize, k: usize) -> Complex64 {
        self.rho_p[self.idx_p(p, k1, k2, k)]
    }

    pub fn set_rho3(&mut self, k1: usize, k2: usize, k: usize, v: Complex64) {
        let i = self.idx3(k1, k2, k);
        self.rho3[i] = v;
    }

    pub fn set_rho_p(&mut self, p: usize, k1: usize, k2: usize, k: usize, v: Complex64) {
        let i = self.idx_p(p, k1, k2, k);
        self.rho_p[i] = v;
    }

    /// Number of complex coordinates, `3 (n-1)^3`.
    pub fn len(&self) -> usize {
        self.rho3.len() + self.rho_p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All coordinates, `rho3` block first.
    pub fn iter(&self) -> impl Iterator<Item = &Complex64> {
        self.rho3.iter().chain(self.rho_p.iter())
    }

    pub fn as_flat(&self) -> Vec<Complex64> {
        self.iter().copied().collect()
    }

    pub fn from_flat(n: usize, flat: &[Complex64]) -> Result<Self> {
        let mut out = Self::zeros(n);
        if flat.len() != out.len() {
            return Err(Error::LengthMismatch {
                what: "MP vector",
                expected: out.len(),
                got: flat.len(),
            });
        }
        let m = out.rho3.len();
        out.rho3.copy_from_slice(&flat[..m]);
        out.rho_p.copy_from_slice(&flat[m..]);
        Ok(out)
    }

    /// Label of flat coordinate `i`, e.g. `rho[1,2,3]` or `rho_a[1,4,2]`.
    pub fn label(&self, i: usize) -> String {
        let w = self.n - 1;
        let m = w.pow(3);
        let (prefix, r) = if i < m {
            ("rho", i)
        } else if i < 2 * m {
            ("rho_a", i - m)
        } else {
            ("rho_b", i - 2 * m)
        };
        let k = r % w + 1;
        let k2 = (r / w) % w + 1;
        let k1 = r / (w * w) + 1;
        format!("{prefix}[{k1},{k2},{k}]")
    }

    pub fn to_json(&self) -> MpSnapshot {
        MpSnapshot {
            n: self.n,
            entries: self
                .iter()
                .enumerate()
                .map(|(i, v)| MpEntry {
                    label: self.label(i),
                    re: v.re,
                    im: v.im,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MpEntry {
    pub label: String,
    pub re: f64,
    pub im: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MpSnapshot {
    pub n: usize,
    pub entries: Vec<MpEntry>,
}

/// Empirical MPs of a particle system.
pub fn eval_mps(ps: &ParticleSystem) -> AbelianMpVector {
    let n = ps.n();
    let mut out = AbelianMpVector::zeros(n);
    let inv_q = 1.0 / ps.q() as f64;
    for j in 0..ps.q() {
        for k1 in 1..n {
            let a1 = ps.z(j, Role::A, k1);
            let b1 = ps.z(j, Role::B, k1);
            for k2 in 1..n {
                let ab = a1 * ps.z(j, Role::B, k2);
                let aa = a1 * ps.z(j, Role::A, k2);
                let bb = b1 * ps.z(j, Role::B, k2);
                for k in 1..n {
                    let c = ps.z(j, Role::C, k);
                    let i = out.idx3(k1, k2, k);
                    out.rho3[i] += ab * c;
                    let ia = out.idx_p(0, k1, k2, k);
                    out.rho_p[ia] += aa * c;
                    let ib = out.idx_p(1, k1, k2, k);
                    out.rho_p[ib] += bb * c;
                }
            }
        }
    }
    out.rho3.iter_mut().for_each(|v| *v *= inv_q);
    out.rho_p.iter_mut().for_each(|v| *v *= inv_q);
    out
}

/// Weight on `sum_k l_k`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prefactor {
    /// `1/n`; the value consistent with mean-over-pairs normalization.
    #[default]
    GroupOrder,
    /// `1/(n-1)`; kept to demonstrate that it does not reproduce the direct loss.
    GroupOrderMinusOne,
}

impl Prefactor {
    pub fn value(self, n: usize) -> f64 {
        match self {
            Prefactor::GroupOrder => 1.0 / n as f64,
            Prefactor::GroupOrderMinusOne => 1.0 / (n - 1) as f64,
        }
    }
}

/// Index-sum helpers shared by the loss and its gradient.
struct Sums {
    /// `sum_p sum_k' rho_{p,k',-k',k}` per k.
    neg: Vec<Complex64>,
    /// `sum_k' rho_{p,k',m-k',k}` per (p, m, k), m nonzero.
    shifted: Vec<Complex64>,
}

fn index_sums(mps: &AbelianMpVector) -> Sums {
    let n = mps.n;
    let spec = GroupSpec::new(n).expect("n >= 2");
    let w = n - 1;
    let mut neg = vec![Complex64::default(); w];
    let mut shifted = vec![Complex64::default(); 2 * w * w];
    for k in 1..n {
        for p in 0..2 {
            for kp in 1..n {
                neg[k - 1] += mps.rho_p(p, kp, spec.negate(kp), k);
            }
            for m in 1..n {
                let mut s = Complex64::default();
                for kp in 1..n {
                    let k2 = (m + n - kp) % n;
                    if k2 != 0 {
                        s += mps.rho_p(p, kp, k2, k);
                    }
                }
                shifted[(p * w + (m - 1)) * w + (k - 1)] = s;
            }
        }
    }
    Sums { neg, shifted }
}

/// `l_k` for `k = 1..n-1`.
pub fn per_k_losses(mps: &AbelianMpVector) -> Vec<f64> {
    let n = mps.n;
    let w = n - 1;
    let sums = index_sums(mps);
    (1..n)
        .map(|k| {
            let mut l = -2.0 * mps.rho3(k, k, k).re;
            for k1 in 1..n {
                for k2 in 1..n {
                    l += mps.rho3(k1, k2, k).norm_sqr();
                }
            }
            l += 0.25 * sums.neg[k - 1].norm_sqr();
            for p in 0..2 {
                for m in 1..n {
                    l += 0.25 * sums.shifted[(p * w + (m - 1)) * w + (k - 1)].norm_sqr();
                }
            }
            l
        })
        .collect()
}

pub fn decomposed_loss_with(mps: &AbelianMpVector, prefactor: Prefactor) -> f64 {
    let n = mps.n;
    let sum: f64 = per_k_losses(mps).iter().sum();
    prefactor.value(n) * sum + (n - 1) as f64 / n as f64
}

pub fn decomposed_loss(mps: &AbelianMpVector) -> f64 {
    decomposed_loss_with(mps, Prefactor::GroupOrder)
}

/// Wirtinger derivative `dL/d conj(rho)` of [`decomposed_loss`] for every
/// coordinate. For a real coordinate pair `(Re rho, Im rho)` the ordinary
/// gradient is `(2 Re D, 2 Im D)`.
pub fn decomposed_loss_conj_gradient(mps: &AbelianMpVector) -> AbelianMpVector {
    let n = mps.n;
    let w = n - 1;
    let pref = Prefactor::GroupOrder.value(n);
    let sums = index_sums(mps);
    let mut out = AbelianMpVector::zeros(n);
    for k1 in 1..n {
        for k2 in 1..n {
            for k in 1..n {
                let mut d = mps.rho3(k1, k2, k);
                if k1 == k && k2 == k {
                    d -= 1.0;
                }
                out.set_rho3(k1, k2, k, d * pref);
                let m = (k1 + k2) % n;
                for p in 0..2 {
                    let s = if m == 0 {
                        sums.neg[k - 1]
                    } else {
                        sums.shifted[(p * w + (m - 1)) * w + (k - 1)]
                    };
                    out.set_rho_p(p, k1, k2, k, s * (0.25 * pref));
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub direct: f64,
    pub decomposed: f64,
    pub delta: f64,
}

impl Residual {
    /// `|delta| / (1 + |direct|)`.
    pub fn relative(&self) -> f64 {
        self.delta.abs() / (1.0 + self.direct.abs())
    }
}

pub fn decomposition_residual(task: &AbelianTask, ps: &ParticleSystem) -> Result<Residual> {
    let direct = task.direct_loss(ps)?;
    let decomposed = decomposed_loss(&eval_mps(ps));
    Ok(Residual {
        direct,
        decomposed,
        delta: direct - decomposed,
    })
}

/// Boolean target per MP coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetAssignment {
    n: usize,
    targets: Vec<u8>,
}

impl TargetAssignment {
    /// `rho_kkk = 1` for every nonzero k; every other coordinate 0.
    pub fn global_optimum(n: usize) -> Self {
        let mut mps = AbelianMpVector::zeros(n);
        for k in 1..n {
            mps.set_rho3(k, k, k, Complex64::new(1.0, 0.0));
        }
        Self {
            n,
            targets: mps.iter().map(|v| v.re as u8).collect(),
        }
    }

    pub fn as_mps(&self) -> AbelianMpVector {
        let flat: Vec<Complex64> = self
            .targets
            .iter()
            .map(|&t| Complex64::new(t as f64, 0.0))
            .collect();
        AbelianMpVector::from_flat(self.n, &flat).expect("shape fixed at construction")
    }

    pub fn targets(&self) -> &[u8] {
        &self.targets
    }
}

/// `max_i |rho_i - target_i|`.
pub fn distance_to_01(mps: &AbelianMpVector, target: &TargetAssignment) -> Result<f64> {
    if mps.len() != target.targets.len() {
        return Err(Error::LengthMismatch {
            what: "target assignment",
            expected: mps.len(),
            got: target.targets.len(),
        });
    }
    Ok(mps
        .iter()
        .zip(&target.targets)
        .map(|(v, &t)| (v - t as f64).norm())
        .fold(0.0, f64::max))
}

/// Loss constants recovered from the identity between the direct and the
/// decomposed loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub n: usize,
    pub c_norm: f64,
    pub basis_scale: f64,
    /// Largest `|delta| / (1 + |direct|)` on the calibration draws.
    pub max_relative_residual: f64,
    pub draws: usize,
}

impl Calibration {
    pub fn task(&self) -> Result<AbelianTask> {
        let spec = GroupSpec::new(self.n)?;
        Ok(AbelianTask::new(
            FourierBasis::new(spec, self.basis_scale)?,
            self.c_norm,
        ))
    }
}

/// Recovers `(c_norm, basis scale)` for group order `n`.
///
/// `c_norm` is pinned by the zero parameter, where the direct loss is
/// `c_norm * n (n-1)` and the decomposed loss is `(n-1)/n`. With `c_norm`
/// fixed, the direct loss as a function of the basis scale `s` is a
/// quadratic in `v = s^3` (the output is cubic in the weights), which is
/// interpolated from three scales and solved against the decomposed loss on
/// `draws` random parameters; the root common to all draws is kept.
pub fn calibrate(n: usize, draws: usize, seed: u64) -> Result<Calibration> {
    let spec = GroupSpec::new(n)?;
    let zero = ParticleSystem::zeros(n, 1)?;
    let raw = AbelianTask::new(FourierBasis::unit(spec), 1.0).direct_loss(&zero)?;
    let c_norm = ((n - 1) as f64 / n as f64) / raw;

    let at_scale = |s: f64, ps: &ParticleSystem| -> Result<f64> {
        AbelianTask::new(FourierBasis::new(spec, s)?, c_norm).direct_loss(ps)
    };

    let mut roots: Vec<[f64; 2]> = Vec::with_capacity(draws);
    let samples: Vec<ParticleSystem> = (0..draws)
        .map(|i| {
            ParticleSystem::random(n, 3, 0.6, seed ^ (rng::streams::CALIBRATION + i as u64))
        })
        .collect::<Result<_>>()?;
    for ps in &samples {
        let target = decomposed_loss(&eval_mps(ps));
        // D(v) = alpha + beta v + gamma v^2 through v = 1, 2, 3.
        let d1 = at_scale(1.0, ps)?;
        let d2 = at_scale(2f64.cbrt(), ps)?;
        let d3 = at_scale(3f64.cbrt(), ps)?;
        let gamma = (d3 - 2.0 * d2 + d1) / 2.0;
        let beta = d2 - d1 - 3.0 * gamma;
        let alpha = d1 - beta - gamma;
        let c = alpha - target;
        let disc = beta * beta - 4.0 * gamma * c;
        if disc < 0.0 || gamma == 0.0 {
            roots.push([f64::NAN, f64::NAN]);
            continue;
        }
        let sq = disc.sqrt();
        roots.push([(-beta + sq) / (2.0 * gamma), (-beta - sq) / (2.0 * gamma)]);
    }
    // Pick the candidate root that every draw shares most closely.
    let mut best = (f64::INFINITY, f64::NAN);
    for cand in roots.iter().flatten().copied().filter(|v| v.is_finite() && *v > 0.0) {
        let spread: f64 = roots
            .iter()
            .map(|r| {
                r.iter()
                    .map(|v| (v - cand).abs())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max);
        if spread < best.0 {
            best = (spread, cand);
        }
    }
    if !best.1.is_finite() {
        return Err(Error::NotConverged {
            iterations: draws,
            residual: best.0,
        });
    }
    let v: f64 = best.1;
    // Round-off in the interpolation is ~1e-13; snap to the exact cube root of 1
    // when it is within that.
    let basis_scale = if (v - 1.0).abs() < 1e-9 { 1.0 } else { v.cbrt() };

    let task = AbelianTask::new(FourierBasis::new(spec, basis_scale)?, c_norm);
    let mut max_rel: f64 = 0.0;
    for ps in &samples {
        max_rel = max_rel.max(decomposition_residual(&task, ps)?.relative());
    }
    Ok(Calibration {
        n,
        c_norm,
        basis_scale,
        max_relative_residual: max_rel,
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_and_unit_particles() {
        let z = eval_mps(&ParticleSystem::zeros(5, 3).unwrap());
        assert!(z.iter().all(|v| *v == Complex64::default()));

        let mut ps = ParticleSystem::zeros(4, 1).unwrap();
        ps.coeffs_mut().fill(Complex64::new(1.0, 0.0));
        let ones = eval_mps(&ps);
        assert!(ones.iter().all(|v| *v == Complex64::new(1.0, 0.0)));
        assert_eq!(ones.len(), 3 * 27);
    }

    #[test]
    fn eval_matches_brute_force_loop() {
        let n = 4;
        let ps = ParticleSystem::random(n, 2, 1.0, 4).unwrap();
        let mps = eval_mps(&ps);
        for k1 in 1..n {
            for k2 in 1..n {
                for k in 1..n {
                    let mut r = Complex64::default();
                    let mut ra = Complex64::default();
                    let mut rb = Complex64::default();
                    for j in 0..2 {
                        let c = ps.z(j, Role::C, k);
                        r += ps.z(j, Role::A, k1) * ps.z(j, Role::B, k2) * c;
                        ra += ps.z(j, Role::A, k1) * ps.z(j, Role::A, k2) * c;
                        rb += ps.z(j, Role::B, k1) * ps.z(j, Role::B, k2) * c;
                    }
                    assert!((mps.rho3(k1, k2, k) - r / 2.0).norm() < 1e-14);
                    assert!((mps.rho_p(0, k1, k2, k) - ra / 2.0).norm() < 1e-14);
                    assert!((mps.rho_p(1, k1, k2, k) - rb / 2.0).norm() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn zero_mps_give_constant_term() {
        for n in [3, 5, 7] {
            let l = decomposed_loss(&AbelianMpVector::zeros(n));
            assert_eq!(l, (n - 1) as f64 / n as f64);
        }
    }

    #[test]
    fn boolean_assignment_reaches_zero_loss() {
        for n in [3, 5, 7] {
            let mps = TargetAssignment::global_optimum(n).as_mps();
            assert!(per_k_losses(&mps).iter().all(|l| *l == -1.0));
            assert!(decomposed_loss(&mps).abs() < 1e-15);
            // With 1/(n-1) the same assignment would give a negative loss.
            let alt = decomposed_loss_with(&mps, Prefactor::GroupOrderMinusOne);
            assert!((alt - (-1.0 + (n - 1) as f64 / n as f64)).abs() < 1e-15);
        }
    }

    #[test]
    fn residual_vanishes_at_zero() {
        for n in [3, 5, 7] {
            let task = AbelianTask::mean_over_pairs(n).unwrap();
            let r = decomposition_residual(&task, &ParticleSystem::zeros(n, 2).unwrap()).unwrap();
            assert!(r.delta.abs() <= 1e-10);
        }
    }

    #[test]
    fn residual_small_on_random_and_scaled_draws() {
        for n in [3, 5, 7] {
            let task = AbelianTask::mean_over_pairs(n).unwrap();
            for seed in 0..20 {
                let ps = ParticleSystem::random(n, 2 + seed as usize % 3, 0.8, seed).unwrap();
                for t in [1.0, 0.5, 2.0] {
                    let r = decomposition_residual(&task, &ps.scaled(t)).unwrap();
                    assert!(r.relative() <= 1e-8, "n={n} seed={seed} t={t}: {r:?}");
                }
            }
        }
    }

    #[test]
    fn literal_minus_one_prefactor_breaks_identity() {
        let task = AbelianTask::mean_over_pairs(5).unwrap();
        let ps = ParticleSystem::random(5, 3, 1.0, 1).unwrap();
        let direct = task.direct_loss(&ps).unwrap();
        let alt = decomposed_loss_with(&eval_mps(&ps), Prefactor::GroupOrderMinusOne);
        assert!((direct - alt).abs() / (1.0 + direct.abs()) > 1e-3);
    }

    #[test]
    fn calibration_recovers_mean_normalization_and_unit_scale() {
        for n in [3, 5] {
            let cal = calibrate(n, 5, 1234).unwrap();
            assert!((cal.c_norm - 1.0 / (n * n) as f64).abs() < 1e-15);
            assert_eq!(cal.basis_scale, 1.0);
            assert!(cal.max_relative_residual <= 1e-10);
        }
    }

    #[test]
    fn distance_examples() {
        let target = TargetAssignment::global_optimum(5);
        assert_eq!(distance_to_01(&AbelianMpVector::zeros(5), &target).unwrap(), 1.0);
        assert_eq!(distance_to_01(&target.as_mps(), &target).unwrap(), 0.0);
        assert!(distance_to_01(&AbelianMpVector::zeros(4), &target).is_err());
    }

    #[test]
    fn scaling_one_role_coordinate_scales_its_mps() {
        let n = 4;
        let ps = ParticleSystem::random(n, 3, 1.0, 17).unwrap();
        let mut scaled = ps.clone();
        for j in 0..3 {
            scaled.set_z(j, Role::A, 2, ps.z(j, Role::A, 2) * 3.0);
        }
        let (a, b) = (eval_mps(&ps), eval_mps(&scaled));
        for k2 in 1..n {
            for k in 1..n {
                assert!((a.rho3(2, k2, k) * 3.0 - b.rho3(2, k2, k)).norm() < 1e-12);
                assert_eq!(a.rho3(1, k2, k), b.rho3(1, k2, k));
            }
        }
    }

    #[test]
    fn mps_permutation_invariant_and_loss_depends_only_on_mps() {
        let ps = ParticleSystem::random(5, 4, 1.0, 2).unwrap();
        let a = eval_mps(&ps);
        let b = eval_mps(&ps.permuted(&[3, 1, 0, 2]));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).norm() <= 1e-14);
        }
        let copy = AbelianMpVector::from_flat(5, &a.as_flat()).unwrap();
        assert_eq!(decomposed_loss(&a).to_bits(), decomposed_loss(&copy).to_bits());
    }

    #[test]
    fn conj_gradient_matches_finite_differences() {
        let n = 4;
        let mps = eval_mps(&ParticleSystem::random(n, 3, 0.9, 6).unwrap());
        let d = decomposed_loss_conj_gradient(&mps);
        let flat = mps.as_flat();
        let h = 1e-6;
        for i in (0..flat.len()).step_by(5) {
            for (unit, got) in [
                (Complex64::new(1.0, 0.0), 2.0 * d.as_flat()[i].re),
                (Complex64::new(0.0, 1.0), 2.0 * d.as_flat()[i].im),
            ] {
                let mut plus = flat.clone();
                let mut minus = flat.clone();
                plus[i] += unit * h;
                minus[i] -= unit * h;
                let fd = (decomposed_loss(&AbelianMpVector::from_flat(n, &plus).unwrap())
                    - decomposed_loss(&AbelianMpVector::from_flat(n, &minus).unwrap()))
                    / (2.0 * h);
                assert!((fd - got).abs() <= 1e-7 * (1.0 + got.abs()), "i={i}: {fd} vs {got}");
            }
        }
    }

    #[test]
    fn labels_are_explicit() {
        let mps = AbelianMpVector::zeros(3);
        assert_eq!(mps.label(0), "rho[1,1,1]");
        assert_eq!(mps.label(1), "rho[1,1,2]");
        assert_eq!(mps.label(8), "rho_a[1,1,1]");
        assert_eq!(mps.label(23), "rho_b[2,2,2]");
        let snap = mps.to_json();
        assert_eq!(snap.entries.len(), 24);
    }
}
