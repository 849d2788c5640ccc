//! Exponential-family densities `u(z) ∝ exp(sum_i lambda_i r_i(z))` on the
//! box `[-B, B]^d` matching prescribed monomial moments.
//!
//! Integrals use a tensor Gauss-Legendre grid evaluated once per problem;
//! exponents are shifted by their maximum before exponentiation.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure_algebra::MonomialSpec;
use crate::quadrature::gauss_legendre;
use crate::rng;

pub const MAX_DIM: usize = 4;
pub const DEFAULT_NODES: usize = 40;

#[derive(Clone, Debug)]
pub struct MaxEntProblem {
    dim: usize,
    monomials: Vec<MonomialSpec>,
    targets: Vec<f64>,
    half_width: f64,
    nodes: usize,
    grid: Grid,
}

/// Quadrature points with the monomial features precomputed.
#[derive(Clone, Debug)]
struct Grid {
    points: Vec<f64>,
    weights: Vec<f64>,
    /// Row-major `points x m`.
    features: Vec<f64>,
}

fn monomial_value(r: &MonomialSpec, z: &[f64]) -> f64 {
    r.indices().iter().map(|&i| z[i]).product()
}

impl MaxEntProblem {
    pub fn new(dim: usize, monomials: Vec<MonomialSpec>, targets: Vec<f64>, half_width: f64) -> Result<Self> {
        Self::with_nodes(dim, monomials, targets, half_width, DEFAULT_NODES)
    }

    pub fn with_nodes(
        dim: usize,
        monomials: Vec<MonomialSpec>,
        targets: Vec<f64>,
        half_width: f64,
        nodes: usize,
    ) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidParameter(format!("dimension {dim} outside 1..={MAX_DIM}")));
        }
        if monomials.is_empty() {
            return Err(Error::InvalidParameter("empty monomial family".into()));
        }
        if targets.len() != monomials.len() {
            return Err(Error::LengthMismatch {
                what: "targets",
                expected: monomials.len(),
                got: targets.len(),
            });
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::InvalidParameter(format!("box half-width must be > 0, got {half_width}")));
        }
        if nodes < 2 {
            return Err(Error::InvalidParameter("need at least 2 quadrature nodes".into()));
        }
        for r in &monomials {
            if let Some(&bad) = r.indices().iter().find(|&&i| i >= dim) {
                return Err(Error::IndexOutOfRange {
                    what: "monomial variable",
                    index: bad,
                    bound: dim,
                });
            }
        }
        let rule = gauss_legendre(nodes).mapped(-half_width, half_width);
        let m = monomials.len();
        let total = nodes.pow(dim as u32);
        let mut grid = Grid {
            points: Vec::with_capacity(total * dim),
            weights: Vec::with_capacity(total),
            features: Vec::with_capacity(total * m),
        };
        rule.integrate_tensor(dim, |z| {
            grid.points.extend_from_slice(z);
            grid.features.extend(monomials.iter().map(|r| monomial_value(r, z)));
            0.0
        });
        // Weights in the same odometer order as the points.
        let mut idx = vec![0usize; dim];
        for _ in 0..total {
            grid.weights.push(idx.iter().map(|&i| rule.weights[i]).product());
            for slot in idx.iter_mut() {
                *slot += 1;
                if *slot < nodes {
                    break;
                }
                *slot = 0;
            }
        }
        Ok(Self {
            dim,
            monomials,
            targets,
            half_width,
            nodes,
            grid,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    pub fn monomials(&self) -> &[MonomialSpec] {
        &self.monomials
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn with_targets(&self, targets: Vec<f64>) -> Result<Self> {
        if targets.len() != self.len() {
            return Err(Error::LengthMismatch {
                what: "targets",
                expected: self.len(),
                got: targets.len(),
            });
        }
        Ok(Self {
            targets,
            ..self.clone()
        })
    }

    fn feature(&self, p: usize) -> &[f64] {
        let m = self.len();
        &self.grid.features[p * m..(p + 1) * m]
    }

    fn exponents(&self, lambda: &[f64]) -> Vec<f64> {
        (0..self.grid.weights.len())
            .map(|p| self.feature(p).iter().zip(lambda).map(|(r, l)| r * l).sum())
            .collect()
    }

    /// Shifted unnormalized weights `w_p exp(s_p - s_max)`, their sum and
    /// the shift.
    fn tilted(&self, lambda: &[f64]) -> (Vec<f64>, f64, f64) {
        let s = self.exponents(lambda);
        let shift = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = s
            .iter()
            .zip(&self.grid.weights)
            .map(|(s, w)| w * (s - shift).exp())
            .collect();
        let total = w.iter().sum();
        (w, total, shift)
    }

    fn check_lambda(&self, lambda: &[f64]) -> Result<()> {
        if lambda.len() != self.len() {
            return Err(Error::LengthMismatch {
                what: "lambda",
                expected: self.len(),
                got: lambda.len(),
            });
        }
        Ok(())
    }

    pub fn log_partition(&self, lambda: &[f64]) -> Result<f64> {
        self.check_lambda(lambda)?;
        let (_, total, shift) = self.tilted(lambda);
        Ok(shift + total.ln())
    }

    pub fn moments(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        Ok(self.moments_and_covariance(lambda)?.0)
    }

    /// Moments and covariance of the features under `u_lambda`.
    pub fn moments_and_covariance(&self, lambda: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        self.check_lambda(lambda)?;
        let m = self.len();
        let (w, total, _) = self.tilted(lambda);
        let mut mean = vec![0.0; m];
        for (p, wp) in w.iter().enumerate() {
            for (acc, r) in mean.iter_mut().zip(self.feature(p)) {
                *acc += wp * r;
            }
        }
        mean.iter_mut().for_each(|v| *v /= total);
        let mut cov = DMatrix::zeros(m, m);
        for (p, wp) in w.iter().enumerate() {
            let r = self.feature(p);
            for i in 0..m {
                let di = r[i] - mean[i];
                for j in 0..=i {
                    cov[(i, j)] += wp * di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..m {
            for j in 0..=i {
                let v = cov[(i, j)] / total;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        Ok((mean, cov))
    }

    /// `integral u log u` over the grid for density values on the grid.
    fn neg_entropy_of(&self, density: &[f64]) -> f64 {
        density
            .iter()
            .zip(&self.grid.weights)
            .map(|(u, w)| if *u > 0.0 { w * u * u.ln() } else { 0.0 })
            .sum()
    }

    fn density_on_grid(&self, sol: &MaxEntSolution) -> Vec<f64> {
        self.exponents(&sol.lambda)
            .iter()
            .map(|s| (s - sol.log_z).exp())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxEntSolution {
    pub lambda: Vec<f64>,
    #[serde(rename = "logZ")]
    pub log_z: f64,
    pub moments: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `||moments - targets||_inf` after each iteration, starting with
    /// the initial guess.
    pub residual_history: Vec<f64>,
    /// Condition number of the final covariance matrix.
    pub condition_number: f64,
}

impl MaxEntSolution {
    pub fn residual(&self) -> f64 {
        *self.residual_history.last().expect("history starts with the initial residual")
    }
}

fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn is_positive_definite(cov: &DMatrix<f64>) -> bool {
    let scale = cov.diagonal().max();
    if !(scale > 0.0) {
        return false;
    }
    Cholesky::new(cov.clone()).is_some_and(|c| c.l().diagonal().min().powi(2) > 1e-13 * scale)
}

fn condition_number(cov: &DMatrix<f64>) -> f64 {
    let ev = SymmetricEigen::new(cov.clone()).eigenvalues;
    let (lo, hi) = (ev.min(), ev.max());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Damped Newton on the convex dual `log Z(lambda) - lambda . targets`,
/// whose Hessian is the feature covariance.
///
/// Unattainable targets end with `converged = false` and the residual
/// history; a singular covariance is an error.
pub fn solve(problem: &MaxEntProblem, tol: f64, max_iter: usize) -> Result<MaxEntSolution> {
    solve_from(problem, &vec![0.0; problem.len()], tol, max_iter)
}

pub fn solve_from(problem: &MaxEntProblem, start: &[f64], tol: f64, max_iter: usize) -> Result<MaxEntSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance must be > 0, got {tol}")));
    }
    problem.check_lambda(start)?;
    let targets = problem.targets();
    let dual = |l: &[f64]| -> Result<f64> {
        Ok(problem.log_partition(l)? - l.iter().zip(targets).map(|(a, b)| a * b).sum::<f64>())
    };
    // Structural degeneracy shows up already under the uniform density.
    let (_, uniform_cov) = problem.moments_and_covariance(&vec![0.0; problem.len()])?;
    if !is_positive_definite(&uniform_cov) {
        return Err(Error::SingularCovariance);
    }
    let mut lambda = start.to_vec();
    let (mut mom, mut cov) = problem.moments_and_covariance(&lambda)?;
    let mut history = vec![inf_norm_diff(&mom, targets)];
    let mut iterations = 0;
    while *history.last().expect("non-empty") > tol && iterations < max_iter {
        // Past this point the density has collapsed onto a few nodes,
        // which only happens while chasing an unattainable target.
        if !is_positive_definite(&cov) {
            break;
        }
        let chol = Cholesky::new(cov.clone()).expect("checked positive definite");
        let grad = DVector::from_iterator(mom.len(), mom.iter().zip(targets).map(|(a, b)| a - b));
        let step = -chol.solve(&grad);
        let f0 = dual(&lambda)?;
        let slope = grad.dot(&step);
        let current = *history.last().expect("non-empty");
        let mut t = 1.0;
        loop {
            let next: Vec<f64> = lambda.iter().zip(step.iter()).map(|(l, s)| l + t * s).collect();
            let (m, c) = problem.moments_and_covariance(&next)?;
            let residual = inf_norm_diff(&m, targets);
            // Near the optimum the dual decrease drops below the rounding
            // noise of log Z, so a clear residual decrease also counts.
            let accept = dual(&next)? <= f0 + 1e-4 * t * slope || residual <= (1.0 - 1e-4 * t) * current;
            if accept || t < 1e-10 {
                lambda = next;
                (mom, cov) = (m, c);
                history.push(residual);
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
    }
    let converged = *history.last().expect("non-empty") <= tol;
    if !converged {
        log::warn!(
            "maxent: residual {:e} after {iterations} iterations",
            history.last().expect("non-empty")
        );
    }
    Ok(MaxEntSolution {
        log_z: problem.log_partition(&lambda)?,
        lambda,
        moments: mom,
        iterations,
        converged,
        residual_history: history,
        condition_number: condition_number(&cov),
    })
}

/// `u*(z) = exp(lambda . r(z) - log Z)` for `z` inside the box.
pub fn density_eval(sol: &MaxEntSolution, problem: &MaxEntProblem, z: &[f64]) -> Result<f64> {
    if z.len() != problem.dim() {
        return Err(Error::LengthMismatch {
            what: "point dimension",
            expected: problem.dim(),
            got: z.len(),
        });
    }
    let b = problem.half_width();
    if z.iter().any(|v| !(v.abs() <= b)) {
        return Err(Error::InvalidParameter(format!("point {z:?} outside the box [-{b}, {b}]")));
    }
    problem.check_lambda(&sol.lambda)?;
    let s: f64 = problem
        .monomials()
        .iter()
        .zip(&sol.lambda)
        .map(|(r, l)| l * monomial_value(r, z))
        .sum();
    Ok((s - sol.log_z).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub count: usize,
    /// Smallest `N[u] - N[u*]` with `N[u] = integral u log u`.
    pub min_gap: f64,
    /// Largest moment or mass deviation of a perturbed density.
    pub max_constraint_drift: f64,
}

/// Compares `integral u log u` of `u*` against densities
/// `u*(1 + eps phi)` where `phi` is a random sum of Gaussian bumps
/// projected, under `u*`, off the constant and every monomial, so mass
/// and moments are unchanged.
pub fn perturbation_check(
    problem: &MaxEntProblem,
    sol: &MaxEntSolution,
    count: usize,
    seed: u64,
) -> Result<PerturbationReport> {
    let mut rng = rng::stream(seed, rng::streams::MAXENT);
    let u = problem.density_on_grid(sol);
    let base = problem.neg_entropy_of(&u);
    let (d, m, b) = (problem.dim(), problem.len(), problem.half_width());
    let npts = u.len();
    let wu: Vec<f64> = u.iter().zip(&problem.grid.weights).map(|(u, w)| u * w).collect();
    let basis = |p: usize, k: usize| if k == 0 { 1.0 } else { problem.feature(p)[k - 1] };
    let mut gram = DMatrix::<f64>::zeros(m + 1, m + 1);
    for p in 0..npts {
        for k in 0..=m {
            for l in 0..=m {
                gram[(k, l)] += wu[p] * basis(p, k) * basis(p, l);
            }
        }
    }
    let gram_chol = Cholesky::new(gram).ok_or(Error::SingularCovariance)?;
    let width = b / 4.0;
    let mut report = PerturbationReport {
        count,
        min_gap: f64::INFINITY,
        max_constraint_drift: 0.0,
    };
    for _ in 0..count {
        let bumps: Vec<(Vec<f64>, f64)> = (0..3)
            .map(|_| {
                let c = (0..d).map(|_| rng.random_range(-b..b)).collect();
                (c, rng::standard_normal(&mut rng))
            })
            .collect();
        let mut phi: Vec<f64> = (0..npts)
            .map(|p| {
                let z = &problem.grid.points[p * d..(p + 1) * d];
                bumps
                    .iter()
                    .map(|(c, a)| {
                        let r2: f64 = z.iter().zip(c).map(|(x, y)| (x - y).powi(2)).sum();
                        a * (-r2 / (2.0 * width * width)).exp()
                    })
                    .sum()
            })
            .collect();
        let rhs = DVector::from_fn(m + 1, |k, _| (0..npts).map(|p| wu[p] * phi[p] * basis(p, k)).sum());
        let beta = gram_chol.solve(&rhs);
        for (p, v) in phi.iter_mut().enumerate() {
            *v -= (0..=m).map(|k| beta[k] * basis(p, k)).sum::<f64>();
        }
        let peak = phi.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if peak == 0.0 {
            continue;
        }
        let eps = rng.random_range(0.1..0.9) / peak;
        let perturbed: Vec<f64> = u.iter().zip(&phi).map(|(u, f)| u * (1.0 + eps * f)).collect();
        for k in 0..=m {
            let shift: f64 = (0..npts)
                .map(|p| problem.grid.weights[p] * (perturbed[p] - u[p]) * basis(p, k))
                .sum();
            report.max_constraint_drift = report.max_constraint_drift.max(shift.abs());
        }
        report.min_gap = report.min_gap.min(problem.neg_entropy_of(&perturbed) - base);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::adaptive_simpson;

    /// coth(1) - 1, evaluated to 30 digits with mpmath.
    const COTH1_MINUS_1: f64 = 0.313_035_285_499_331_303_636;

    fn linear_1d(target: f64) -> MaxEntProblem {
        MaxEntProblem::new(1, vec![MonomialSpec::new(vec![0]).unwrap()], vec![target], 1.0).unwrap()
    }

    #[test]
    fn closed_form_moment_and_inverse() {
        let p = linear_1d(COTH1_MINUS_1);
        let m = p.moments(&[1.0]).unwrap();
        assert!((m[0] - COTH1_MINUS_1).abs() <= 1e-14);
        let sol = solve(&p, 1e-13, 50).unwrap();
        assert!(sol.converged);
        assert!((sol.lambda[0] - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn zero_lambda_is_uniform_and_odd_moments_vanish() {
        let fam = vec![MonomialSpec::new(vec![0, 1, 2]).unwrap(), MonomialSpec::new(vec![1]).unwrap()];
        let p = MaxEntProblem::with_nodes(3, fam, vec![0.0, 0.0], 2.0, 12).unwrap();
        assert!(p.moments(&[0.0, 0.0]).unwrap().iter().all(|v| v.abs() <= 1e-15));
        let sol = solve(&p, 1e-12, 10).unwrap();
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.lambda, vec![0.0, 0.0]);
        let u = density_eval(&sol, &p, &[0.1, -1.0, 2.0]).unwrap();
        assert!((u - 1.0 / 64.0).abs() <= 1e-14);
        assert!(density_eval(&sol, &p, &[0.0, 0.0, 2.5]).is_err());
    }

    #[test]
    fn monotone_density_and_normalization() {
        let p = linear_1d(0.2);
        let sol = solve(&p, 1e-12, 50).unwrap();
        assert!(sol.lambda[0] > 0.0);
        let xs: Vec<f64> = (0..=20).map(|i| -1.0 + 0.1 * i as f64).collect();
        let us: Vec<f64> = xs.iter().map(|x| density_eval(&sol, &p, &[x.clamp(-1.0, 1.0)]).unwrap()).collect();
        assert!(us.windows(2).all(|w| w[1] > w[0]));
        let f = |x: f64| density_eval(&sol, &p, &[x]).unwrap();
        assert!((adaptive_simpson(&f, -1.0, 1.0, 1e-12) - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn log_partition_gradient_is_moments() {
        let fam = vec![MonomialSpec::new(vec![0]).unwrap(), MonomialSpec::new(vec![0, 1]).unwrap()];
        let p = MaxEntProblem::with_nodes(2, fam, vec![0.0, 0.0], 1.5, 30).unwrap();
        let lambda = [0.4, -0.7];
        let (mom, cov) = p.moments_and_covariance(&lambda).unwrap();
        let h = 1e-5;
        for i in 0..2 {
            let mut lp = lambda;
            let mut lm = lambda;
            lp[i] += h;
            lm[i] -= h;
            let fd = (p.log_partition(&lp).unwrap() - p.log_partition(&lm).unwrap()) / (2.0 * h);
            assert!((fd - mom[i]).abs() <= 1e-6);
            let (mp, _) = p.moments_and_covariance(&lp).unwrap();
            let (mm, _) = p.moments_and_covariance(&lm).unwrap();
            for j in 0..2 {
                assert!(((mp[j] - mm[j]) / (2.0 * h) - cov[(j, i)]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn triple_product_round_trip() {
        let fam = vec![MonomialSpec::new(vec![0, 1, 2]).unwrap()];
        let p = MaxEntProblem::with_nodes(3, fam, vec![0.2], 2.0, 24).unwrap();
        let sol = solve(&p, 1e-13, 100).unwrap();
        assert!(sol.converged);
        let again = solve(&p.with_targets(sol.moments.clone()).unwrap(), 1e-14, 100).unwrap();
        assert!((again.lambda[0] - sol.lambda[0]).abs() <= 1e-8);
    }

    #[test]
    fn duplicate_monomials_are_singular() {
        let r = MonomialSpec::new(vec![0]).unwrap();
        let p = MaxEntProblem::new(1, vec![r.clone(), r], vec![0.1, 0.1], 1.0).unwrap();
        assert!(matches!(solve(&p, 1e-10, 20), Err(Error::SingularCovariance)));
    }

    #[test]
    fn unattainable_target_reports_non_convergence() {
        let p = linear_1d(1.5);
        let sol = solve(&p, 1e-10, 15).unwrap();
        assert!(!sol.converged);
        assert!(sol.iterations <= 15);
        assert!(sol.residual() > 0.4);
        assert!(sol.residual_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn perturbations_never_beat_the_solution() {
        let p = linear_1d(COTH1_MINUS_1);
        let sol = solve(&p, 1e-13, 50).unwrap();
        let rep = perturbation_check(&p, &sol, 100, 5).unwrap();
        assert_eq!(rep.count, 100);
        assert!(rep.min_gap > -1e-6);
        assert!(rep.max_constraint_drift <= 1e-10);
    }

    #[test]
    fn rejects_bad_problems() {
        let r = || vec![MonomialSpec::new(vec![0]).unwrap()];
        assert!(MaxEntProblem::new(5, r(), vec![0.0], 1.0).is_err());
        assert!(MaxEntProblem::new(1, r(), vec![0.0], 0.0).is_err());
        assert!(MaxEntProblem::new(1, r(), vec![], 1.0).is_err());
        assert!(MaxEntProblem::new(1, vec![MonomialSpec::new(vec![3]).unwrap()], vec![0.0], 1.0).is_err());
    }
}
