//! Probabilists' Hermite polynomials with multi-indices,
//! `h_alpha(z) = prod_l He_{alpha_l}(z_l)`, and Gaussian expectations.
//!
//! A monic monomial `z_{i1} ... z_{ik}` over distinct variables is the
//! Hermite polynomial whose multi-index has ones at those variables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure_algebra::WeightedMeasure;
use crate::quadrature;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HermiteIndex(Vec<u32>);

impl HermiteIndex {
    pub fn new(alpha: Vec<u32>) -> Self {
        Self(alpha)
    }

    pub fn zero(dim: usize) -> Self {
        Self(vec![0; dim])
    }

    /// Multi-index of the monomial `prod_{i in vars} z_i` (0-based, distinct).
    pub fn monomial(dim: usize, vars: &[usize]) -> Result<Self> {
        let mut alpha = vec![0; dim];
        for &v in vars {
            if v >= dim {
                return Err(Error::IndexOutOfRange {
                    what: "monomial variable",
                    index: v,
                    bound: dim,
                });
            }
            if alpha[v] != 0 {
                return Err(Error::InvalidParameter(format!("variable {v} repeated")));
            }
            alpha[v] = 1;
        }
        Ok(Self(alpha))
    }

    /// `e_l`.
    pub fn unit(dim: usize, l: usize) -> Self {
        let mut alpha = vec![0; dim];
        alpha[l] = 1;
        Self(alpha)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn entries(&self) -> &[u32] {
        &self.0
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    /// `prod_l alpha_l!`, the squared norm of `h_alpha` under N(0, I).
    pub fn norm_sq(&self) -> f64 {
        self.0
            .iter()
            .map(|&a| (1..=a).map(f64::from).product::<f64>())
            .product()
    }

    /// `alpha - beta`, or `None` if any entry would be negative.
    pub fn checked_sub(&self, other: &Self) -> Option<Self> {
        if self.dim() != other.dim() {
            return None;
        }
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| a.checked_sub(*b))
            .collect::<Option<Vec<_>>>()
            .map(Self)
    }

    /// True when every entry is 0 or 1.
    pub fn is_monomial(&self) -> bool {
        self.0.iter().all(|&a| a <= 1)
    }
}

/// `He_k(x)` by `He_{k+1} = x He_k - k He_{k-1}`.
pub fn he(k: u32, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    if k == 0 {
        return prev;
    }
    for j in 1..k {
        let next = x * cur - f64::from(j) * prev;
        prev = cur;
        cur = next;
    }
    cur
}

pub fn hermite_eval(alpha: &HermiteIndex, z: &[f64]) -> f64 {
    debug_assert_eq!(alpha.dim(), z.len());
    alpha.0.iter().zip(z).map(|(&a, &x)| he(a, x)).product()
}

/// Component l is `alpha_l h_{alpha - e_l}(z)`, using `He_k' = k He_{k-1}`.
pub fn hermite_grad(alpha: &HermiteIndex, z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    hermite_grad_into(alpha, z, &mut out);
    out
}

pub fn hermite_grad_into(alpha: &HermiteIndex, z: &[f64], out: &mut [f64]) {
    let vals: Vec<f64> = alpha.0.iter().zip(z).map(|(&a, &x)| he(a, x)).collect();
    for l in 0..z.len() {
        let a = alpha.0[l];
        if a == 0 {
            out[l] = 0.0;
            continue;
        }
        let mut g = f64::from(a) * he(a - 1, z[l]);
        for (m, v) in vals.iter().enumerate() {
            if m != l {
                g *= v;
            }
        }
        out[l] = g;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl McEstimate {
    /// Sample mean and standard error of `values`.
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            std_error: (var / n as f64).sqrt(),
            samples: n,
        }
    }

    /// `|mean - target| <= k * std_error`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_error
    }
}

/// Monte Carlo `E[f(Z)]`, `Z ~ N(0, I_d)`, from `samples` seeded draws.
pub fn gaussian_expectation(
    f: impl Fn(&[f64]) -> f64,
    dim: usize,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if samples < 2 {
        return Err(Error::InvalidParameter("need at least 2 samples".into()));
    }
    let mut r = rng::stream(seed, rng::streams::MONTE_CARLO);
    let mut z = vec![0.0; dim];
    let values: Vec<f64> = (0..samples)
        .map(|_| {
            z.iter_mut().for_each(|v| *v = rng::standard_normal(&mut r));
            f(&z)
        })
        .collect();
    Ok(McEstimate::from_values(&values))
}

/// Tensor Gauss-Hermite `E[f(Z)]` for `dim <= 3`.
pub fn gaussian_quadrature(f: impl FnMut(&[f64]) -> f64, dim: usize, nodes: usize) -> Result<f64> {
    if dim > 3 {
        return Err(Error::InvalidParameter(format!(
            "tensor quadrature limited to dim <= 3, got {dim}"
        )));
    }
    if nodes == 0 || nodes > 40 {
        return Err(Error::InvalidParameter("nodes per axis must be in 1..=40".into()));
    }
    Ok(quadrature::gauss_hermite_normal(nodes).integrate_tensor(dim, f))
}

/// `samples` Gaussian points each followed by its negation, equal weights
/// `1 / (2 samples)`.
pub fn symmetrized_gaussian(dim: usize, samples: usize, seed: u64) -> WeightedMeasure {
    let mut r = rng::stream(seed, rng::streams::MONTE_CARLO + 1);
    let mut points = Vec::with_capacity(2 * samples);
    for _ in 0..samples {
        let z = rng::normal_vec(&mut r, dim);
        let neg = z.iter().map(|v| -v).collect();
        points.push(z);
        points.push(neg);
    }
    WeightedMeasure::empirical(dim, points).expect("finite points")
}

/// True when points come in consecutive pairs `(z, -z)` with equal weights.
pub fn is_pair_symmetric(mu: &WeightedMeasure) -> bool {
    mu.len() % 2 == 0
        && mu.points().chunks(2).zip(mu.weights().chunks(2)).all(|(p, w)| {
            w[0] == w[1] && p[0].iter().zip(&p[1]).all(|(a, b)| *a == -*b)
        })
}

/// `integral f d mu`. Pair-symmetric measures are summed pair by pair so that
/// odd integrands cancel exactly; the standard error is computed from
/// pair averages in that case.
pub fn integrate(mu: &WeightedMeasure, f: impl Fn(&[f64]) -> f64) -> McEstimate {
    if is_pair_symmetric(mu) && !mu.is_empty() {
        let pairs: Vec<f64> = mu
            .points()
            .chunks(2)
            .zip(mu.weights().chunks(2))
            .map(|(p, w)| w[0] * f(&p[0]) + w[1] * f(&p[1]))
            .collect();
        let value: f64 = pairs.iter().sum();
        let per_pair: Vec<f64> = pairs.iter().map(|v| v * pairs.len() as f64).collect();
        let est = McEstimate::from_values(&per_pair);
        return McEstimate {
            mean: value,
            std_error: est.std_error * mu.mass(),
            samples: mu.len(),
        };
    }
    let values: Vec<f64> = mu
        .points()
        .iter()
        .zip(mu.weights())
        .map(|(p, w)| w * f(p))
        .collect();
    let value = values.iter().sum();
    let scaled: Vec<f64> = values.iter().map(|v| v * values.len() as f64).collect();
    McEstimate {
        mean: value,
        std_error: McEstimate::from_values(&scaled).std_error,
        samples: mu.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParityCheck {
    pub value: f64,
    pub std_error: f64,
    /// Total degree `|alpha| + |beta| + |gamma| - 4` is odd.
    pub predicted_zero: bool,
}

/// `integral h_{alpha-e1-e2} h_{beta-e1} h_{gamma-e2} d mu`.
pub fn parity_zero_check(
    alpha: &HermiteIndex,
    beta: &HermiteIndex,
    gamma: &HermiteIndex,
    e1: &HermiteIndex,
    e2: &HermiteIndex,
    mu: &WeightedMeasure,
) -> Result<ParityCheck> {
    for (name, e) in [("e1", e1), ("e2", e2)] {
        if e.degree() != 1 {
            return Err(Error::InvalidParameter(format!("{name} must be a unit multi-index")));
        }
    }
    let negative = |what: &str| Error::InvalidParameter(format!("{what} has a negative entry"));
    let a = alpha
        .checked_sub(e1)
        .and_then(|a| a.checked_sub(e2))
        .ok_or_else(|| negative("alpha - e1 - e2"))?;
    let b = beta.checked_sub(e1).ok_or_else(|| negative("beta - e1"))?;
    let c = gamma.checked_sub(e2).ok_or_else(|| negative("gamma - e2"))?;
    if a.dim() != mu.dim() {
        return Err(Error::LengthMismatch {
            what: "multi-index dimension",
            expected: mu.dim(),
            got: a.dim(),
        });
    }
    let est = integrate(mu, |z| hermite_eval(&a, z) * hermite_eval(&b, z) * hermite_eval(&c, z));
    let total = alpha.degree() + beta.degree() + gamma.degree() - 4;
    Ok(ParityCheck {
        value: est.mean,
        std_error: est.std_error,
        predicted_zero: total % 2 == 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn low_order_values() {
        assert_eq!(hermite_eval(&HermiteIndex::zero(3), &[0.3, -2.0, 7.0]), 1.0);
        assert_eq!(he(3, 2.0), 2.0);
        assert_eq!(he(2, 3.0), 8.0);
        let z = [0.5, -1.5, 2.0];
        let a = HermiteIndex::monomial(3, &[0, 1, 2]).unwrap();
        assert_eq!(hermite_eval(&a, &z), 0.5 * -1.5 * 2.0);
    }

    #[test]
    fn recurrence_residuals() {
        for k in 1..=10u32 {
            for i in 0..=60 {
                let x = -3.0 + 0.1 * i as f64;
                let r = he(k + 1, x) - x * he(k, x) + f64::from(k) * he(k - 1, x);
                assert!(r.abs() <= 1e-10, "k={k} x={x}: {r}");
            }
        }
    }

    #[test]
    fn gradient_examples() {
        let z = [0.7, -1.1, 2.3, 0.4];
        let a = HermiteIndex::monomial(4, &[0, 1, 2]).unwrap();
        let g = hermite_grad(&a, &z);
        assert_eq!(g, vec![z[1] * z[2], z[0] * z[2], z[0] * z[1], 0.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng::stream(5, 77);
        for case in 0..40 {
            let d = 1 + case % 4;
            let alpha = HermiteIndex::new(
                (0..d).map(|_| (rng::standard_normal(&mut r).abs() * 1.5) as u32 % 3).collect(),
            );
            if alpha.degree() > 5 {
                continue;
            }
            let z = rng::normal_vec(&mut r, d);
            let g = hermite_grad(&alpha, &z);
            for l in 0..d {
                let h = 1e-5;
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[l] += h;
                zm[l] -= h;
                let fd = (hermite_eval(&alpha, &zp) - hermite_eval(&alpha, &zm)) / (2.0 * h);
                assert!((fd - g[l]).abs() <= 1e-6 * (1.0 + g[l].abs()), "{alpha:?} l={l}");
            }
        }
    }

    #[test]
    fn constant_expectation_is_exact() {
        let est = gaussian_expectation(|_| 1.0, 3, 1000, 1).unwrap();
        assert_eq!(est.mean, 1.0);
        assert_eq!(est.std_error, 0.0);
        assert!(gaussian_expectation(|_| 1.0, 3, 1, 1).is_err());
    }

    #[test]
    fn orthogonality_by_quadrature() {
        let indices: Vec<HermiteIndex> = [
            vec![0, 0, 0],
            vec![1, 1, 1],
            vec![3, 0, 0],
            vec![2, 1, 0],
            vec![1, 2, 3],
            vec![0, 2, 2],
            vec![2, 2, 2],
        ]
        .into_iter()
        .map(HermiteIndex::new)
        .collect();
        for a in &indices {
            for b in &indices {
                let v = gaussian_quadrature(|z| hermite_eval(a, z) * hermite_eval(b, z), 3, 40)
                    .unwrap();
                let want = if a == b { a.norm_sq() } else { 0.0 };
                assert!((v - want).abs() <= 1e-8, "{a:?} {b:?}: {v}");
            }
        }
    }

    #[test]
    fn symmetric_pair_cancels_odd_integrand() {
        let mu = WeightedMeasure::new(2, vec![vec![0.3, -1.2], vec![-0.3, 1.2]], vec![0.5, 0.5])
            .unwrap();
        let est = integrate(&mu, |z| z[0] * z[0] * z[1] + z[1].powi(3));
        assert_eq!(est.mean, 0.0);
    }

    #[test]
    fn parity_check_inputs() {
        let mu = symmetrized_gaussian(3, 100, 2);
        let a = HermiteIndex::new(vec![1, 1, 1]);
        let e1 = HermiteIndex::unit(3, 0);
        let e2 = HermiteIndex::unit(3, 1);
        let chk = parity_zero_check(&a, &a, &a, &e1, &e2, &mu).unwrap();
        assert!(chk.predicted_zero);
        assert_eq!(chk.value, 0.0);

        let short = HermiteIndex::new(vec![1, 0, 0]);
        assert!(parity_zero_check(&short, &a, &a, &e1, &e2, &mu).is_err());
        assert!(parity_zero_check(&a, &a, &a, &a, &e2, &mu).is_err());
    }
}
