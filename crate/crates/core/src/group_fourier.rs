//! Characters of the cyclic group Z_n and the scaled Fourier basis used to
//! parameterize the network weights.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    n: usize,
}

impl GroupSpec {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter(format!(
                "group order must be at least 2, got {n}"
            )));
        }
        Ok(Self { n })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    /// Group law of Z_n.
    pub fn compose(&self, g: usize, h: usize) -> usize {
        (g + h) % self.n
    }

    pub fn negate(&self, g: usize) -> usize {
        (self.n - g % self.n) % self.n
    }

    /// Nonzero frequencies `1..n`, the axis the coefficient tensors run over.
    pub fn nonzero_frequencies(&self) -> std::ops::Range<usize> {
        1..self.n
    }
}

/// The n-th roots of unity, indexed by exponent. Characters are looked up
/// here so that `chi_k(g)` only depends on `k*g mod n`.
fn roots_of_unity(n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|j| {
            let theta = std::f64::consts::TAU * j as f64 / n as f64;
            Complex64::new(theta.cos(), theta.sin())
        })
        .collect()
}

/// `exp(2*pi*i*k*g/n)`.
pub fn character(spec: GroupSpec, k: usize, g: usize) -> Result<Complex64> {
    let n = spec.order();
    if k >= n {
        return Err(Error::IndexOutOfRange {
            what: "frequency",
            index: k,
            bound: n,
        });
    }
    if g >= n {
        return Err(Error::IndexOutOfRange {
            what: "group element",
            index: g,
            bound: n,
        });
    }
    let theta = std::f64::consts::TAU * ((k * g) % n) as f64 / n as f64;
    Ok(Complex64::new(theta.cos(), theta.sin()))
}

/// Columns `F_k(g) = scale * exp(2*pi*i*k*g/n)` for `0 <= k < n`.
#[derive(Clone, Debug)]
pub struct FourierBasis {
    spec: GroupSpec,
    scale: f64,
    roots: Vec<Complex64>,
}

impl FourierBasis {
    pub fn new(spec: GroupSpec, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "basis scale must be positive and finite, got {scale}"
            )));
        }
        Ok(Self {
            spec,
            scale,
            roots: roots_of_unity(spec.order()),
        })
    }

    pub fn unit(spec: GroupSpec) -> Self {
        Self::new(spec, 1.0).expect("unit scale is valid")
    }

    pub fn spec(&self) -> GroupSpec {
        self.spec
    }

    pub fn order(&self) -> usize {
        self.spec.order()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Unscaled character value, `k` and `g` taken mod n.
    #[inline]
    pub fn chi(&self, k: usize, g: usize) -> Complex64 {
        let n = self.order();
        self.roots[(k % n) * (g % n) % n]
    }

    /// `F_k(g)`.
    #[inline]
    pub fn entry(&self, k: usize, g: usize) -> Complex64 {
        self.chi(k, g) * self.scale
    }

    pub fn column(&self, k: usize) -> Vec<Complex64> {
        (0..self.order()).map(|g| self.entry(k, g)).collect()
    }

    /// `w = sum_{k != 0} coeffs[k-1] * F_k`.
    pub fn synth_weights(&self, coeffs: &[Complex64]) -> Result<Vec<Complex64>> {
        let n = self.order();
        if coeffs.len() != n - 1 {
            return Err(Error::LengthMismatch {
                what: "nonzero-frequency coefficients",
                expected: n - 1,
                got: coeffs.len(),
            });
        }
        Ok((0..n)
            .map(|g| {
                coeffs
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c * self.entry(i + 1, g))
                    .sum()
            })
            .collect())
    }

    /// Coefficients `c_k` (all `0 <= k < n`) with `w = sum_k c_k F_k`.
    ///
    /// Panics if `w.len() != n`.
    pub fn analyze_weights(&self, w: &[Complex64]) -> Vec<Complex64> {
        let n = self.order();
        assert_eq!(w.len(), n, "weight vector length must equal group order");
        let norm = 1.0 / (self.scale * n as f64);
        (0..n)
            .map(|k| {
                let acc: Complex64 = w
                    .iter()
                    .enumerate()
                    .map(|(g, wg)| wg * self.chi(k, g).conj())
                    .sum();
                acc * norm
            })
            .collect()
    }
}

/// Hermitian inner product `<u, v> = sum_g conj(u_g) v_g`.
pub fn inner(u: &[Complex64], v: &[Complex64]) -> Complex64 {
    u.iter().zip(v).map(|(a, b)| a.conj() * b).sum()
}
