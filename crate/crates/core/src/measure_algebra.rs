//! Finite weighted measures with mass addition and the coupling product
//! `z1 (.) z2`, plus monomial potentials and 0/1-set bookkeeping.
//!
//! Measures are never compared point by point; every law is checked through
//! potentials on a declared monomial family.

use num_complex::Complex64;
use num_traits::{One, Zero};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_PRODUCT_CAP: usize = 1_000_000;

/// Coordinate type of a measure's support points.
pub trait Coordinate:
    Copy
    + Zero
    + One
    + std::ops::Mul<Output = Self>
    + std::ops::Mul<f64, Output = Self>
    + std::fmt::Debug
    + PartialEq
{
    fn is_finite_value(&self) -> bool;
}

impl Coordinate for f64 {
    fn is_finite_value(&self) -> bool {
        self.is_finite()
    }
}

impl Coordinate for Complex64 {
    fn is_finite_value(&self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

/// `sum_i w_i delta_{x_i}` with `w_i >= 0`; total mass is not normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedMeasure<T = f64> {
    dim: usize,
    points: Vec<Vec<T>>,
    weights: Vec<f64>,
}

impl<T: Coordinate> WeightedMeasure<T> {
    pub fn new(dim: usize, points: Vec<Vec<T>>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("measure dimension must be >= 1".into()));
        }
        if points.len() != weights.len() {
            return Err(Error::LengthMismatch {
                what: "measure weights",
                expected: points.len(),
                got: weights.len(),
            });
        }
        for p in &points {
            if p.len() != dim {
                return Err(Error::LengthMismatch {
                    what: "measure point",
                    expected: dim,
                    got: p.len(),
                });
            }
            if !p.iter().all(Coordinate::is_finite_value) {
                return Err(Error::InvalidParameter("non-finite support point".into()));
            }
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter("weights must be finite and >= 0".into()));
        }
        Ok(Self {
            dim,
            points,
            weights,
        })
    }

    /// The additive zero.
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            points: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// `delta` at the all-ones point, the multiplicative identity.
    pub fn identity(dim: usize) -> Self {
        Self::point_mass(vec![T::one(); dim], 1.0)
    }

    pub fn point_mass(point: Vec<T>, weight: f64) -> Self {
        Self {
            dim: point.len(),
            points: vec![point],
            weights: vec![weight],
        }
    }

    /// Uniform weights `1/len`.
    pub fn empirical(dim: usize, points: Vec<Vec<T>>) -> Result<Self> {
        let w = 1.0 / points.len().max(1) as f64;
        let weights = vec![w; points.len()];
        Self::new(dim, points, weights)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<T>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    fn check_dim(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::LengthMismatch {
                what: "measure dimension",
                expected: self.dim,
                got: other.dim,
            });
        }
        Ok(())
    }

    /// `integral of prod_{k in I} z_k  d mu`, not divided by the mass.
    pub fn mp_eval(&self, r: &MonomialSpec) -> Result<T> {
        if let Some(&bad) = r.indices.iter().find(|&&i| i >= self.dim) {
            return Err(Error::IndexOutOfRange {
                what: "monomial variable",
                index: bad,
                bound: self.dim,
            });
        }
        let mut acc = T::zero();
        for (p, &w) in self.points.iter().zip(&self.weights) {
            let mut prod = T::one();
            for &i in &r.indices {
                prod = prod * p[i];
            }
            acc = acc + prod * w;
        }
        Ok(acc)
    }

    /// Mass addition: concatenated support.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        let mut out = self.clone();
        out.points.extend(other.points.iter().cloned());
        out.weights.extend_from_slice(&other.weights);
        Ok(out)
    }

    /// Coupling product: every pair `(x_i (.) y_j, w_i v_j)`.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.mul_capped(other, DEFAULT_PRODUCT_CAP)
    }

    pub fn mul_capped(&self, other: &Self, cap: usize) -> Result<Self> {
        self.check_dim(other)?;
        let size = self.len().saturating_mul(other.len());
        if size > cap {
            return Err(Error::ProductTooLarge { size, cap });
        }
        let mut points = Vec::with_capacity(size);
        let mut weights = Vec::with_capacity(size);
        for (x, &wx) in self.points.iter().zip(&self.weights) {
            for (y, &wy) in other.points.iter().zip(&other.weights) {
                points.push(x.iter().zip(y).map(|(a, b)| *a * *b).collect());
                weights.push(wx * wy);
            }
        }
        Ok(Self {
            dim: self.dim,
            points,
            weights,
        })
    }

    /// Stochastic product with `samples` i.i.d. pairs drawn with probability
    /// proportional to `w_i v_j`; each carries weight `mass1 * mass2 / samples`.
    pub fn mul_subsampled(&self, other: &Self, samples: usize, seed: u64) -> Result<Self> {
        self.check_dim(other)?;
        let mass = self.mass() * other.mass();
        if self.is_empty() || other.is_empty() || mass == 0.0 || samples == 0 {
            return Ok(Self::zero(self.dim));
        }
        let left = WeightedIndex::new(&self.weights)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let right = WeightedIndex::new(&other.weights)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let mut r = rng::stream(seed, rng::streams::SUBSAMPLE);
        let w = mass / samples as f64;
        let points = (0..samples)
            .map(|_| {
                let (i, j) = (left.sample(&mut r), right.sample(&mut r));
                self.points[i]
                    .iter()
                    .zip(&other.points[j])
                    .map(|(a, b)| *a * *b)
                    .collect()
            })
            .collect();
        Ok(Self {
            dim: self.dim,
            points,
            weights: vec![w; samples],
        })
    }
}

impl WeightedMeasure<f64> {
    pub fn to_json(&self) -> MeasureJson {
        MeasureJson {
            dim: self.dim,
            points: self.points.clone(),
            weights: self.weights.clone(),
        }
    }

    pub fn from_json(doc: MeasureJson) -> Result<Self> {
        Self::new(doc.dim, doc.points, doc.weights)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureJson {
    pub dim: usize,
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// Monic monomial `prod_{k in I} z_k`, each variable of degree one.
/// Indices are 0-based.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct MonomialSpec {
    indices: Vec<usize>,
}

impl MonomialSpec {
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidParameter("monomial index set is empty".into()));
        }
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter(
                "monomial indices must be distinct".into(),
            ));
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn degree(&self) -> usize {
        self.indices.len()
    }
}

impl TryFrom<Vec<usize>> for MonomialSpec {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MonomialSpec> for Vec<usize> {
    fn from(m: MonomialSpec) -> Self {
        m.indices
    }
}

/// Family file: `{"monomials": [[0, 2], [1], ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyJson {
    pub monomials: Vec<MonomialSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Zero,
    One,
    Neither,
}

/// Indices into the family, split by potential value.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub zeros: Vec<usize>,
    pub ones: Vec<usize>,
    pub neither: Vec<usize>,
}

impl Partition {
    pub fn class_of(&self, i: usize) -> Class {
        if self.zeros.contains(&i) {
            Class::Zero
        } else if self.ones.contains(&i) {
            Class::One
        } else {
            Class::Neither
        }
    }
}

pub fn classify_value(v: f64, tol: f64) -> Class {
    if v.abs() <= tol {
        Class::Zero
    } else if (v - 1.0).abs() <= tol {
        Class::One
    } else {
        Class::Neither
    }
}

pub fn classify_01(mu: &WeightedMeasure, family: &[MonomialSpec], tol: f64) -> Result<Partition> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance must be > 0, got {tol}")));
    }
    let mut out = Partition::default();
    for (i, r) in family.iter().enumerate() {
        match classify_value(mu.mp_eval(r)?, tol) {
            Class::Zero => out.zeros.push(i),
            Class::One => out.ones.push(i),
            Class::Neither => out.neither.push(i),
        }
    }
    Ok(out)
}

/// Outcome for one monomial of the family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionEntry {
    pub monomial: MonomialSpec,
    pub left: Class,
    pub right: Class,
    pub product_value: f64,
    pub product_predicted: Option<Class>,
    pub product_observed: Class,
    pub sum_value: f64,
    pub sum_predicted: Option<Class>,
    pub sum_observed: Class,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub tol: f64,
    pub product_partition: Partition,
    pub sum_partition: Partition,
    pub entries: Vec<CompositionEntry>,
    pub pass: bool,
}

/// Predicted class of `r` under the product: 0 if either factor is 0,
/// 1 if both are 1.
pub fn predict_product(left: Class, right: Class) -> Option<Class> {
    match (left, right) {
        (Class::Zero, _) | (_, Class::Zero) => Some(Class::Zero),
        (Class::One, Class::One) => Some(Class::One),
        _ => None,
    }
}

/// Predicted class under mass addition: 0 if both are 0, 1 if exactly one
/// is 1 and the other 0.
pub fn predict_sum(left: Class, right: Class) -> Option<Class> {
    match (left, right) {
        (Class::Zero, Class::Zero) => Some(Class::Zero),
        (Class::One, Class::Zero) | (Class::Zero, Class::One) => Some(Class::One),
        _ => None,
    }
}

/// Classifies both inputs, forms product and sum, and checks the composed
/// 0/1-sets against the predicted ones.
pub fn compose_check(
    mu1: &WeightedMeasure,
    mu2: &WeightedMeasure,
    family: &[MonomialSpec],
    tol: f64,
) -> Result<CompositionReport> {
    let p1 = classify_01(mu1, family, tol)?;
    let p2 = classify_01(mu2, family, tol)?;
    let prod = mu1.mul(mu2)?;
    let sum = mu1.add(mu2)?;
    let product_partition = classify_01(&prod, family, tol)?;
    let sum_partition = classify_01(&sum, family, tol)?;
    let mut entries = Vec::with_capacity(family.len());
    for (i, r) in family.iter().enumerate() {
        let (left, right) = (p1.class_of(i), p2.class_of(i));
        let product_predicted = predict_product(left, right);
        let sum_predicted = predict_sum(left, right);
        let product_observed = product_partition.class_of(i);
        let sum_observed = sum_partition.class_of(i);
        let pass = product_predicted.is_none_or(|c| c == product_observed)
            && sum_predicted.is_none_or(|c| c == sum_observed);
        entries.push(CompositionEntry {
            monomial: r.clone(),
            left,
            right,
            product_value: prod.mp_eval(r)?,
            product_predicted,
            product_observed,
            sum_value: sum.mp_eval(r)?,
            sum_predicted,
            sum_observed,
            pass,
        });
    }
    let pass = entries.iter().all(|e| e.pass);
    Ok(CompositionReport {
        tol,
        product_partition,
        sum_partition,
        entries,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(ix: &[usize]) -> MonomialSpec {
        MonomialSpec::new(ix.to_vec()).unwrap()
    }

    #[test]
    fn identity_and_zero() {
        let id = WeightedMeasure::<f64>::identity(4);
        let zero = WeightedMeasure::<f64>::zero(4);
        for r in [m(&[0]), m(&[1, 3]), m(&[0, 1, 2, 3])] {
            assert_eq!(id.mp_eval(&r).unwrap(), 1.0);
            assert_eq!(zero.mp_eval(&r).unwrap(), 0.0);
        }
        assert!(id.mp_eval(&m(&[4])).is_err());
    }

    #[test]
    fn hand_sum() {
        let mu = WeightedMeasure::new(
            4,
            vec![
                vec![1.0, 2.0, 3.0, 4.0],
                vec![-1.0, 0.5, 2.0, 0.0],
                vec![0.5, 0.5, -2.0, 1.0],
            ],
            vec![0.2, 0.3, 0.5],
        )
        .unwrap();
        // r = z_1 z_3 in 1-based notation.
        let want = 0.2 * 1.0 * 3.0 + 0.3 * -1.0 * 2.0 + 0.5 * 0.5 * -2.0;
        assert!((mu.mp_eval(&m(&[0, 2])).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn add_examples() {
        let a = WeightedMeasure::new(2, vec![vec![1.0, 2.0]], vec![0.7]).unwrap();
        let b = WeightedMeasure::new(2, vec![vec![3.0, -1.0]], vec![0.5]).unwrap();
        assert!((a.add(&b).unwrap().mass() - 1.2).abs() < 1e-15);
        assert_eq!(a.add(&WeightedMeasure::zero(2)).unwrap(), a);
        assert!(a.add(&WeightedMeasure::zero(3)).is_err());
    }

    #[test]
    fn mul_by_hand() {
        let a = WeightedMeasure::new(2, vec![vec![1.0, 2.0], vec![-1.0, 0.5]], vec![0.25, 0.75])
            .unwrap();
        let b = WeightedMeasure::new(2, vec![vec![2.0, 2.0], vec![0.0, -3.0]], vec![0.5, 0.5])
            .unwrap();
        let p = a.mul(&b).unwrap();
        assert_eq!(
            p.points(),
            &[
                vec![2.0, 4.0],
                vec![0.0, -6.0],
                vec![-2.0, 1.0],
                vec![0.0, -1.5]
            ]
        );
        assert_eq!(p.weights(), &[0.125, 0.125, 0.375, 0.375]);
        let id = a.mul(&WeightedMeasure::identity(2)).unwrap();
        assert_eq!(id, a);
    }

    #[test]
    fn product_cap_and_subsampling() {
        let a = WeightedMeasure::empirical(1, vec![vec![1.0]; 20]).unwrap();
        assert!(matches!(a.mul_capped(&a, 100), Err(Error::ProductTooLarge { .. })));
        let s = a.mul_subsampled(&a, 50, 3).unwrap();
        assert_eq!(s.len(), 50);
        assert!((s.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn complex_points() {
        let i = Complex64::new(0.0, 1.0);
        let a = WeightedMeasure::new(2, vec![vec![i, Complex64::one()]], vec![1.0]).unwrap();
        let p = a.mul(&a).unwrap();
        assert_eq!(p.mp_eval(&m(&[0])).unwrap(), Complex64::new(-1.0, 0.0));
    }

    #[test]
    fn classification() {
        let family = vec![m(&[0]), m(&[1]), m(&[0, 2]), m(&[1, 2])];
        let id = WeightedMeasure::<f64>::identity(3);
        assert_eq!(classify_01(&id, &family, 1e-9).unwrap().ones, vec![0, 1, 2, 3]);
        let zero = WeightedMeasure::zero(3);
        assert_eq!(classify_01(&zero, &family, 1e-9).unwrap().zeros, vec![0, 1, 2, 3]);
        let pm = WeightedMeasure::point_mass(vec![1.0, 0.0, 1.0], 1.0);
        let part = classify_01(&pm, &family, 1e-9).unwrap();
        assert_eq!(part.ones, vec![0, 2]);
        assert_eq!(part.zeros, vec![1, 3]);
        assert!(classify_01(&pm, &family, 0.0).is_err());
    }

    #[test]
    fn swapped_point_masses_compose_to_all_zero() {
        // r1 = z_0, r2 = z_1. mu1 has r1 -> 0, r2 -> 1; mu2 the reverse.
        let family = vec![m(&[0]), m(&[1])];
        let mu1 = WeightedMeasure::point_mass(vec![0.0, 1.0], 1.0);
        let mu2 = WeightedMeasure::point_mass(vec![1.0, 0.0], 1.0);
        let rep = compose_check(&mu1, &mu2, &family, 1e-8).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.product_partition.zeros, vec![0, 1]);
        assert!(rep.product_partition.ones.is_empty());
        assert_eq!(rep.sum_partition.ones, vec![0, 1]);
    }

    #[test]
    fn identity_factor_preserves_partition() {
        let family = vec![m(&[0]), m(&[1]), m(&[0, 1]), m(&[2])];
        let mu1 = WeightedMeasure::new(3, vec![vec![1.0, 0.0, 0.5], vec![1.0, 0.0, 2.0]], vec![0.5, 0.5])
            .unwrap();
        let id = WeightedMeasure::identity(3);
        let rep = compose_check(&mu1, &id, &family, 1e-8).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.product_partition, classify_01(&mu1, &family, 1e-8).unwrap());
    }

    #[test]
    fn json_round_trip() {
        let mu = WeightedMeasure::new(2, vec![vec![1.0, -2.0]], vec![0.5]).unwrap();
        let text = serde_json::to_string(&mu.to_json()).unwrap();
        assert_eq!(text, r#"{"dim":2,"points":[[1.0,-2.0]],"weights":[0.5]}"#);
        let back = WeightedMeasure::from_json(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, mu);
        let fam: FamilyJson = serde_json::from_str(r#"{"monomials":[[2,0],[1]]}"#).unwrap();
        assert_eq!(fam.monomials[0].indices(), &[0, 2]);
        assert!(serde_json::from_str::<FamilyJson>(r#"{"monomials":[[1,1]]}"#).is_err());
        assert!(serde_json::from_str::<MeasureJson>(r#"{"dim":1,"points":[],"weights":[],"x":1}"#).is_err());
    }
}
