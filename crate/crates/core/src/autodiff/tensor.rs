use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use super::AutodiffError;

/// Floating point element type of tensors: `f32` for training, `f64` for checks.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + 'static
{
    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `1 / (1 + e^-x)`.
    fn logistic(self) -> Self {
        Self::one() / (Self::one() + (-self).exp())
    }

    fn htan(self) -> Self {
        self.tanh()
    }

    /// `self / d`, correctly rounded for the type.
    fn ratio(self, d: Self) -> Self {
        self / d
    }
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Double-double arithmetic, for finite-difference oracles whose loss
/// differences must resolve far below 64-bit rounding.
#[cfg(feature = "extended-precision")]
impl Scalar for twofloat::TwoFloat {
    fn of(x: f64) -> Self {
        twofloat::TwoFloat::from(x)
    }
    fn to_f64(self) -> f64 {
        self.hi() + self.lo()
    }

    // The crate's own division and exp/tanh are only good to about 1e-16 and
    // 1e-18, which shows up as noise in loss differences; these stay near
    // full double-double.
    fn logistic(self) -> Self {
        if self.hi() < -709.0 {
            return Self::from(0.0);
        }
        dd::div(Self::from(1.0), dd::expm1(-self) + 2.0)
    }

    fn htan(self) -> Self {
        if self.hi() > 0.0 {
            return -(-self).htan();
        }
        let t = dd::expm1(self * 2.0);
        dd::div(t, t + 2.0)
    }

    fn ratio(self, d: Self) -> Self {
        dd::div(self, d)
    }
}

#[cfg(feature = "extended-precision")]
mod dd {
    use twofloat::TwoFloat;

    const LN2_HI: f64 = std::f64::consts::LN_2;
    const LN2_LO: f64 = 2.319_046_813_846_299_6e-17;
    const HALVINGS: i32 = 10;

    /// Long division with three f64 quotient digits.
    pub(super) fn div(a: TwoFloat, b: TwoFloat) -> TwoFloat {
        let q1 = a.hi() / b.hi();
        let r = a - b * q1;
        let q2 = r.hi() / b.hi();
        let r = r - b * q2;
        let q3 = r.hi() / b.hi();
        TwoFloat::new_add(q1, q2) + q3
    }

    /// `e^x - 1` by reduction to `|r| <= ln2 / 2^11`, a Taylor series, and
    /// repeated doubling through `(1 + s)^2 - 1 = s (2 + s)`.
    pub(super) fn expm1(x: TwoFloat) -> TwoFloat {
        if x.hi() > 709.0 {
            return TwoFloat::from(f64::INFINITY);
        }
        if x.hi() < -745.0 {
            return TwoFloat::from(-1.0);
        }
        let k = (x.hi() / LN2_HI).round();
        let r = x - TwoFloat::new_add(LN2_HI, LN2_LO) * k;
        let r = r * 0.5f64.powi(HALVINGS);
        let mut s = TwoFloat::from(0.0);
        let mut term = r;
        for n in 2..=10 {
            s += term;
            term = div(term * r, TwoFloat::from(n as f64));
        }
        for _ in 0..HALVINGS {
            s = s * (s + 2.0);
        }
        if k == 0.0 {
            s
        } else {
            (s + 1.0) * 2f64.powi(k as i32) - 1.0
        }
    }
}

/// Dense row-major n-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, AutodiffError> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || n != data.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self, AutodiffError> {
        Self::new(shape.to_vec(), data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, AutodiffError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: T) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.to_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParameterSet<T> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    pub fn flatten(&self) -> Vec<T> {
        self.entries.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    /// Overwrite all values from a flat slice in entry order.
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<(), AutodiffError> {
        if flat.len() != self.scalar_count() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.scalar_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }
}
