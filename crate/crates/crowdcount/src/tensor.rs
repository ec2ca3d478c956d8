//! Dense row-major tensors.
//!
//! A tensor owns its values; when an op involving it is recorded on a tape the
//! result carries a node reference ([`TapeRef`]) tying it to that specific
//! tape. References from an older tape are ignored by newer tapes, so models
//! can be reused across training steps without manual cleanup.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Identifies a node on one particular tape (tapes get unique ids).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapeRef {
    pub tape_id: u64,
    pub node: usize,
}

#[derive(Debug, Clone)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    pub(crate) node: Option<TapeRef>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::ZERO; n], node: None }
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], node: None }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("{:?} ({} values)", shape, n),
                format!("{} values", data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data, node: None })
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![1], data: vec![value], node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn node(&self) -> Option<TapeRef> {
        self.node
    }

    /// The single value of a shape-[1] tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", "[1]", format!("{:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn is_scalar(&self) -> bool {
        self.shape == [1]
    }

    /// Sum of all values, accumulated in f64 to keep long reductions stable.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret as a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} values", self.data.len()),
                format!("{:?} ({} values)", shape, n),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone(), node: self.node })
    }

    /// Convert precision (used when loading f32 bundles into f64 models).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
            node: None,
        }
    }

    /// Fill with N(0, std^2) samples; sampling happens in f64 so both
    /// precisions see the same stream.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(S::from_f64(gauss(rng) * std));
        }
        Tensor { shape: shape.to_vec(), data, node: None }
    }
}

/// One standard normal draw via Box-Muller (two uniform draws per call keeps
/// the stream layout independent of any cached spare value).
pub fn gauss(rng: &mut impl rand::Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
