use std::fmt;
use std::sync::Mutex;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{MktError, Result};

/// Dense row-major `f64` array with a gradient slot.
///
/// The gradient slot sits behind a mutex so that frozen tensors can be
/// shared read-only across evaluation threads while a graph that borrows
/// them still accumulates into it during backward.
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Mutex<Option<Vec<f64>>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(MktError::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(MktError::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MktError::NonFinite("tensor"));
        }
        Ok(Self::from_parts(shape, data))
    }

    /// Trusted constructor for op outputs whose shape is known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, grad: Mutex::new(None), requires_grad: false }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![1.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Self::from_fn(shape, |_| normal.sample(rng))
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(MktError::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn has_grad(&self) -> bool {
        self.grad.lock().expect("grad lock poisoned").is_some()
    }

    pub fn zero_grad(&self) {
        *self.grad.lock().expect("grad lock poisoned") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// SHA-256 over shape and little-endian payload; identical iff bit-identical.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        self.hash_into(&mut h);
        hex::encode(h.finalize())
    }

    pub(crate) fn hash_into(&self, h: &mut Sha256) {
        h.update((self.shape.len() as u64).to_le_bytes());
        for &e in &self.shape {
            h.update((e as u64).to_le_bytes());
        }
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: Mutex::new(self.grad()),
            requires_grad: self.requires_grad,
        }
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("data", &self.data)
            .finish()
    }
}
