//! Dense row-major f64 tensors and the seeded random stream used for every
//! initialization and shuffle in the crate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernel::{self, MatMut, MatRef};

/// Deterministic random stream. Identical seeds give bit-identical draws on every platform.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent sub-seed so that unrelated consumers of one run seed
/// (PEFT init, batch order, ...) do not share a stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Dense n-dimensional array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor shape must be non-empty with positive extents, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("full: invalid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar")
    }

    /// Entries drawn from N(0, std^2).
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut SeededRng) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor::new(shape, data).expect("randn: invalid shape")
    }

    /// Entries drawn uniformly from [-bound, bound).
    pub fn uniform(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut SeededRng) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape, data).expect("uniform: invalid shape")
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::contract(format!(
                "expected a 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn get2(&self, row: usize, col: usize) -> f64 {
        let cols = self.shape[self.shape.len() - 1];
        self.data[row * cols + col]
    }

    pub fn set2(&mut self, row: usize, col: usize, value: f64) {
        let cols = self.shape[self.shape.len() - 1];
        self.data[row * cols + col] = value;
    }

    /// Plain (non-recorded) matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernel::gemm(
            1.0,
            MatRef::dense(&self.data, m, k),
            MatRef::dense(&other.data, k, n),
            0.0,
            MatMut::dense(&mut out, m, n),
        );
        Tensor::new(vec![m, n], out)
    }

    /// Keeps the listed columns of a 2-D tensor, in the given order.
    pub fn select_cols(&self, keep: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        check_indices("column", keep, cols)?;
        let mut out = Vec::with_capacity(rows * keep.len());
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            out.extend(keep.iter().map(|&c| row[c]));
        }
        Ok(self.derived(vec![rows, keep.len()], out))
    }

    /// Keeps the listed rows of a 2-D tensor, in the given order.
    pub fn select_rows(&self, keep: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        check_indices("row", keep, rows)?;
        let mut out = Vec::with_capacity(keep.len() * cols);
        for &r in keep {
            out.extend_from_slice(&self.data[r * cols..(r + 1) * cols]);
        }
        Ok(self.derived(vec![keep.len(), cols], out))
    }

    /// Multiplies row `i` of a 2-D tensor by `factors[i]`.
    pub fn scale_rows(&mut self, factors: &[f64]) -> Result<()> {
        let (rows, cols) = self.dims2()?;
        if factors.len() != rows {
            return Err(Error::Dimension {
                op: "scale_rows",
                left: self.shape.clone(),
                right: vec![factors.len()],
            });
        }
        for (row, f) in self.data.chunks_mut(cols).zip(factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        Ok(())
    }

    /// Stored bytes of the data buffer plus the gradient buffer when present.
    pub fn live_bytes(&self) -> usize {
        let grad = self.grad.as_ref().map_or(0, Vec::len);
        (self.data.len() + grad) * std::mem::size_of::<f64>()
    }

    fn derived(&self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: self.requires_grad,
        }
    }
}

pub(crate) fn check_indices(what: &'static str, idx: &[usize], bound: usize) -> Result<()> {
    for &i in idx {
        if i >= bound {
            return Err(Error::Index { what, index: i, bound });
        }
    }
    Ok(())
}

/// Row-wise softmax of a `rows x cols` buffer.
pub fn softmax_rows(values: &[f64], cols: usize) -> Vec<f64> {
    let mut out = values.to_vec();
    for row in out.chunks_mut(cols) {
        kernel::softmax_row(row);
    }
    out
}
