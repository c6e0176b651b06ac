//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! [`Tensor`] is a plain value: a shape and a contiguous `f64` buffer. It is
//! immutable once shared and is `Send + Sync`. Differentiable computation
//! happens through [`Var`] handles recorded on a [`Tape`]; one tape belongs to
//! one thread and one forward/backward session.

mod conv;
mod dump;
mod gemm;
pub mod gradcheck;
mod lstm;
mod norm;
mod ops;
mod tape;

pub use conv::ConvGeometry;
pub use dump::{read_tensor, write_tensor, TENSOR_MAGIC};
pub use gemm::gemm;
pub use lstm::LstmOutput;
pub use norm::BatchStats;
pub use ops::causal_mask;
pub use tape::{Gradients, Precision, Tape, Var};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "tensor of shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(-bound..=bound))
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
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len());
        let mut o = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of range for axis {i} of size {d}");
            o = o * d + ix;
        }
        o
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// In-place `self += other` for identically shaped tensors.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Round every element through `f32`.
    pub fn round_f32(&mut self) {
        for x in &mut self.data {
            *x = *x as f32 as f64;
        }
    }

    /// General axis permutation; `axes[i]` names the source axis of output axis `i`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::invalid(format!(
                "invalid permutation {axes:?} for rank {rank}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides = strides(&self.shape);
        let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        if rank == 0 {
            return Ok(self.clone());
        }
        let last = rank - 1;
        let inner = out_shape[last];
        let inner_stride = perm_strides[last];
        let mut idx = vec![0usize; rank];
        let outer: usize = out_shape[..last].iter().product();
        for _ in 0..outer {
            let base: usize = idx[..last]
                .iter()
                .zip(&perm_strides[..last])
                .map(|(i, s)| i * s)
                .sum();
            if inner_stride == 1 {
                out.extend_from_slice(&self.data[base..base + inner]);
            } else {
                out.extend((0..inner).map(|j| self.data[base + j * inner_stride]));
            }
            for ax in (0..last).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Tensor::from_parts(out_shape, out))
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Right-aligned broadcast of two shapes; size-1 axes stretch.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape (0 on stretched axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Sum a gradient of broadcast shape back down to `target` shape.
pub(crate) fn reduce_to_shape(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let out_shape = grad.shape().to_vec();
    let st = broadcast_strides(target, &out_shape);
    let mut out = vec![0.0; target.iter().product()];
    let rank = out_shape.len();
    if rank == 0 {
        out[0] = grad.data[0];
        return Tensor::from_parts(target.to_vec(), out);
    }
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let inner = out_shape[last];
    let ls = st[last];
    let mut src = 0;
    let outer: usize = out_shape[..last].iter().product();
    for _ in 0..outer {
        let base: usize = idx[..last]
            .iter()
            .zip(&st[..last])
            .map(|(i, s)| i * s)
            .sum();
        let g = &grad.data[src..src + inner];
        if ls == 0 {
            out[base] += g.iter().sum::<f64>();
        } else {
            for (j, v) in g.iter().enumerate() {
                out[base + j] += v;
            }
        }
        src += inner;
        for ax in (0..last).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(target.to_vec(), out)
}
