//! Dense tensors with a recorded reverse-mode tape.
//!
//! Parameters live in a [`ParamStore`] and are referenced from a [`Tape`] by
//! [`ParamId`]. A tape owns copies of every value it touches, so one forward
//! pass never aliases the store and gradients flow back into the store only
//! through [`Tape::backward`].
//!
//! Everything is generic over [`Element`]: training runs in `f32`, the
//! finite-difference oracles run the same code in `f64`.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Result};

pub use gradcheck::{grad_check, grad_check_params, relative_error};
pub use tape::{Gradients, Op, Reduction, Tape, Var};

/// Floating point element usable on a tape.
pub trait Element:
    num_traits::Float
    + Default
    + Debug
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    const NAME: &'static str;

    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major tensor with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        ensure!(
            numel(&shape) == data.len(),
            Dimension,
            "shape {:?} holds {} values, got {}",
            shape,
            numel(&shape),
            data.len()
        );
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![T::zero(); n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(x: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![x],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel(&shape)).map(&mut f).collect();
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Normal(0, std) initialisation.
    pub fn randn<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.set_requires_grad(flag);
        self
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Clearing `requires_grad` also drops any accumulated gradient.
    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Multiplies the accumulated gradient in place.
    pub fn scale_grad(&mut self, factor: T) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Value at a row-major multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range for axis {i} (extent {ext})");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    /// Precision conversion; gradient state is not carried over.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * std::mem::size_of::<T>());
        for &x in &self.data {
            x.write_le(&mut out);
        }
        out
    }

    /// SHA-256 over shape and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for &e in &self.shape {
            h.update((e as u64).to_le_bytes());
        }
        h.update(self.to_le_bytes());
        hex::encode(h.finalize())
    }
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element = f32> {
    tensors: Vec<Tensor<T>>,
    names: Vec<String>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: Vec::new(),
            names: Vec::new(),
        }
    }

    /// Registers a tensor; it becomes trainable.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let id = ParamId(self.tensors.len());
        self.tensors.push(tensor.with_requires_grad(true));
        self.names.push(name.into());
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .zip(&self.names)
            .enumerate()
            .map(|(i, (t, n))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Combined SHA-256 over the named parameters, in the given order.
    pub fn checksum_of(&self, ids: &[ParamId]) -> String {
        let mut h = Sha256::new();
        for &id in ids {
            h.update(self.names[id.0].as_bytes());
            h.update(self.tensors[id.0].checksum().as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            names: self.names.clone(),
        }
    }

    /// All parameter values concatenated in registration order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(&mut self, flat: &[T]) -> Result<()> {
        ensure!(
            flat.len() == self.num_values(),
            Dimension,
            "flat vector has {} values, store holds {}",
            flat.len(),
            self.num_values()
        );
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Gradients concatenated in registration order; absent grads read as zero.
    pub fn flatten_grads(&self) -> Vec<T> {
        self.tensors
            .iter()
            .flat_map(|t| match &t.grad {
                Some(g) => g.clone(),
                None => vec![T::zero(); t.data.len()],
            })
            .collect()
    }
}
