//! Dense numerics for the toy transformer: row-major matrices, dot products,
//! masked softmax, RMS normalization and rotary position rotation.
//!
//! Every reduction runs in a fixed sequential order, so a row computed alone
//! and the same row computed inside a batch produce bitwise-identical results.
//! The engine relies on this to make batched and token-by-token encodings
//! interchangeable.

use std::cell::Cell;
use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use crate::error::{ChoreoError, Result};

/// Scalar width used by the engine (`f32` or `f64`).
pub trait Scalar:
    Float + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const BITS: u32;

    fn from_f64(v: f64) -> Self;

    fn from_f32(v: f32) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const BITS: u32 = 32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn from_f32(v: f32) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn from_f32(v: f32) -> Self {
        v as f64
    }

    fn as_f64(self) -> f64 {
        self
    }
}

thread_local! {
    static MAC_COUNTER: Cell<u64> = const { Cell::new(0) };
}

/// Execution counter of multiply-accumulates performed by [`dot`] and
/// [`axpy`] on the current thread. Used to cross-check the analytic FLOP model.
pub mod mac_counter {
    use super::MAC_COUNTER;

    pub fn reset() {
        MAC_COUNTER.with(|c| c.set(0));
    }

    pub fn read() -> u64 {
        MAC_COUNTER.with(|c| c.get())
    }

    pub(crate) fn add(n: usize) {
        MAC_COUNTER.with(|c| c.set(c.get() + n as u64));
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    mac_counter::add(a.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    mac_counter::add(x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * *xi;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(ChoreoError::DimensionMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · x` where `self` is stored as `[out][in]`.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(ChoreoError::DimensionMismatch {
            op: "matmul",
            left: (a.rows, a.cols),
            right: (b.rows, b.cols),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            axpy(a.data[i * a.cols + k], b.row(k), out_row);
        }
    }
    Ok(out)
}

/// Numerically stable softmax in place.
pub fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / sum;
    }
}

/// Softmax restricted to `visible` entries; invisible entries come out as
/// exactly zero.
pub fn softmax_masked<T: Scalar>(logits: &[T], visible: &[bool]) -> Result<Vec<T>> {
    if logits.len() != visible.len() {
        return Err(ChoreoError::DimensionMismatch {
            op: "softmax_masked",
            left: (logits.len(), 1),
            right: (visible.len(), 1),
        });
    }
    if !visible.iter().any(|v| *v) {
        return Err(ChoreoError::NoVisibleEntries);
    }
    let mut picked: Vec<T> = logits
        .iter()
        .zip(visible)
        .filter(|(_, v)| **v)
        .map(|(x, _)| *x)
        .collect();
    softmax_in_place(&mut picked);
    let mut it = picked.into_iter();
    Ok(visible
        .iter()
        .map(|v| if *v { it.next().unwrap() } else { T::zero() })
        .collect())
}

pub fn rms_norm<T: Scalar>(x: &[T], gain: &[T], eps: T) -> Vec<T> {
    let n = T::from_f64(x.len() as f64);
    let ms = x.iter().map(|v| *v * *v).fold(T::zero(), |a, b| a + b) / n;
    let inv = T::one() / (ms + eps).sqrt();
    x.iter().zip(gain).map(|(v, g)| *v * inv * *g).collect()
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// Precomputed RoPE sine/cosine values for every position difference in
/// `[-max_delta, max_delta]`.
///
/// Frequency pair `i` covers components `(2i, 2i+1)` and rotates with
/// angular frequency `base^(-2i/d)`. Entries are computed directly from the
/// angle, never by composing smaller rotations.
#[derive(Debug, Clone)]
pub struct RotationTable<T> {
    head_dim: usize,
    max_delta: usize,
    // [(delta + max_delta) * pairs + i] -> (cos, sin)
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RotationTable<T> {
    pub fn new(head_dim: usize, max_delta: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(ChoreoError::InvalidConfig(format!(
                "rotary head dimension must be even and positive, got {head_dim}"
            )));
        }
        let pairs = head_dim / 2;
        let inv_freq: Vec<f64> = (0..pairs)
            .map(|i| base.powf(-(2.0 * i as f64) / head_dim as f64))
            .collect();
        let span = 2 * max_delta + 1;
        let mut cos = Vec::with_capacity(span * pairs);
        let mut sin = Vec::with_capacity(span * pairs);
        for k in 0..span {
            let delta = k as f64 - max_delta as f64;
            for f in &inv_freq {
                let angle = delta * f;
                cos.push(T::from_f64(angle.cos()));
                sin.push(T::from_f64(angle.sin()));
            }
        }
        Ok(Self {
            head_dim,
            max_delta,
            cos,
            sin,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn max_delta(&self) -> usize {
        self.max_delta
    }

    /// `(cos, sin)` slices for one position difference.
    pub fn entry(&self, delta: i64) -> Result<(&[T], &[T])> {
        if delta.unsigned_abs() as usize > self.max_delta {
            return Err(ChoreoError::RotationOutOfRange {
                delta,
                max: self.max_delta,
            });
        }
        let pairs = self.head_dim / 2;
        let k = (delta + self.max_delta as i64) as usize;
        Ok((
            &self.cos[k * pairs..(k + 1) * pairs],
            &self.sin[k * pairs..(k + 1) * pairs],
        ))
    }

    /// Rotate one head vector in place by `delta` positions.
    pub fn rotate_in_place(&self, v: &mut [T], delta: i64) -> Result<()> {
        if v.len() != self.head_dim {
            return Err(ChoreoError::DimensionMismatch {
                op: "rope",
                left: (v.len(), 1),
                right: (self.head_dim, 1),
            });
        }
        if delta == 0 {
            return Ok(());
        }
        let (cos, sin) = self.entry(delta)?;
        for (i, pair) in v.chunks_exact_mut(2).enumerate() {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * cos[i] - b * sin[i];
            pair[1] = a * sin[i] + b * cos[i];
        }
        Ok(())
    }
}

/// Rotate a key vector by a signed position difference.
pub fn rope_rotate<T: Scalar>(key: &[T], delta: i64, table: &RotationTable<T>) -> Result<Vec<T>> {
    let mut out = key.to_vec();
    table.rotate_in_place(&mut out, delta)?;
    Ok(out)
}

/// Rotate a query (or freshly projected key) to its absolute position.
pub fn apply_rope_query<T: Scalar>(
    query: &[T],
    position: usize,
    table: &RotationTable<T>,
) -> Result<Vec<T>> {
    if position > table.max_delta() {
        return Err(ChoreoError::PositionOutOfWindow {
            position,
            window: table.max_delta(),
        });
    }
    rope_rotate(query, position as i64, table)
}
