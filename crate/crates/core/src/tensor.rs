//! Dense row-major tensors.
//!
//! A [`Tensor`] owns a contiguous buffer and a shape of at most five
//! extents, each at least one. There are no views: slicing copies. Element
//! types are `f32` and `f64` through the [`Scalar`] trait; matmul and all
//! reductions accumulate in `f64` regardless of the storage type.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{shape_err, Error, Result};

pub const MAX_RANK: usize = 5;

static FINITE_CHECKS: AtomicBool = AtomicBool::new(true);

/// Toggle NaN/Inf detection on public operations. On by default.
pub fn set_finite_checks(enabled: bool) {
    FINITE_CHECKS.store(enabled, Ordering::Relaxed);
}

pub fn finite_checks_enabled() -> bool {
    FINITE_CHECKS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Tag byte used by the checkpoint format.
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

/// Storage element type.
pub trait Scalar:
    Copy + Default + PartialEq + PartialOrd + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: DType;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    /// `bytes` must hold exactly `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Right-hand operand of an elementwise op.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a, T: Scalar> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor<{}>{:?} ", T::DTYPE, self.shape)?;
        let mut list = f.debug_list();
        list.entries(self.data.iter().take(PREVIEW));
        if self.data.len() > PREVIEW {
            list.entry(&format_args!("... {} more", self.data.len() - PREVIEW));
        }
        list.finish()
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(shape_err!("rank must be 1..={MAX_RANK}, got shape {shape:?}"));
    }
    if shape.contains(&0) {
        return Err(shape_err!("zero extent in shape {shape:?}"));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return Err(shape_err!(
                "buffer of length {} does not fill shape {shape:?} ({n} elements)",
                data.len()
            ));
        }
        let t = Self { shape: shape.to_vec(), data };
        t.check_finite("tensor_new")?;
        Ok(t)
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::from_f64(0.0))
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Internal constructor for kernels whose output shape is already validated.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    /// Internal constructor converting from an `f64` buffer.
    pub(crate) fn from_f64s(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self::from_parts(shape, data.into_iter().map(T::from_f64).collect())
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

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(shape_err!("item() on tensor of shape {:?}", self.shape)),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.numel() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Surfaces NaN/Inf as a numeric error when checks are enabled.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if finite_checks_enabled() {
            if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "{context}: non-finite value {} at flat index {i}",
                    self.data[i]
                )));
            }
        }
        Ok(())
    }

    /// Elementwise binary op. `b` may be a scalar, an equal-shaped tensor,
    /// or a tensor whose shape after dropping leading unit extents is a
    /// suffix of `a`'s shape (it is then repeated over `a`'s leading axes).
    pub fn ew(&self, op: BinaryOp, rhs: Operand<'_, T>) -> Result<Self> {
        let apply = |x: f64, y: f64| -> Result<f64> {
            Ok(match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => {
                    if y == 0.0 {
                        return Err(Error::Numeric("division by exact zero".into()));
                    }
                    x / y
                }
                BinaryOp::Max => x.max(y),
            })
        };
        let data = match rhs {
            Operand::Scalar(s) => {
                let s = s.to_f64();
                self.data
                    .iter()
                    .map(|x| apply(x.to_f64(), s).map(T::from_f64))
                    .collect::<Result<Vec<_>>>()?
            }
            Operand::Tensor(b) => {
                let period = broadcast_period(&self.shape, &b.shape)?;
                self.data
                    .iter()
                    .enumerate()
                    .map(|(i, x)| apply(x.to_f64(), b.data[i % period].to_f64()).map(T::from_f64))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let out = Self { shape: self.shape.clone(), data };
        out.check_finite("ew")?;
        Ok(out)
    }

    pub fn unary(&self, op: UnaryOp) -> Result<Self> {
        let data = self
            .data
            .iter()
            .map(|x| {
                let x = x.to_f64();
                T::from_f64(match op {
                    UnaryOp::Neg => -x,
                    UnaryOp::Exp => x.exp(),
                    UnaryOp::Sqrt => x.sqrt(),
                })
            })
            .collect();
        let out = Self { shape: self.shape.clone(), data };
        out.check_finite("unary")?;
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.ew(BinaryOp::Add, Operand::Tensor(other))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.ew(BinaryOp::Sub, Operand::Tensor(other))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.ew(BinaryOp::Mul, Operand::Tensor(other))
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    /// Infallible elementwise map computed in `f64`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::from_f64(f(x.to_f64()))).collect(),
        }
    }

    /// In-place `self += other` on equal shapes; used for gradient accumulation.
    pub(crate) fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("accumulate {:?} into {:?}", other.shape, self.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = T::from_f64(a.to_f64() + b.to_f64());
        }
        Ok(())
    }

    /// `[m,p] x [p,n] -> [m,n]` with `f64` accumulation.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, p) = as_matrix(&self.shape)?;
        let (p2, n) = as_matrix(&other.shape)?;
        if p != p2 {
            return Err(shape_err!("matmul inner extents differ: {:?} x {:?}", self.shape, other.shape));
        }
        let data = matmul_raw(&self.data, &other.data, m, p, n);
        let out = Self { shape: vec![m, n], data };
        out.check_finite("matmul")?;
        Ok(out)
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (m, n) = as_matrix(&self.shape)?;
        let mut data = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                data.push(self.data[i * n + j]);
            }
        }
        Ok(Self { shape: vec![n, m], data })
    }

    /// Reduce along `axis`; the output drops that axis (rank-1 inputs give shape `[1]`).
    pub fn reduce(&self, op: ReduceOp, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(shape_err!("axis {axis} out of range for shape {:?}", self.shape));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * inner);
        let mut lane = Vec::with_capacity(len);
        for o in 0..outer {
            for i in 0..inner {
                lane.clear();
                lane.extend((0..len).map(|t| self.data[(o * len + t) * inner + i].to_f64()));
                let v = match op {
                    ReduceOp::Sum => pairwise_sum(&lane),
                    ReduceOp::Mean => pairwise_sum(&lane) / len as f64,
                    ReduceOp::Max => lane.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                };
                data.push(T::from_f64(v));
            }
        }
        let mut shape: Vec<usize> = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Self { shape, data })
    }

    /// Pairwise `f64` sum of every element.
    pub fn sum_all(&self) -> f64 {
        let v = self.to_f64_vec();
        pairwise_sum(&v)
    }

    /// Copy of `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(shape_err!(
                "narrow(axis={axis}, start={start}, len={len}) on shape {:?}",
                self.shape
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let full = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        if axis >= first.rank() {
            return Err(shape_err!("concat axis {axis} out of range for {:?}", first.shape));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err!("concat mismatch {:?} vs {:?} on axis {axis}", p.shape, first.shape));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(shape_err!("compare {:?} with {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }
}

/// Period of `b` when broadcast over `a` along leading axes.
fn broadcast_period(a: &[usize], b: &[usize]) -> Result<usize> {
    let lead = b.iter().take_while(|&&e| e == 1).count();
    let tail = &b[lead..];
    if tail.len() > a.len() || a[a.len() - tail.len()..] != *tail {
        return Err(shape_err!("cannot broadcast {b:?} onto {a:?}"));
    }
    Ok(tail.iter().product())
}

fn as_matrix(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(shape_err!("expected a matrix, got shape {shape:?}")),
    }
}

/// Row-major `[m,p] x [p,n]`, each output row accumulated in `f64`.
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, p: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; n];
    let bf: Vec<f64> = b.iter().map(|v| v.to_f64()).collect();
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..p {
            let x = a[i * p + t].to_f64();
            if x == 0.0 {
                continue;
            }
            let row = &bf[t * n..(t + 1) * n];
            for (acc, &y) in acc.iter_mut().zip(row) {
                *acc += x * y;
            }
        }
        out.extend(acc.iter().map(|&v| T::from_f64(v)));
    }
    out
}

/// Dot product with four interleaved accumulators; the summation order
/// depends only on the length.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Fixed-shape pairwise summation; the split points depend only on length.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BASE: usize = 8;
    if xs.len() <= BASE {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}
