//! Dense row-major tensors and the reverse-mode tape built on top of them.

pub mod dump;
pub mod gradcheck;
mod ops;
mod scalar;
mod tape;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, shape_err, Result};

pub use dump::{read_tensor, write_tensor, DUMP_MAGIC, DUMP_VERSION};
pub use gradcheck::grad_check;
pub use ops::{BinaryKind, ReduceKind, UnaryKind};
pub use scalar::{lit, DType, Scalar};
pub use tape::{Gradients, GradFn, Tape, Var};

/// Seeded random initializer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RandomInit {
    Uniform { bound: f64 },
    Normal { std: f64 },
}

/// Contents for [`Tensor::create`].
#[derive(Clone, Debug)]
pub enum Fill<T> {
    Value(T),
    Buffer(Vec<T>),
    Random { seed: u64, init: RandomInit },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&e| e == 0) {
        return Err(shape_err!("zero extent in shape {shape:?}"));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        if numel(shape) != data.len() {
            return Err(shape_err!(
                "buffer of length {} does not fit shape {shape:?}",
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn create(shape: &[usize], fill: Fill<T>) -> Result<Self> {
        check_shape(shape)?;
        match fill {
            Fill::Value(v) => Ok(Self::full_unchecked(shape, v)),
            Fill::Buffer(buf) => Self::new(shape, buf),
            Fill::Random { seed, init } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Self::random_with(shape, init, &mut rng)
            }
        }
    }

    pub fn random_with<R: Rng>(shape: &[usize], init: RandomInit, rng: &mut R) -> Result<Self> {
        check_shape(shape)?;
        let n = numel(shape);
        let data = match init {
            RandomInit::Uniform { bound } => {
                if !(bound >= 0.0) {
                    return Err(invalid!("uniform bound must be non-negative, got {bound}"));
                }
                (0..n)
                    .map(|_| T::from_f64(rng.random_range(-bound..=bound)))
                    .collect()
            }
            RandomInit::Normal { std } => {
                let dist = Normal::new(0.0, std)
                    .map_err(|e| invalid!("normal init with std {std}: {e}"))?;
                (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
            }
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full_unchecked(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full_unchecked(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::full_unchecked(shape, v)
    }

    fn full_unchecked(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel(shape)],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    /// `f64` buffer converted to the element type.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if numel(shape) != self.data.len() {
            return Err(shape_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_all(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Shape obtained by aligning trailing dimensions.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("shapes {a:?} and {b:?} do not broadcast")),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out_shape`; broadcast axes get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let o = i + rank - shape.len();
        strides[o] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, index_a, index_b)` for every element of the
/// broadcast shape, in row-major order.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out_shape);
    if a_shape == out_shape && b_shape == out_shape {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let inner = out_shape[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut out = 0;
    while out < n {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        for j in 0..inner {
            f(out + j, ia + j * ia_step, ib + j * ib_step);
        }
        out += inner;
        // advance the outer multi-index
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Row-major `c[m,n] (+)= op(a) * op(b)` where `op` optionally transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the assertion above bounds every access made through these strides.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
