//! Dense row-major tensors and the seeded random generator shared by every
//! numeric path.
//!
//! Feature maps are laid out `C×H×W`, batches `N×C×H×W`, convolution
//! kernels `Cout×Cin×k×k` and fully connected weights `Nout×Nin`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Element type of a [`Tensor`].
///
/// Parameters and activations are `f32`; the gradient-check suites
/// instantiate the same code with `f64`.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c ← alpha·a·b + beta·c` over strided row-major views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
                    }
                };
                assert!(span(m, k, rsa, csa) as usize <= a.len(), "gemm: lhs too short");
                assert!(span(k, n, rsb, csb) as usize <= b.len(), "gemm: rhs too short");
                assert!(span(m, n, rsc, csc) as usize <= c.len(), "gemm: output too short");
                // SAFETY: the asserts above bound every strided access inside the slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for sub-task `(a, b)` of `seed`; distinct tags give unrelated seeds.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(a)) ^ b)
}

/// Seeded generator used for every random draw in the crate.
///
/// The algorithm is ChaCha8 (`rand_chacha`), seeded through
/// `SeedableRng::seed_from_u64`, so a seed produces the same stream on every
/// platform. Independent consumers of one seed use distinct ChaCha streams.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Generator for `seed` positioned on ChaCha stream `stream`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A new generator seeded from this one's output.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.inner.next_u64())
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// One draw from `Normal(mean, std)`; `std` must be finite and `>= 0`.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        if std == 0.0 {
            return mean;
        }
        Normal::new(mean, std)
            .expect("finite non-negative std")
            .sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Entries drawn i.i.d. from `Normal(mean, std)`.
    pub fn fill_normal(shape: &[usize], mean: f64, std: f64, rng: &mut Rng) -> Result<Self> {
        if !(std >= 0.0) || !std.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "normal std must be finite and >= 0, got {std}"
            )));
        }
        let len = check_shape(shape)?;
        let data = (0..len).map(|_| T::from_f64(rng.normal(mean, std))).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn expect_same_shape(&self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "expected shape {:?}, got {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Number of elements in one step along `axis`.
    fn stride_of(&self, axis: usize) -> usize {
        self.shape[axis + 1..].iter().product()
    }

    /// Copy of the index range `[lo, hi)` along `axis`.
    pub fn slice_axis(&self, axis: usize, lo: usize, hi: usize) -> Result<Self> {
        self.check_range(axis, lo, hi)?;
        let inner = self.stride_of(axis);
        let outer: usize = self.shape[..axis].iter().product();
        let dim = self.shape[axis];
        let mut data = Vec::with_capacity(outer * (hi - lo) * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            data.extend_from_slice(&self.data[base + lo * inner..base + hi * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = hi - lo;
        Ok(Self { shape, data })
    }

    /// Overwrite the index range starting at `lo` along `axis` with `src`.
    pub fn assign_axis(&mut self, axis: usize, lo: usize, src: &Tensor<T>) -> Result<()> {
        if src.rank() != self.rank() || axis >= self.rank() {
            return Err(Error::Shape(format!(
                "cannot assign {:?} into {:?} along axis {axis}",
                src.shape, self.shape
            )));
        }
        let hi = lo + src.shape[axis];
        self.check_range(axis, lo, hi)?;
        for (d, (&a, &b)) in self.shape.iter().zip(&src.shape).enumerate() {
            if d != axis && a != b {
                return Err(Error::Shape(format!(
                    "cannot assign {:?} into {:?} along axis {axis}",
                    src.shape, self.shape
                )));
            }
        }
        let inner = self.stride_of(axis);
        let outer: usize = self.shape[..axis].iter().product();
        let dim = self.shape[axis];
        let width = (hi - lo) * inner;
        for o in 0..outer {
            let base = o * dim * inner + lo * inner;
            self.data[base..base + width].copy_from_slice(&src.data[o * width..(o + 1) * width]);
        }
        Ok(())
    }

    /// Channels `[lo, hi)` of a `C×H×W` map (the leading axis).
    pub fn slice_channels(&self, lo: usize, hi: usize) -> Result<Self> {
        self.slice_axis(0, lo, hi)
    }

    pub fn assign_channels(&mut self, lo: usize, src: &Tensor<T>) -> Result<()> {
        self.assign_axis(0, lo, src)
    }

    fn check_range(&self, axis: usize, lo: usize, hi: usize) -> Result<()> {
        let Some(&dim) = self.shape.get(axis) else {
            return Err(Error::Bounds(format!(
                "axis {axis} on tensor of rank {}",
                self.rank()
            )));
        };
        if lo >= hi || hi > dim {
            return Err(Error::Bounds(format!(
                "range [{lo}, {hi}) on axis {axis} of size {dim}"
            )));
        }
        Ok(())
    }

    /// Sample `n` of a batch, dropping the leading axis.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        let t = self.slice_axis(0, n, n + 1)?;
        let shape = if self.rank() > 1 {
            self.shape[1..].to_vec()
        } else {
            vec![1]
        };
        t.reshape(&shape)
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.expect_same_shape(t)?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }
}

impl<T: Scalar> std::ops::Index<usize> for Tensor<T> {
    type Output = T;

    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}

impl<T: Scalar> std::ops::IndexMut<usize> for Tensor<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.data[i]
    }
}
