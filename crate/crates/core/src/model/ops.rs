//! Dense kernels used by the transformer.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of a model: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    /// `C = alpha * A B + beta * C` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided view of a row-major matrix, optionally transposed.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, T: Scalar> MatRef<'a, T> {
    /// `rows x cols` matrix stored row-major with leading dimension `ld`.
    pub fn new(data: &'a [T], rows: usize, cols: usize, ld: usize) -> Self {
        debug_assert!(rows == 0 || data.len() >= (rows - 1) * ld + cols);
        Self {
            data,
            rows,
            cols,
            rs: ld as isize,
            cs: 1,
        }
    }

    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::new(data, rows, cols, cols)
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `out (+)= a * b`, where `out` is row-major with leading dimension `ld_out`.
pub fn matmul<T: Scalar>(a: MatRef<T>, b: MatRef<T>, out: &mut [T], ld_out: usize, accumulate: bool) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(out.len() >= (m - 1) * ld_out + n);
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            for r in 0..m {
                out[r * ld_out..r * ld_out + n].fill(T::zero());
            }
        }
        return;
    }
    // SAFETY: extents were checked against the slice lengths above and in MatRef::new.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            ld_out as isize,
            1,
        );
    }
}

pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    out: &mut [T],
    mean: &mut [T],
    rstd: &mut [T],
    dim: usize,
) {
    let eps = T::of(1e-5);
    let inv_dim = T::one() / T::of(dim as f64);
    for (r, (row, o)) in x.chunks_exact(dim).zip(out.chunks_exact_mut(dim)).enumerate() {
        let mu = row.iter().copied().sum::<T>() * inv_dim;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_dim;
        let rs = T::one() / (var + eps).sqrt();
        for j in 0..dim {
            o[j] = (row[j] - mu) * rs * gain[j] + bias[j];
        }
        mean[r] = mu;
        rstd[r] = rs;
    }
}

/// Accumulates gain/bias gradients and writes (or adds) the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    x: &[T],
    gain: &[T],
    mean: &[T],
    rstd: &[T],
    dout: &[T],
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
    dim: usize,
) {
    let inv_dim = T::one() / T::of(dim as f64);
    let mut xhat = vec![T::zero(); dim];
    let mut dxhat = vec![T::zero(); dim];
    for r in 0..x.len() / dim {
        let row = &x[r * dim..(r + 1) * dim];
        let dy = &dout[r * dim..(r + 1) * dim];
        let (mu, rs) = (mean[r], rstd[r]);
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for j in 0..dim {
            xhat[j] = (row[j] - mu) * rs;
            dxhat[j] = dy[j] * gain[j];
            dgain[j] += dy[j] * xhat[j];
            dbias[j] += dy[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * xhat[j];
        }
        s1 = s1 * inv_dim;
        s2 = s2 * inv_dim;
        let d = &mut dx[r * dim..(r + 1) * dim];
        for j in 0..dim {
            d[j] += rs * (dxhat[j] - s1 - xhat[j] * s2);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu<T: Scalar>(u: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * u * (T::one() + (c * (u + k * u * u * u)).tanh())
}

pub fn gelu_grad<T: Scalar>(u: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let t = (c * (u + k * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * u * u)
}

/// In-place softmax of one row; returns log-sum-exp.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
    max + sum.ln()
}

/// Precomputed rotary-embedding angles, `max_len x (head_dim / 2)`.
pub struct Rope<T> {
    cos: Vec<T>,
    sin: Vec<T>,
    half: usize,
}

impl<T: Scalar> Rope<T> {
    pub fn new(max_len: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for p in 0..max_len {
            for i in 0..half {
                let theta = base.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = p as f64 * theta;
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        Self { cos, sin, half }
    }

    /// Rotates every head of `row` (one position) in place; `inverse` undoes it.
    pub fn rotate(&self, row: &mut [T], pos: usize, head_dim: usize, inverse: bool) {
        let cs = &self.cos[pos * self.half..(pos + 1) * self.half];
        let sn = &self.sin[pos * self.half..(pos + 1) * self.half];
        for head in row.chunks_exact_mut(head_dim) {
            for i in 0..self.half {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                let (c, s) = (cs[i], if inverse { -sn[i] } else { sn[i] });
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
}
