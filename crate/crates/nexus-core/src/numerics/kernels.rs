//! Raw compute kernels shared by the eager `f32` forward pass and the `f64`
//! oracle replay. All loops run in a fixed order so repeated execution is
//! bit-identical; row/column reductions accumulate in 64-bit.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Element type the tape can execute with (`f32` in production, `f64` in the
/// finite-difference oracle).
pub trait Scalar:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Send
    + Sync
    + std::fmt::Debug
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn copysign(self, sign: Self) -> Self;
    fn is_finite(self) -> bool;
    fn take_buf(len: usize) -> Vec<Self>;
    fn give_buf(v: Vec<Self>);
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        exp_poly_f32(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn copysign(self, sign: Self) -> Self {
        f32::copysign(self, sign)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn take_buf(len: usize) -> Vec<Self> {
        POOL_F32.with_borrow_mut(|p| take_from(p, len))
    }
    fn give_buf(v: Vec<Self>) {
        POOL_F32.with_borrow_mut(|p| give_to(p, v));
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn copysign(self, sign: Self) -> Self {
        f64::copysign(self, sign)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn take_buf(len: usize) -> Vec<Self> {
        POOL_F64.with_borrow_mut(|p| take_from(p, len))
    }
    fn give_buf(v: Vec<Self>) {
        POOL_F64.with_borrow_mut(|p| give_to(p, v));
    }
}

type Buckets<T> = std::collections::HashMap<usize, Vec<Vec<T>>>;

thread_local! {
    static POOL_F32: std::cell::RefCell<Buckets<f32>> = std::cell::RefCell::new(Buckets::new());
    static POOL_F64: std::cell::RefCell<Buckets<f64>> = std::cell::RefCell::new(Buckets::new());
}

// Buffers are bucketed by capacity so a request never triggers a realloc of
// a recycled undersized vector.
const BUCKET_CAP: usize = 64;

fn take_from<T: Copy + Default>(pool: &mut Buckets<T>, len: usize) -> Vec<T> {
    if let Some(bucket) = pool.get_mut(&len) {
        if let Some(mut v) = bucket.pop() {
            v.clear();
            v.resize(len, T::default());
            return v;
        }
    }
    vec![T::default(); len]
}

fn give_to<T>(pool: &mut Buckets<T>, v: Vec<T>) {
    let cap = v.capacity();
    if cap == 0 {
        return;
    }
    let bucket = pool.entry(cap).or_default();
    if bucket.len() < BUCKET_CAP {
        bucket.push(v);
    }
}

/// Zeroed buffer recycled through a thread-local pool. Training allocates
/// hundreds of activation buffers per step; first-touch page faults on fresh
/// allocations would otherwise dominate the small matmuls.
pub fn take_buf<S: Scalar>(len: usize) -> Vec<S> {
    S::take_buf(len)
}

pub fn give_buf<S: Scalar>(v: Vec<S>) {
    S::give_buf(v)
}

/// Polynomial exp for f32: exp(x) = 2^k * exp(r) with k = round(x / ln 2),
/// degree-6 Taylor on |r| <= ln2/2, input clamped to +-87.3. Branch-free,
/// vectorizable, relative error ~1e-7; pure arithmetic so the result is a
/// fixed function of the input bits.
#[inline]
pub fn exp_poly_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    let x = x.clamp(-87.3, 87.3);
    let k = (x * LOG2E).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.666_666_7e-1
                    + r * (4.166_666_8e-2 + r * (8.333_334e-3 + r * 1.388_889e-3)))));
    let bits = (((k as i32) + 127) as u32) << 23;
    p * f32::from_bits(bits)
}

/// out[n,m] += a[n,k] * b[k,m]. Per output element the k-sum groups four
/// consecutive k terms into one fixed tree `(t0+t1)+(t2+t3)`, groups in
/// increasing k, tail terms appended sequentially — the same order on every
/// run and every dtype.
pub fn matmul_nn_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    let kc = k / 4 * 4;
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        let mut l = 0;
        while l < kc {
            let (a0, a1, a2, a3) = (arow[l], arow[l + 1], arow[l + 2], arow[l + 3]);
            let b0 = &b[l * m..(l + 1) * m];
            let b1 = &b[(l + 1) * m..(l + 2) * m];
            let b2 = &b[(l + 2) * m..(l + 3) * m];
            let b3 = &b[(l + 3) * m..(l + 4) * m];
            for j in 0..m {
                orow[j] = orow[j] + ((a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]));
            }
            l += 4;
        }
        while l < k {
            let ail = arow[l];
            let brow = &b[l * m..(l + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + ail * bv;
            }
            l += 1;
        }
    }
}

pub fn matmul_nn<S: Scalar>(a: &[S], b: &[S], n: usize, k: usize, m: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; n * m];
    matmul_nn_acc(a, b, &mut out, n, k, m);
    out
}

/// out[n,m] += a[n,k] * b[m,k]^T — rows of `a` dotted with rows of `b`.
/// Each dot uses four fixed lanes combined as ((l0+l1)+(l2+l3)).
pub fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = out[i * m + j] + dot(arow, brow);
        }
    }
}

/// out[k,m] += a[n,k]^T * b[n,m] — accumulated as ordered rank-1 updates.
pub fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), n * m);
    debug_assert_eq!(out.len(), k * m);
    for l in 0..n {
        let arow = &a[l * k..(l + 1) * k];
        let brow = &b[l * m..(l + 1) * m];
        for (i, &ali) in arow.iter().enumerate() {
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + ali * bv;
            }
        }
    }
}

/// Fixed-tree dot product: four parallel lanes, combined in one order.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [S::ZERO; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        lanes[0] = lanes[0] + a[i] * b[i];
        lanes[1] = lanes[1] + a[i + 1] * b[i + 1];
        lanes[2] = lanes[2] + a[i + 2] * b[i + 2];
        lanes[3] = lanes[3] + a[i + 3] * b[i + 3];
    }
    let mut tail = S::ZERO;
    for i in chunks * 4..a.len() {
        tail = tail + a[i] * b[i];
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// Sequential 64-bit sum (row-major order).
pub fn sum_f64<S: Scalar>(xs: &[S]) -> f64 {
    let mut acc = 0.0f64;
    for &x in xs {
        acc += x.to_f64();
    }
    acc
}

/// Row-wise softmax with max subtraction; denominator accumulates in f64.
/// `limit(i)` gives the active prefix length of row i (full width when
/// non-causal); entries past the limit are zeroed.
pub fn softmax_rows_limited<S: Scalar>(
    x: &[S],
    out: &mut [S],
    rows: usize,
    cols: usize,
    limit: impl Fn(usize) -> usize,
) {
    for i in 0..rows {
        let lim = limit(i).min(cols);
        let row = &x[i * cols..i * cols + lim];
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let orow = &mut out[i * cols..(i + 1) * cols];
        let mut denom = 0.0f64;
        for (o, &v) in orow[..lim].iter_mut().zip(row) {
            let e = (v - mx).exp();
            denom += e.to_f64();
            *o = e;
        }
        let inv = S::from_f64(1.0 / denom);
        for o in orow[..lim].iter_mut() {
            *o = *o * inv;
        }
        for o in orow[lim..].iter_mut() {
            *o = S::ZERO;
        }
    }
}

pub fn softmax_rows<S: Scalar>(x: &[S], out: &mut [S], rows: usize, cols: usize) {
    softmax_rows_limited(x, out, rows, cols, |_| cols);
}

/// GELU, tanh approximation:
/// 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3))).
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC_COEF: f64 = 0.044_715;

/// tanh evaluated through exp: tanh(u) = sign(u) * (1 - e) / (1 + e) with
/// e = exp(-2|u|). Identical function to tanh, roughly 3x cheaper than libm,
/// branch-free (the exponent is never positive) so the surrounding loops
/// vectorize.
#[inline]
pub fn tanh_via_exp<S: Scalar>(u: S) -> S {
    let two = S::from_f64(2.0);
    let e = (-(two * u.abs())).exp();
    ((S::ONE - e) / (S::ONE + e)).copysign(u)
}

pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_SQRT_2_OVER_PI);
    let k = S::from_f64(GELU_CUBIC_COEF);
    let half = S::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (S::ONE + tanh_via_exp(u))
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_SQRT_2_OVER_PI);
    let k = S::from_f64(GELU_CUBIC_COEF);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = tanh_via_exp(u);
    let sech2 = S::ONE - t * t;
    half * (S::ONE + t) + half * x * sech2 * c * (S::ONE + three * k * x * x)
}

/// Row mean and inverse stddev for layer norm, computed in f64.
pub fn row_moments<S: Scalar>(row: &[S], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = sum_f64(row) / n;
    let mut var = 0.0f64;
    for &v in row {
        let d = v.to_f64() - mean;
        var += d * d;
    }
    var /= n;
    (mean, 1.0 / (var + eps).sqrt())
}
