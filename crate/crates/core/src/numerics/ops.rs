//! Pure array primitives and their backward rules.
//!
//! Matrix product accumulation order is fixed: `c[i][j]` starts at `0.0` and
//! adds `a[i][k] * b[k][j]` for `k = 0, 1, ..., K-1` in that order, with no
//! fused multiply-add. Cache blocking and row parallelism never reorder that
//! sum, so results are bit-identical to the naive triple loop.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

use super::array::{check_finite, DenseArray, NumericsError, Result};
use super::flops::{
    self, LAYERNORM_PER_ELEM, LAYERNORM_PER_SLICE, RELU_PER_ELEM, SIGMOID_PER_ELEM,
    SOFTMAX_PER_ELEM,
};

/// Layer-norm variance guard.
pub const LAYERNORM_EPS: f64 = 1e-5;

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Enables row-parallel matmul on the ambient rayon pool.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

fn mismatch(op: &'static str, a: &DenseArray, b: &DenseArray) -> NumericsError {
    NumericsError::DimensionMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

// ---------------------------------------------------------------------------
// matmul

const KB: usize = 128;
const JB: usize = 512;
const PAR_MIN_ROWS: usize = 64;

/// `MR × NR` tile of `c` held in registers. `strip` holds the tile's `MR`
/// rows of `a` interleaved by `k`, `panel` the matching `NR`-wide strip of
/// `b` row after row.
#[inline(always)]
fn tile<const MR: usize, const NR: usize>(strip: &[f64], panel: &[f64], c: &mut [f64], p: usize, i: usize, j: usize) {
    let mut acc = [[0.0f64; NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(i + r) * p + j..(i + r) * p + j + NR]);
    }
    for (av, bv) in strip.chunks_exact(MR).zip(panel.chunks_exact(NR)) {
        for (row, &ar) in acc.iter_mut().zip(av) {
            for (x, &bt) in row.iter_mut().zip(bv) {
                *x += ar * bt;
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i + r) * p + j..(i + r) * p + j + NR].copy_from_slice(row);
    }
}

// The vector tiles multiply and add in separate instructions, never fused,
// so each element is rounded exactly as in the scalar loop.

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
#[inline]
unsafe fn tile_avx512(strip: &[f64], panel: &[f64], c: &mut [f64], p: usize, i: usize, j: usize) {
    use std::arch::x86_64::*;
    const MR: usize = 6;
    assert!(strip.len() / MR == panel.len() / 16 && (i + MR - 1) * p + j + 16 <= c.len());
    let depth = panel.len() / 16;
    let cp = c.as_mut_ptr().add(i * p + j);
    let mut acc = [[_mm512_setzero_pd(); 2]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row[0] = _mm512_loadu_pd(cp.add(r * p));
        row[1] = _mm512_loadu_pd(cp.add(r * p + 8));
    }
    let (mut ap, mut bp) = (strip.as_ptr(), panel.as_ptr());
    for _ in 0..depth {
        let b0 = _mm512_loadu_pd(bp);
        let b1 = _mm512_loadu_pd(bp.add(8));
        for (r, row) in acc.iter_mut().enumerate() {
            let av = _mm512_set1_pd(*ap.add(r));
            row[0] = _mm512_add_pd(row[0], _mm512_mul_pd(av, b0));
            row[1] = _mm512_add_pd(row[1], _mm512_mul_pd(av, b1));
        }
        ap = ap.add(MR);
        bp = bp.add(16);
    }
    for (r, row) in acc.iter().enumerate() {
        _mm512_storeu_pd(cp.add(r * p), row[0]);
        _mm512_storeu_pd(cp.add(r * p + 8), row[1]);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[inline]
unsafe fn tile_avx2(strip: &[f64], panel: &[f64], c: &mut [f64], p: usize, i: usize, j: usize) {
    use std::arch::x86_64::*;
    const MR: usize = 6;
    assert!(strip.len() / MR == panel.len() / 8 && (i + MR - 1) * p + j + 8 <= c.len());
    let depth = panel.len() / 8;
    let cp = c.as_mut_ptr().add(i * p + j);
    let mut acc = [[_mm256_setzero_pd(); 2]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row[0] = _mm256_loadu_pd(cp.add(r * p));
        row[1] = _mm256_loadu_pd(cp.add(r * p + 4));
    }
    let (mut ap, mut bp) = (strip.as_ptr(), panel.as_ptr());
    for _ in 0..depth {
        let b0 = _mm256_loadu_pd(bp);
        let b1 = _mm256_loadu_pd(bp.add(4));
        for (r, row) in acc.iter_mut().enumerate() {
            let av = _mm256_set1_pd(*ap.add(r));
            row[0] = _mm256_add_pd(row[0], _mm256_mul_pd(av, b0));
            row[1] = _mm256_add_pd(row[1], _mm256_mul_pd(av, b1));
        }
        ap = ap.add(MR);
        bp = bp.add(8);
    }
    for (r, row) in acc.iter().enumerate() {
        _mm256_storeu_pd(cp.add(r * p), row[0]);
        _mm256_storeu_pd(cp.add(r * p + 4), row[1]);
    }
}

#[inline(always)]
fn row_segment(a: &[f64], b: &[f64], c: &mut [f64], k: usize, p: usize, i: usize, (j0, j1): (usize, usize), (kb, ke): (usize, usize)) {
    let arow = &a[i * k..(i + 1) * k];
    let crow = &mut c[i * p + j0..i * p + j1];
    for kk in kb..ke {
        let aik = arow[kk];
        for (cv, bv) in crow.iter_mut().zip(&b[kk * p + j0..kk * p + j1]) {
            *cv += aik * bv;
        }
    }
}

#[inline(always)]
fn matmul_rows_tiled<const MR: usize, const NR: usize>(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    k: usize,
    p: usize,
    kernel: impl Fn(&[f64], &[f64], &mut [f64], usize, usize, usize),
) {
    let m = c.len() / p;
    let mut packed = Vec::new();
    let mut strip = Vec::with_capacity(MR * KB);
    let mut jb = 0;
    while jb < p {
        let je = (jb + JB).min(p);
        let jt = jb + (je - jb) / NR * NR;
        let mut kb = 0;
        while kb < k {
            let ke = (kb + KB).min(k);
            let depth = ke - kb;
            packed.clear();
            if m >= MR {
                for j in (jb..jt).step_by(NR) {
                    for kk in kb..ke {
                        packed.extend_from_slice(&b[kk * p + j..kk * p + j + NR]);
                    }
                }
            }
            let mut i = 0;
            while i + MR <= m {
                strip.clear();
                for kk in kb..ke {
                    strip.extend((i..i + MR).map(|r| a[r * k + kk]));
                }
                for (n, j) in (jb..jt).step_by(NR).enumerate() {
                    let panel = &packed[n * depth * NR..(n + 1) * depth * NR];
                    kernel(&strip, panel, c, p, i, j);
                }
                if jt < je {
                    for r in i..i + MR {
                        row_segment(a, b, c, k, p, r, (jt, je), (kb, ke));
                    }
                }
                i += MR;
            }
            for r in i..m {
                row_segment(a, b, c, k, p, r, (jb, je), (kb, ke));
            }
            kb = ke;
        }
        jb = je;
    }
}

fn matmul_rows_generic(a: &[f64], b: &[f64], c: &mut [f64], k: usize, p: usize) {
    matmul_rows_tiled::<4, 8>(a, b, c, k, p, tile::<4, 8>)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_rows_avx2(a: &[f64], b: &[f64], c: &mut [f64], k: usize, p: usize) {
    // SAFETY: this function only runs on CPUs with AVX2.
    matmul_rows_tiled::<6, 8>(a, b, c, k, p, |s, pn, c, p, i, j| unsafe { tile_avx2(s, pn, c, p, i, j) })
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn matmul_rows_avx512(a: &[f64], b: &[f64], c: &mut [f64], k: usize, p: usize) {
    // SAFETY: this function only runs on CPUs with AVX-512F.
    matmul_rows_tiled::<6, 16>(a, b, c, k, p, |s, pn, c, p, i, j| unsafe { tile_avx512(s, pn, c, p, i, j) })
}

fn matmul_rows(a: &[f64], b: &[f64], c: &mut [f64], k: usize, p: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports AVX-512F, checked just above.
            unsafe { matmul_rows_avx512(a, b, c, k, p) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { matmul_rows_avx2(a, b, c, k, p) };
            return;
        }
    }
    matmul_rows_generic(a, b, c, k, p)
}

/// `a[M×K] · b[K×P]`.
pub fn matmul(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    a.expect_rank("matmul", 2)?;
    b.expect_rank("matmul", 2)?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, p) = (b.rows(), b.cols());
    if k != k2 {
        return Err(mismatch("matmul", a, b));
    }
    flops::count(2 * (m * k * p) as u64, (m * p) as u64);
    let mut c = vec![0.0; m * p];
    if p > 0 && k > 0 {
        let (ad, bd) = (a.data(), b.data());
        if parallel_enabled() && m >= PAR_MIN_ROWS {
            let rows_per = m.div_ceil(rayon::current_num_threads().max(1) * 4).max(8);
            c.par_chunks_mut(rows_per * p)
                .zip(ad.par_chunks(rows_per * k))
                .for_each(|(cc, ac)| matmul_rows(ac, bd, cc, k, p));
        } else {
            matmul_rows(ad, bd, &mut c, k, p);
        }
    }
    DenseArray::checked("matmul", vec![m, p], c)
}

pub fn transpose(a: &DenseArray) -> Result<DenseArray> {
    a.expect_rank("transpose", 2)?;
    let (m, n) = (a.rows(), a.cols());
    let src = a.data();
    let mut out = vec![0.0; m * n];
    const T: usize = 32;
    for ib in (0..m).step_by(T) {
        for jb in (0..n).step_by(T) {
            for i in ib..(ib + T).min(m) {
                for j in jb..(jb + T).min(n) {
                    out[j * m + i] = src[i * n + j];
                }
            }
        }
    }
    Ok(DenseArray::from_parts(vec![n, m], out))
}

// ---------------------------------------------------------------------------
// elementwise

fn zip_with(
    op: &'static str,
    a: &DenseArray,
    b: &DenseArray,
    f: impl Fn(f64, f64) -> f64,
) -> Result<DenseArray> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a, b));
    }
    flops::count(a.len() as u64, a.len() as u64);
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    DenseArray::checked(op, a.shape().to_vec(), data)
}

pub fn add(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    zip_with("sub", a, b, |x, y| x - y)
}

/// Hadamard product.
pub fn mul(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &DenseArray, s: f64) -> Result<DenseArray> {
    flops::count(a.len() as u64, a.len() as u64);
    let data = a.data().iter().map(|v| v * s).collect();
    DenseArray::checked("scale", a.shape().to_vec(), data)
}

/// `1 - a`, elementwise.
pub fn one_minus(a: &DenseArray) -> Result<DenseArray> {
    flops::count(a.len() as u64, a.len() as u64);
    let data = a.data().iter().map(|v| 1.0 - v).collect();
    DenseArray::checked("one_minus", a.shape().to_vec(), data)
}

/// `dst += src` in place (gradient accumulation).
pub fn add_assign(dst: &mut DenseArray, src: &DenseArray) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(mismatch("add_assign", dst, src));
    }
    flops::count(dst.len() as u64, dst.len() as u64);
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
    check_finite("add_assign", dst.data())
}

/// Adds the vector `v` (length C, any rank with C elements) to every row of `a[N×C]`.
pub fn add_row(a: &DenseArray, v: &DenseArray) -> Result<DenseArray> {
    a.expect_rank("add_row", 2)?;
    let c = a.cols();
    if v.len() != c {
        return Err(mismatch("add_row", a, v));
    }
    flops::count(a.len() as u64, a.len() as u64);
    let vd = v.data();
    let mut data = a.data().to_vec();
    for row in data.chunks_mut(c.max(1)) {
        for (x, b) in row.iter_mut().zip(vd) {
            *x += b;
        }
    }
    DenseArray::checked("add_row", a.shape().to_vec(), data)
}

/// Multiplies row `i` of `a[N×C]` by `coef[i]`.
pub fn scale_rows(a: &DenseArray, coef: &[f64]) -> Result<DenseArray> {
    a.expect_rank("scale_rows", 2)?;
    if coef.len() != a.rows() {
        return Err(NumericsError::DimensionMismatch {
            op: "scale_rows",
            lhs: a.shape().to_vec(),
            rhs: vec![coef.len()],
        });
    }
    flops::count(a.len() as u64, a.len() as u64);
    let c = a.cols();
    let mut data = a.data().to_vec();
    for (row, &s) in data.chunks_mut(c.max(1)).zip(coef) {
        row.iter_mut().for_each(|x| *x *= s);
    }
    DenseArray::checked("scale_rows", a.shape().to_vec(), data)
}

/// Column sums of `a[N×C]` as a length-C vector.
pub fn sum_rows(a: &DenseArray) -> Result<DenseArray> {
    a.expect_rank("sum_rows", 2)?;
    let c = a.cols();
    flops::count(a.len() as u64, c as u64);
    let mut out = vec![0.0; c];
    for row in a.data().chunks(c.max(1)) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    DenseArray::checked("sum_rows", vec![c], out)
}

/// Row-wise dot products of equally shaped `a[N×C]` and `b[N×C]`.
pub fn row_dots(a: &DenseArray, b: &DenseArray) -> Result<Vec<f64>> {
    a.expect_rank("row_dots", 2)?;
    if a.shape() != b.shape() {
        return Err(mismatch("row_dots", a, b));
    }
    flops::count(2 * a.len() as u64, a.rows() as u64);
    let c = a.cols().max(1);
    Ok(a.data()
        .chunks(c)
        .zip(b.data().chunks(c))
        .map(|(x, y)| x.iter().zip(y).fold(0.0, |s, (p, q)| s + p * q))
        .collect())
}

// ---------------------------------------------------------------------------
// data movement (no arithmetic)

pub fn concat_cols(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    a.expect_rank("concat_cols", 2)?;
    b.expect_rank("concat_cols", 2)?;
    if a.rows() != b.rows() {
        return Err(mismatch("concat_cols", a, b));
    }
    let (ca, cb) = (a.cols(), b.cols());
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..a.rows() {
        data.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
        data.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
    }
    Ok(DenseArray::from_parts(vec![a.rows(), ca + cb], data))
}

/// Columns `[start, start + width)` of `a[N×C]`.
pub fn column_block(a: &DenseArray, start: usize, width: usize) -> Result<DenseArray> {
    a.expect_rank("column_block", 2)?;
    let c = a.cols();
    if start + width > c {
        return Err(NumericsError::IndexOutOfRange {
            op: "column_block",
            index: start + width,
            len: c,
        });
    }
    let mut data = Vec::with_capacity(a.rows() * width);
    for i in 0..a.rows() {
        data.extend_from_slice(&a.data()[i * c + start..i * c + start + width]);
    }
    Ok(DenseArray::from_parts(vec![a.rows(), width], data))
}

/// Writes `src[N×w]` into columns `[start, start + w)` of `dst[N×C]`.
pub fn set_column_block(dst: &mut DenseArray, start: usize, src: &DenseArray) -> Result<()> {
    dst.expect_rank("set_column_block", 2)?;
    src.expect_rank("set_column_block", 2)?;
    let (c, w) = (dst.cols(), src.cols());
    if src.rows() != dst.rows() || start + w > c {
        return Err(mismatch("set_column_block", dst, src));
    }
    let rows = dst.rows();
    let d = dst.data_mut();
    for i in 0..rows {
        d[i * c + start..i * c + start + w].copy_from_slice(&src.data()[i * w..(i + 1) * w]);
    }
    Ok(())
}

pub fn gather_rows(a: &DenseArray, index: &[usize]) -> Result<DenseArray> {
    a.expect_rank("gather_rows", 2)?;
    let (n, c) = (a.rows(), a.cols());
    let mut data = Vec::with_capacity(index.len() * c);
    for &i in index {
        if i >= n {
            return Err(NumericsError::IndexOutOfRange {
                op: "gather_rows",
                index: i,
                len: n,
            });
        }
        data.extend_from_slice(a.row(i));
    }
    Ok(DenseArray::from_parts(vec![index.len(), c], data))
}

/// Writes row `j` of `rows` into row `index[j]` of `dst`.
pub fn scatter_rows(dst: &mut DenseArray, index: &[usize], rows: &DenseArray) -> Result<()> {
    dst.expect_rank("scatter_rows", 2)?;
    rows.expect_rank("scatter_rows", 2)?;
    if rows.rows() != index.len() || rows.cols() != dst.cols() {
        return Err(mismatch("scatter_rows", dst, rows));
    }
    let n = dst.rows();
    for (j, &i) in index.iter().enumerate() {
        if i >= n {
            return Err(NumericsError::IndexOutOfRange {
                op: "scatter_rows",
                index: i,
                len: n,
            });
        }
        dst.row_mut(i).copy_from_slice(rows.row(j));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// axis utilities

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(NumericsError::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Calls `f` with the flat indices of every slice along the axis.
fn for_each_slice(outer: usize, len: usize, inner: usize, mut f: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; len];
    for o in 0..outer {
        for k in 0..inner {
            for (i, slot) in idx.iter_mut().enumerate() {
                *slot = (o * len + i) * inner + k;
            }
            f(&idx);
        }
    }
}

// ---------------------------------------------------------------------------
// softmax

/// Softmax along `axis`, computed as `exp(x - max) / Σ exp(x - max)`.
pub fn softmax(x: &DenseArray, axis: usize) -> Result<DenseArray> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    flops::count(SOFTMAX_PER_ELEM * x.len() as u64, x.len() as u64);
    let src = x.data();
    let mut out = vec![0.0; x.len()];
    if inner == 1 {
        for (row_in, row_out) in src.chunks(len.max(1)).zip(out.chunks_mut(len.max(1))) {
            softmax_slice(row_in, row_out);
        }
    } else {
        let mut buf_in = vec![0.0; len];
        let mut buf_out = vec![0.0; len];
        for_each_slice(outer, len, inner, |idx| {
            for (b, &i) in buf_in.iter_mut().zip(idx) {
                *b = src[i];
            }
            softmax_slice(&buf_in, &mut buf_out);
            for (&b, &i) in buf_out.iter().zip(idx) {
                out[i] = b;
            }
        });
    }
    DenseArray::checked("softmax", x.shape().to_vec(), out)
}

fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Given `y = softmax(x, axis)` and `dy`, returns `dx = y ⊙ (dy − Σ dy⊙y)`.
pub fn softmax_backward(y: &DenseArray, dy: &DenseArray, axis: usize) -> Result<DenseArray> {
    if y.shape() != dy.shape() {
        return Err(mismatch("softmax_backward", y, dy));
    }
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let (yd, dyd) = (y.data(), dy.data());
    let mut out = vec![0.0; y.len()];
    for_each_slice(outer, len, inner, |idx| {
        let dot: f64 = idx.iter().fold(0.0, |s, &i| s + yd[i] * dyd[i]);
        for &i in idx {
            out[i] = yd[i] * (dyd[i] - dot);
        }
    });
    DenseArray::checked("softmax_backward", y.shape().to_vec(), out)
}

// ---------------------------------------------------------------------------
// activations

fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &DenseArray) -> Result<DenseArray> {
    flops::count(SIGMOID_PER_ELEM * x.len() as u64, x.len() as u64);
    let data = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    DenseArray::checked("sigmoid", x.shape().to_vec(), data)
}

/// Scalar logistic function used outside array code (losses, metrics).
pub fn sigmoid_f64(v: f64) -> f64 {
    sigmoid_scalar(v)
}

pub fn relu(x: &DenseArray) -> Result<DenseArray> {
    flops::count(RELU_PER_ELEM * x.len() as u64, x.len() as u64);
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Ok(DenseArray::from_parts(x.shape().to_vec(), data))
}

/// Passes `dy` where the pre-activation was strictly positive.
pub fn relu_backward(pre: &DenseArray, dy: &DenseArray) -> Result<DenseArray> {
    if pre.shape() != dy.shape() {
        return Err(mismatch("relu_backward", pre, dy));
    }
    let data = pre
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect();
    Ok(DenseArray::from_parts(dy.shape().to_vec(), data))
}

// ---------------------------------------------------------------------------
// layer norm

/// Intermediates kept for [`layernorm_backward`].
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    axis: usize,
    xhat: DenseArray,
    /// One reciprocal standard deviation per slice, in slice visiting order.
    rstd: Vec<f64>,
}

impl LayerNormCache {
    pub fn normalized(&self) -> &DenseArray {
        &self.xhat
    }
}

/// Normalizes every slice along `axis` to zero mean and unit variance, then
/// applies `gamma ⊙ x̂ + beta`. The mean is computed relative to the first
/// element of the slice, so a constant slice gives `x̂ = 0` exactly and the
/// output equals `beta`.
pub fn layernorm(
    x: &DenseArray,
    gamma: &DenseArray,
    beta: &DenseArray,
    axis: usize,
) -> Result<DenseArray> {
    layernorm_forward(x, gamma, beta, axis).map(|(y, _)| y)
}

pub fn layernorm_forward(
    x: &DenseArray,
    gamma: &DenseArray,
    beta: &DenseArray,
    axis: usize,
) -> Result<(DenseArray, LayerNormCache)> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    if gamma.len() != len || beta.len() != len {
        return Err(mismatch("layernorm", x, gamma));
    }
    let slices = (outer * inner) as u64;
    flops::count(
        LAYERNORM_PER_ELEM * x.len() as u64 + LAYERNORM_PER_SLICE * slices,
        x.len() as u64,
    );
    let (src, g, b) = (x.data(), gamma.data(), beta.data());
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut rstds = Vec::with_capacity(slices as usize);
    let n = len as f64;
    for_each_slice(outer, len, inner, |idx| {
        let first = src[idx[0]];
        let shifted: f64 = idx.iter().fold(0.0, |s, &i| s + (src[i] - first));
        let mean = first + shifted / n;
        let var = idx.iter().fold(0.0, |s, &i| {
            let d = src[i] - mean;
            s + d * d
        }) / n;
        let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
        for (pos, &i) in idx.iter().enumerate() {
            let xh = (src[i] - mean) * rstd;
            xhat[i] = xh;
            out[i] = xh * g[pos] + b[pos];
        }
        rstds.push(rstd);
    });
    let y = DenseArray::checked("layernorm", x.shape().to_vec(), out)?;
    let cache = LayerNormCache {
        axis,
        xhat: DenseArray::from_parts(x.shape().to_vec(), xhat),
        rstd: rstds,
    };
    Ok((y, cache))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layernorm_backward(
    cache: &LayerNormCache,
    gamma: &DenseArray,
    dy: &DenseArray,
) -> Result<(DenseArray, DenseArray, DenseArray)> {
    let xhat = &cache.xhat;
    if xhat.shape() != dy.shape() {
        return Err(mismatch("layernorm_backward", xhat, dy));
    }
    let (outer, len, inner) = axis_split(xhat.shape(), cache.axis)?;
    let (xh, g, dyd) = (xhat.data(), gamma.data(), dy.data());
    let mut dx = vec![0.0; xhat.len()];
    let mut dgamma = vec![0.0; len];
    let mut dbeta = vec![0.0; len];
    let n = len as f64;
    let mut slice = 0;
    for_each_slice(outer, len, inner, |idx| {
        let rstd = cache.rstd[slice];
        slice += 1;
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for (pos, &i) in idx.iter().enumerate() {
            let d = dyd[i] * g[pos];
            sum_d += d;
            sum_dx += d * xh[i];
            dgamma[pos] += dyd[i] * xh[i];
            dbeta[pos] += dyd[i];
        }
        for (pos, &i) in idx.iter().enumerate() {
            let d = dyd[i] * g[pos];
            dx[i] = rstd / n * (n * d - sum_d - xh[i] * sum_dx);
        }
    });
    Ok((
        DenseArray::checked("layernorm_backward", xhat.shape().to_vec(), dx)?,
        DenseArray::checked("layernorm_backward", gamma.shape().to_vec(), dgamma)?,
        DenseArray::checked("layernorm_backward", gamma.shape().to_vec(), dbeta)?,
    ))
}
