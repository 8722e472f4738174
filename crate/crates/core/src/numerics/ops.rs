//! Forward kernels on [`Tensor`] values. The tape in [`super::tape`] records
//! these and supplies the matching adjoints.

use serde::{Deserialize, Serialize};

use super::tensor::{numel, Real, Tensor};
use crate::error::{dim_err, Result};

// ── dense linear algebra ─────────────────────────────────────────────

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    s + tail
}

/// `out += a · b` with `a: m×k`, `b: k×n`.
pub(crate) fn mm_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn mm_a_bt_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out += aᵀ · b` with `a: k×m`, `b: k×n`.
pub(crate) fn mm_at_b_acc<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize, out: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
}

fn matrix_dims<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => dim_err(format!("{what} must be a matrix, got shape {s:?}")),
    }
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a, "matmul lhs")?;
    let (k2, n) = matrix_dims(b, "matmul rhs")?;
    if k != k2 {
        return dim_err(format!(
            "matmul inner extents differ: {:?} × {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![T::zero(); m * n];
    mm_acc(a.data(), b.data(), m, k, n, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = matrix_dims(a, "transpose input")?;
    let src = a.data();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

// ── softmax ──────────────────────────────────────────────────────────

pub fn softmax_lastdim<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = match x.shape().last() {
        Some(&n) => n,
        None => return dim_err("softmax needs rank ≥ 1"),
    };
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

// ── convolution ──────────────────────────────────────────────────────

/// Output extent of a convolution along one axis, or `None` if it would be < 1.
pub fn conv_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], kernels: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (c_in, h, w) = match x {
            [c, h, w] => (*c, *h, *w),
            s => return dim_err(format!("conv2d input must be C×H×W, got {s:?}")),
        };
        let (c_out, kc, kh, kw) = match kernels {
            [o, c, kh, kw] => (*o, *c, *kh, *kw),
            s => return dim_err(format!("conv2d kernels must be Cout×Cin×k×k, got {s:?}")),
        };
        if kc != c_in {
            return dim_err(format!(
                "conv2d channel mismatch: input {x:?}, kernels {kernels:?}"
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return dim_err(format!(
                "conv2d kernel must be square and odd, got {kh}×{kw}"
            ));
        }
        let out_h = conv_out_extent(h, kh, stride, padding);
        let out_w = conv_out_extent(w, kw, stride, padding);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) => Ok(ConvGeom {
                c_in,
                h,
                w,
                c_out,
                k: kh,
                stride,
                padding,
                out_h,
                out_w,
            }),
            _ => dim_err(format!(
                "conv2d output extent < 1 for input {x:?}, kernel {kh}, stride {stride}, padding {padding}"
            )),
        }
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds input patches into a `(C_in·k·k) × (H'·W')` matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let mut cols = vec![T::zero(); g.patch_len() * p];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[r * p..(r + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let src = &cols[r * p..(r + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D cross-correlation of a `C_in×H×W` input with `C_out×C_in×k×k` kernels.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), kernels.shape(), stride, padding)?;
    let cols = im2col(x.data(), &g);
    let mut out = vec![T::zero(); g.c_out * g.positions()];
    mm_acc(
        kernels.data(),
        &cols,
        g.c_out,
        g.patch_len(),
        g.positions(),
        &mut out,
    );
    Ok(Tensor::from_parts(vec![g.c_out, g.out_h, g.out_w], out))
}

// ── elementwise with broadcasting ────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementwiseKind {
    Add,
    Mul,
    Sub,
    Relu,
    Sigmoid,
}

impl ElementwiseKind {
    pub fn is_binary(self) -> bool {
        matches!(
            self,
            ElementwiseKind::Add | ElementwiseKind::Mul | ElementwiseKind::Sub
        )
    }
}

/// Right-aligned broadcast of two shapes; an extent of 1 stretches.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let ea = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let eb = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (ea, eb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return dim_err(format!("shapes {a:?} and {b:?} are not broadcastable")),
        };
    }
    Ok(out)
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[off + i] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Visits every output position of a broadcast together with the flat
/// offsets into each operand.
fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let n = numel(out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..n {
        f(i, ia, ib);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); numel(&shape)];
    let (da, db) = (a.data(), b.data());
    for_each_broadcast(&shape, a.shape(), b.shape(), |i, ia, ib| {
        out[i] = f(da[ia], db[ib]);
    });
    Ok(Tensor::from_parts(shape, out))
}

pub fn broadcast_to<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let target = broadcast_shape(x.shape(), shape)?;
    if target != shape {
        return dim_err(format!("cannot broadcast {:?} to {:?}", x.shape(), shape));
    }
    let mut out = vec![T::zero(); numel(shape)];
    let src = x.data();
    for_each_broadcast(shape, x.shape(), shape, |i, ia, _| out[i] = src[ia]);
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Sums a broadcast result back down to `shape` (adjoint of [`broadcast_to`]).
pub(crate) fn sum_to_shape<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = vec![T::zero(); numel(shape)];
    let src = g.data();
    for_each_broadcast(g.shape(), shape, g.shape(), |i, ia, _| out[ia] += src[i]);
    Tensor::from_parts(shape.to_vec(), out)
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn elementwise<T: Real>(
    kind: ElementwiseKind,
    a: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    match (kind, b) {
        (ElementwiseKind::Add, Some(b)) => broadcast_binary(a, b, |x, y| x + y),
        (ElementwiseKind::Sub, Some(b)) => broadcast_binary(a, b, |x, y| x - y),
        (ElementwiseKind::Mul, Some(b)) => broadcast_binary(a, b, |x, y| x * y),
        (ElementwiseKind::Relu, None) => Ok(relu(a)),
        (ElementwiseKind::Sigmoid, None) => Ok(sigmoid(a)),
        (k, _) if k.is_binary() => dim_err(format!("{k:?} needs two operands")),
        (k, _) => dim_err(format!("{k:?} takes one operand")),
    }
}

// ── bilinear resampling ──────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    pub i0: usize,
    pub i1: usize,
    pub w0: T,
    pub w1: T,
}

/// Half-pixel-centre sampling taps (`align_corners = false` convention).
pub(crate) fn bilinear_taps<T: Real>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: T::from_f64(1.0 - frac),
                w1: T::from_f64(frac),
            }
        })
        .collect()
}

fn plane_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w] => Ok((1, *h, *w)),
        [c, h, w] => Ok((*c, *h, *w)),
        s => dim_err(format!("bilinear resize needs H×W or C×H×W, got {s:?}")),
    }
}

fn resized_shape(shape: &[usize], out_h: usize, out_w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let r = s.len();
    s[r - 2] = out_h;
    s[r - 1] = out_w;
    s
}

/// Bilinear resampling of each plane of an `H×W` or `C×H×W` tensor.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = plane_dims(x.shape())?;
    if out_h == 0 || out_w == 0 {
        return dim_err("bilinear resize to a zero extent");
    }
    let ty = bilinear_taps::<T>(h, out_h);
    let tx = bilinear_taps::<T>(w, out_w);
    let src = x.data();
    let mut out = vec![T::zero(); c * out_h * out_w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, a) in ty.iter().enumerate() {
            let r0 = &plane[a.i0 * w..(a.i0 + 1) * w];
            let r1 = &plane[a.i1 * w..(a.i1 + 1) * w];
            for (ox, b) in tx.iter().enumerate() {
                dst[oy * out_w + ox] = a.w0 * (b.w0 * r0[b.i0] + b.w1 * r0[b.i1])
                    + a.w1 * (b.w0 * r1[b.i0] + b.w1 * r1[b.i1]);
            }
        }
    }
    Ok(Tensor::from_parts(
        resized_shape(x.shape(), out_h, out_w),
        out,
    ))
}

/// Adjoint of [`bilinear_resize`]: maps an output-sized gradient to the input grid.
pub(crate) fn bilinear_resize_adjoint<T: Real>(g: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (c, h, w) = plane_dims(in_shape).expect("shape validated on forward");
    let r = g.rank();
    let (out_h, out_w) = (g.shape()[r - 2], g.shape()[r - 1]);
    let ty = bilinear_taps::<T>(h, out_h);
    let tx = bilinear_taps::<T>(w, out_w);
    let src = g.data();
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let gp = &src[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v = gp[oy * out_w + ox];
                dst[a.i0 * w + b.i0] += a.w0 * b.w0 * v;
                dst[a.i0 * w + b.i1] += a.w0 * b.w1 * v;
                dst[a.i1 * w + b.i0] += a.w1 * b.w0 * v;
                dst[a.i1 * w + b.i1] += a.w1 * b.w1 * v;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

// ── structural ───────────────────────────────────────────────────────

/// Concatenates along the leading axis; trailing extents must agree.
pub fn concat0<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = match parts.first() {
        Some(f) => f,
        None => return dim_err("concat of zero tensors"),
    };
    if first.rank() == 0 {
        return dim_err("concat needs rank ≥ 1");
    }
    let tail = &first.shape()[1..];
    let mut lead = 0;
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        if p.rank() == 0 || &p.shape()[1..] != tail {
            return dim_err(format!(
                "concat trailing extents differ: {:?} vs {:?}",
                first.shape(),
                p.shape()
            ));
        }
        lead += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![lead];
    shape.extend_from_slice(tail);
    Ok(Tensor::from_parts(shape, data))
}

/// Rows `start..end` of the leading axis.
pub fn slice0<T: Real>(x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    if x.rank() == 0 || start >= end || end > x.shape()[0] {
        return dim_err(format!(
            "slice {start}..{end} out of range for {:?}",
            x.shape()
        ));
    }
    let inner: usize = x.shape()[1..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[0] = end - start;
    Ok(Tensor::from_parts(
        shape,
        x.data()[start * inner..end * inner].to_vec(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_small_product() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 1], &[1., 1.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3., 7.]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = t(&[2, 2], &[0.3, -1.2, 4.0, 2.5]);
        let i = t(&[2, 2], &[1., 0., 0., 1.]);
        assert_eq!(matmul(&i, &a).unwrap(), a);
        let z = Tensor::<f64>::zeros([2, 2]);
        assert_eq!(matmul(&z, &a).unwrap(), z);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros([2, 3]), &Tensor::<f64>::zeros([2, 3]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("[2, 3] × [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_closed_forms() {
        let s = softmax_lastdim(&t(&[2], &[0., 0.])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_lastdim(&t(&[2], &[0., 3f64.ln()])).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let x = t(&[2, 3], &[0.1, -2., 3., 1., 1., 0.]);
        let shifted = x.map(|v| v + 17.5);
        let a = softmax_lastdim(&x).unwrap();
        let b = softmax_lastdim(&shifted).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f64>::from_fn([1, 4, 5], |i| i as f64 * 0.5 - 3.0);
        let k = Tensor::<f64>::ones([1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
        let zero = Tensor::<f64>::zeros([1, 4, 5]);
        let k3 = Tensor::<f64>::from_fn([2, 1, 3, 3], |i| i as f64);
        assert_eq!(conv2d(&zero, &k3, 1, 1).unwrap(), Tensor::zeros([2, 4, 5]));
    }

    #[test]
    fn conv_shape_arithmetic() {
        let x = Tensor::<f32>::zeros([3, 64, 64]);
        let k = Tensor::<f32>::zeros([8, 3, 3, 3]);
        assert_eq!(conv2d(&x, &k, 2, 1).unwrap().shape(), &[8, 32, 32]);
        let tiny = Tensor::<f32>::zeros([3, 1, 1]);
        assert!(conv2d(&tiny, &k, 1, 0).is_err());
    }

    #[test]
    fn broadcasting_channel_vector_over_plane() {
        let x = Tensor::<f64>::from_fn([2, 2, 2], |i| i as f64);
        let c = t(&[2, 1, 1], &[10., 100.]);
        let y = elementwise(ElementwiseKind::Add, &x, Some(&c)).unwrap();
        assert_eq!(y.data(), &[10., 11., 12., 13., 104., 105., 106., 107.]);
        assert!(elementwise(ElementwiseKind::Add, &x, Some(&t(&[3], &[1., 2., 3.]))).is_err());
    }

    #[test]
    fn sum_to_shape_reverses_broadcast() {
        let g = Tensor::<f64>::ones([3, 2, 2]);
        let s = sum_to_shape(&g, &[3, 1, 1]);
        assert_eq!(s.data(), &[4., 4., 4.]);
        let s = sum_to_shape(&g, &[]);
        assert_eq!(s.data(), &[12.]);
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let x = Tensor::<f64>::from_fn([2, 3, 4], |i| (i as f64).sin());
        let y = bilinear_resize(&x, 3, 4).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-15);
    }

    #[test]
    fn bilinear_downsample_by_four_averages_centre_pair() {
        let x = Tensor::<f64>::from_fn([1, 8], |i| i as f64);
        let y = bilinear_resize(&x, 1, 2).unwrap();
        assert_eq!(y.data(), &[1.5, 5.5]);
    }

    #[test]
    fn concat_and_slice() {
        let a = Tensor::<f64>::from_fn([1, 2], |i| i as f64);
        let b = Tensor::<f64>::from_fn([2, 2], |i| 10.0 + i as f64);
        let c = concat0(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(slice0(&c, 1, 3).unwrap(), b);
        assert!(concat0(&[&a, &Tensor::<f64>::zeros([1, 3])]).is_err());
    }
}
