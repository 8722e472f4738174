//! Masked average pooling, the cosine prior mask, and K-shot averaging.

use crate::error::{dim_err, HseError, Result};
use crate::numerics::{ops, Real, Tape, Tensor, Var};

/// Binarisation threshold applied after resizing a mask.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Channel vector summarising foreground features.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototype<T: Real = f32> {
    pub vector: Tensor<T>,
    /// Set when the mask had no foreground pixel; `vector` is then zero.
    pub empty_foreground: bool,
}

/// Coarse `[0, 1]` localisation map for the query target.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorMask<T: Real = f32> {
    pub map: Tensor<T>,
    /// Set when the raw correlation map was constant and the map is all zeros.
    pub constant: bool,
}

fn plane(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [h, w] => Ok((*h, *w)),
        s => dim_err(format!("{what} must be H×W, got {s:?}")),
    }
}

/// Bilinear resize of an `H₀×W₀` mask to `h×w`, returning the soft map.
pub fn resize_mask<T: Real>(mask: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    plane(mask.shape(), "mask")?;
    ops::bilinear_resize(mask, h, w)
}

pub fn binarize<T: Real>(mask: &Tensor<T>) -> Tensor<T> {
    let thr = T::from_f64(MASK_THRESHOLD);
    mask.map(|v| if v >= thr { T::one() } else { T::zero() })
}

/// Resize then threshold.
pub fn downsample_mask<T: Real>(mask: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    Ok(binarize(&resize_mask(mask, h, w)?))
}

/// Pools `f: C×H×W` over the foreground of `mask: H×W` on the tape.
/// Returns the `[C]` prototype and whether the foreground was empty.
pub fn masked_avg_pool_on_tape<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    mask: &Tensor<T>,
) -> Result<(Var, bool)> {
    let (c, h, w) = match tape.shape(f) {
        [c, h, w] => (*c, *h, *w),
        s => return dim_err(format!("feature map must be C×H×W, got {s:?}")),
    };
    let (mh, mw) = plane(mask.shape(), "pooling mask")?;
    if (mh, mw) != (h, w) {
        return dim_err(format!(
            "pooling mask {mh}×{mw} does not match feature map {h}×{w}"
        ));
    }
    let bin = binarize(mask);
    let count = bin.sum().to_f64();
    let inv = T::from_f64(1.0 / count.max(1.0));
    let weights = tape.constant(bin.map(|v| v * inv).reshape([h * w, 1])?);
    let flat = tape.reshape(f, &[c, h * w])?;
    let pooled = tape.matmul(flat, weights)?;
    Ok((tape.reshape(pooled, &[c])?, count == 0.0))
}

/// `p[c] = Σ f[c,h,w]·m[h,w] / max(Σ m, 1)` with `m` the thresholded mask.
pub fn masked_avg_pool<T: Real>(f: &Tensor<T>, mask: &Tensor<T>) -> Result<Prototype<T>> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let (p, empty) = masked_avg_pool_on_tape(&mut tape, fv, mask)?;
    Ok(Prototype {
        vector: tape.value(p).clone(),
        empty_foreground: empty,
    })
}

/// Max cosine correlation of each query pixel against the support
/// foreground, resized to `out_h×out_w` and min–max normalised.
///
/// `support_mask` may have any extent; it is resized to the high-level grid
/// and thresholded. Zero-norm feature vectors contribute a cosine of 0. A
/// constant correlation map (including an empty support foreground) yields
/// all zeros.
pub fn prior_mask<T: Real>(
    support_high: &Tensor<T>,
    query_high: &Tensor<T>,
    support_mask: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<PriorMask<T>> {
    if support_high.shape() != query_high.shape() {
        return dim_err(format!(
            "support {:?} and query {:?} high-level maps differ",
            support_high.shape(),
            query_high.shape()
        ));
    }
    let (c, h, w) = match support_high.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return dim_err(format!("high-level map must be C×H×W, got {s:?}")),
    };
    let mask = downsample_mask(support_mask, h, w)?;
    let n = h * w;

    // Channel-last copies with unit-normalised pixel vectors.
    let normalized = |t: &Tensor<T>| -> Vec<f64> {
        let d = t.data();
        let mut out = vec![0.0; n * c];
        for p in 0..n {
            let norm = (0..c)
                .map(|ch| d[ch * n + p].to_f64().powi(2))
                .sum::<f64>()
                .sqrt();
            if norm > 0.0 {
                for ch in 0..c {
                    out[p * c + ch] = d[ch * n + p].to_f64() / norm;
                }
            }
        }
        out
    };
    let s = normalized(support_high);
    let q = normalized(query_high);
    let fg: Vec<usize> = (0..n).filter(|&p| mask.data()[p] > T::zero()).collect();

    let raw: Vec<f64> = (0..n)
        .map(|qp| {
            let qv = &q[qp * c..(qp + 1) * c];
            fg.iter()
                .map(|&sp| {
                    qv.iter()
                        .zip(&s[sp * c..(sp + 1) * c])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .map(|v| if v.is_finite() { v } else { 0.0 })
        .collect();
    let raw = Tensor::<f64>::new([h, w], raw)?;
    let resized = ops::bilinear_resize(&raw, out_h, out_w)?;
    let (lo, hi) = resized
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if !(range > 0.0) {
        return Ok(PriorMask {
            map: Tensor::zeros([out_h, out_w]),
            constant: true,
        });
    }
    Ok(PriorMask {
        map: resized.map(|v| (v - lo) / range).cast(),
        constant: false,
    })
}

/// Element-wise mean of equally shaped tensors.
pub fn kshot_merge<T: Real>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = items
        .first()
        .ok_or_else(|| HseError::Argument("K-shot merge of an empty list".into()))?;
    if items.len() == 1 {
        return Ok(first.clone());
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = items.iter().map(|t| tape.constant(t.clone())).collect();
    let m = tape.average(&vars)?;
    Ok(tape.value(m).clone())
}
