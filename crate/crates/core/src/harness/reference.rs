//! Naive loop implementations used as independent oracles.

use crate::numerics::Tensor;

/// Triple-loop matrix product of row-major `m×k` and `k×n`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    out
}

/// Sliding-window cross-correlation with zero padding.
pub fn conv2d(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, ks) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xo in 0..ow {
                let mut s = 0.0;
                for c in 0..ci {
                    for dy in 0..ks {
                        for dx in 0..ks {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (xo * stride + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += x.at(&[c, iy as usize, ix as usize]) * k.at(&[o, c, dy, dx]);
                        }
                    }
                }
                out[(o * oh + y) * ow + xo] = s;
            }
        }
    }
    Tensor::new([co, oh, ow], out).expect("consistent shape")
}

/// Half-pixel-centre bilinear interpolation of one `h×w` plane.
pub fn bilinear(plane: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let src = |o: usize, inn: usize, out: usize| {
        let s = ((o as f64 + 0.5) * inn as f64 / out as f64 - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(inn - 1);
        let hi = (lo + 1).min(inn - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        let (y0, y1, fy) = src(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = src(x, w, ow);
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out[y * ow + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Foreground average of a `C×H×W` map under a `{0,1}` mask.
pub fn masked_avg_pool(f: &Tensor<f64>, mask: &[f64]) -> Vec<f64> {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut out = vec![0.0; c];
    let mut count = 0.0;
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] >= 0.5 {
                count += 1.0;
                for (ch, o) in out.iter_mut().enumerate() {
                    *o += f.at(&[ch, y, x]);
                }
            }
        }
    }
    out.iter().map(|v| v / f64::max(count, 1.0)).collect()
}

/// All-pairs cosine prior: max over support foreground per query pixel,
/// resized to `oh×ow`, min–max normalised (all zeros when constant).
pub fn prior_mask(
    s: &Tensor<f64>,
    q: &Tensor<f64>,
    mask_hw: &[f64],
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let (c, h, w) = (s.shape()[0], s.shape()[1], s.shape()[2]);
    let vec_at = |t: &Tensor<f64>, y: usize, x: usize| {
        (0..c).map(|ch| t.at(&[ch, y, x])).collect::<Vec<_>>()
    };
    let cos = |a: &[f64], b: &[f64]| {
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
        }
    };
    let mut raw = vec![0.0; h * w];
    for qy in 0..h {
        for qx in 0..w {
            let qv = vec_at(q, qy, qx);
            let mut best: Option<f64> = None;
            for sy in 0..h {
                for sx in 0..w {
                    if mask_hw[sy * w + sx] >= 0.5 {
                        let v = cos(&qv, &vec_at(s, sy, sx));
                        best = Some(best.map_or(v, |b: f64| b.max(v)));
                    }
                }
            }
            raw[qy * w + qx] = best.unwrap_or(0.0);
        }
    }
    let up = bilinear(&raw, h, w, oh, ow);
    let lo = up.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = up.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![0.0; oh * ow];
    }
    up.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Single-head attention over `[f_sᵀ; t repeated]` with a residual, keeping
/// the first `HW` tokens. Returns (`C×H×W` features, `N×N` weights).
pub fn dense_attention(
    f: &Tensor<f64>,
    t: &[f64],
    extra: usize,
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    wo: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let hw = h * w;
    let n = hw + extra;
    let mut x = vec![0.0; n * c];
    for p in 0..hw {
        for ch in 0..c {
            x[p * c + ch] = f.data()[ch * hw + p];
        }
    }
    for p in hw..n {
        x[p * c..(p + 1) * c].copy_from_slice(t);
    }
    let q = matmul(&x, wq, n, c, c);
    let k = matmul(&x, wk, n, c, c);
    let v = matmul(&x, wv, n, c, c);
    let scale = 1.0 / (c as f64).sqrt();
    let mut scores = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for ch in 0..c {
                s += q[i * c + ch] * k[j * c + ch];
            }
            scores[i * n + j] = s * scale;
        }
    }
    let a = softmax_rows(&scores, n);
    let mixed = matmul(&a, &v, n, n, c);
    let proj = matmul(&mixed, wo, n, c, c);
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        for ch in 0..c {
            out[ch * hw + p] = proj[p * c + ch] + x[p * c + ch];
        }
    }
    (out, a)
}

/// Mean per-pixel two-class cross-entropy with clamped probabilities.
pub fn bce(logits: &[f64], target: &[bool], clamp: f64) -> f64 {
    let n = target.len();
    let mut total = 0.0;
    for i in 0..n {
        let (bg, fg) = (logits[i], logits[n + i]);
        let p_fg = 1.0 / (1.0 + (bg - fg).exp());
        let p = if target[i] { p_fg } else { 1.0 - p_fg };
        total -= p.clamp(clamp, 1.0 - clamp).ln();
    }
    total / n as f64
}

/// Per-class `ΣI/ΣU` averaged over the classes that have a union.
pub fn miou(preds: &[Vec<bool>], truths: &[Vec<bool>], classes: &[String]) -> f64 {
    let mut names: Vec<&String> = classes.iter().collect();
    names.sort();
    names.dedup();
    let mut total = 0.0;
    let mut defined = 0;
    for name in names {
        let (mut i, mut u) = (0usize, 0usize);
        for k in 0..preds.len() {
            if &classes[k] != name {
                continue;
            }
            for p in 0..preds[k].len() {
                let (a, b) = (preds[k][p], truths[k][p]);
                if a && b {
                    i += 1;
                }
                if a || b {
                    u += 1;
                }
            }
        }
        if u > 0 {
            total += i as f64 / u as f64;
            defined += 1;
        }
    }
    if defined == 0 {
        0.0
    } else {
        total / defined as f64
    }
}
