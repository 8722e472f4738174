//! Segmentation head and loss.

use rand::Rng;

use crate::error::{dim_err, HseError, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::params::{Binder, ParamId, ParamStore};
use crate::seeding::uniform_tensor;

/// Probabilities are clamped to `[LOSS_CLAMP, 1 − LOSS_CLAMP]` inside the loss.
pub const LOSS_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct DecoderParams {
    /// 3×3 conv blocks: `(2C+1) → C`, then `C → C`.
    pub blocks: Vec<(ParamId, ParamId)>,
    /// 1×1 conv to background/foreground logits.
    pub head: (ParamId, ParamId),
    pub channels: usize,
}

impl DecoderParams {
    pub fn build(
        channels: usize,
        depth: usize,
        rng: &mut impl Rng,
        store: &mut ParamStore<f32>,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(HseError::Config("decoder depth must be at least 1".into()));
        }
        let mut conv = |name: String, c_out: usize, c_in: usize, k: usize| {
            let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
            let w = store.add(
                format!("{name}.kernel"),
                uniform_tensor(&[c_out, c_in, k, k], bound, rng),
                false,
            );
            let b = store.add(
                format!("{name}.bias"),
                uniform_tensor(&[c_out], bound, rng),
                false,
            );
            (w, b)
        };
        let mut blocks = Vec::with_capacity(depth);
        for i in 0..depth {
            let c_in = if i == 0 { 2 * channels + 1 } else { channels };
            blocks.push(conv(format!("decoder.block{i}"), channels, c_in, 3));
        }
        let head = conv("decoder.head".into(), 2, channels, 1);
        Ok(DecoderParams {
            blocks,
            head,
            channels,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

fn conv_bias<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    x: Var,
    (w, b): (ParamId, ParamId),
    padding: usize,
) -> Result<Var> {
    let wv = binder.var(tape, w);
    let bv = binder.var(tape, b);
    let y = tape.conv2d(x, wv, 1, padding)?;
    let c = tape.shape(y)[0];
    let bv = tape.reshape(bv, &[c, 1, 1])?;
    tape.add(y, bv)
}

/// Tiles the prototype over the query grid, stacks it with the modulated
/// query map and the prior, and decodes to `2×out_h×out_w` logits.
pub fn decode_on_tape<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    prototype: Var,
    query: Var,
    prior: Var,
    params: &DecoderParams,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let (c, h, w) = match tape.shape(query) {
        [c, h, w] => (*c, *h, *w),
        s => return dim_err(format!("decoder query map must be C×H×W, got {s:?}")),
    };
    if c != params.channels || tape.shape(prototype) != [c] || tape.shape(prior) != [h, w] {
        return dim_err(format!(
            "decoder inputs disagree: prototype {:?}, query {:?}, prior {:?}, width {}",
            tape.shape(prototype),
            tape.shape(query),
            tape.shape(prior),
            params.channels
        ));
    }
    let p = tape.reshape(prototype, &[c, 1, 1])?;
    let tiled = tape.broadcast_to(p, &[c, h, w])?;
    let prior3 = tape.reshape(prior, &[1, h, w])?;
    let mut x = tape.concat0(&[tiled, query, prior3])?;
    for &block in &params.blocks {
        let y = conv_bias(tape, binder, x, block, 1)?;
        x = tape.relu(y);
    }
    let logits = conv_bias(tape, binder, x, params.head, 0)?;
    tape.resize_bilinear(logits, out_h, out_w)
}

pub fn decode<T: Real>(
    store: &ParamStore<T>,
    params: &DecoderParams,
    prototype: &Tensor<T>,
    query: &Tensor<T>,
    prior: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(store, false);
    let p = tape.constant(prototype.clone());
    let q = tape.constant(query.clone());
    let m = tape.constant(prior.clone());
    let y = decode_on_tape(&mut tape, &mut binder, p, q, m, params, out_h, out_w)?;
    Ok(tape.value(y).clone())
}

/// Foreground where the foreground logit strictly exceeds the background one.
pub fn predicted_mask<T: Real>(logits: &Tensor<T>) -> Result<Vec<bool>> {
    let n = match logits.shape() {
        [2, h, w] => h * w,
        s => return dim_err(format!("logits must be 2×H×W, got {s:?}")),
    };
    let (bg, fg) = logits.data().split_at(n);
    Ok(bg.iter().zip(fg).map(|(b, f)| f > b).collect())
}

pub fn mask_to_bools<T: Real>(mask: &Tensor<T>) -> Vec<bool> {
    let thr = T::from_f64(0.5);
    mask.data().iter().map(|&v| v >= thr).collect()
}

/// Mean two-class cross-entropy between `2×H×W` logits and a binary mask.
pub fn bce_loss<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if logits.rank() != 3 || logits.shape()[1..] != *target.shape() {
        return dim_err(format!(
            "loss shapes disagree: logits {:?}, target {:?}",
            logits.shape(),
            target.shape()
        ));
    }
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy2(l, &mask_to_bools(target), LOSS_CLAMP)?;
    Ok(tape.value(loss).item().to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confident_correct_pixel_has_tiny_loss() {
        let logits = Tensor::<f64>::from_f64s([2, 1, 1], &[-10.0, 10.0]).unwrap();
        let loss = bce_loss(&logits, &Tensor::ones([1, 1])).unwrap();
        assert!(loss < 1e-4, "{loss}");
    }

    #[test]
    fn equal_logits_cost_ln2() {
        let logits = Tensor::<f64>::full([2, 4, 4], 0.3);
        let target = Tensor::from_fn([4, 4], |i| (i % 3 == 0) as u8 as f64);
        assert!((bce_loss(&logits, &target).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ties_are_background() {
        let logits = Tensor::<f64>::from_f64s([2, 1, 3], &[0.0, 1.0, 2.0, 0.0, 2.0, 1.0]).unwrap();
        assert_eq!(predicted_mask(&logits).unwrap(), vec![false, true, false]);
    }
}
