//! Global content modulation: a channel-wise enhancement coefficient from the
//! visual prototype and the projected embedding.

use rand::Rng;

use super::variant::GcmKind;
use crate::error::{dim_err, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::params::{Binder, ParamId, ParamStore};
use crate::seeding::uniform_tensor;

/// Initial output bias of the modulator: `σ(3) ≈ 0.95`, so modulation
/// starts close to its identity point.
pub const COEFFICIENT_BIAS_INIT: f64 = 3.0;

/// `2C → C → C` affine stack with ReLU between and a sigmoid on top.
#[derive(Clone, Debug)]
pub struct ModulatorParams {
    pub hidden_weight: ParamId,
    pub hidden_bias: ParamId,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
    pub channels: usize,
}

impl ModulatorParams {
    pub fn build(channels: usize, rng: &mut impl Rng, store: &mut ParamStore<f32>) -> Self {
        let b1 = 1.0 / ((2 * channels) as f64).sqrt();
        let b2 = 1.0 / (channels as f64).sqrt();
        ModulatorParams {
            hidden_weight: store.add(
                "modulator.hidden.weight",
                uniform_tensor(&[channels, 2 * channels], b1, rng),
                false,
            ),
            hidden_bias: store.add(
                "modulator.hidden.bias",
                uniform_tensor(&[channels], b1, rng),
                false,
            ),
            out_weight: store.add(
                "modulator.out.weight",
                uniform_tensor(&[channels, channels], b2, rng),
                false,
            ),
            out_bias: store.add(
                "modulator.out.bias",
                Tensor::full([channels], COEFFICIENT_BIAS_INIT as f32),
                false,
            ),
            channels,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.hidden_weight,
            self.hidden_bias,
            self.out_weight,
            self.out_bias,
        ]
    }
}

/// `w = σ(W₂·ReLU(W₁·[p; t] + b₁) + b₂)`.
pub fn gcm_coefficient_on_tape<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    prototype: Var,
    t_channel: Var,
    params: &ModulatorParams,
) -> Result<Var> {
    let c = params.channels;
    if tape.shape(prototype) != [c] || tape.shape(t_channel) != [c] {
        return dim_err(format!(
            "modulator expects two [{c}] vectors, got {:?} and {:?}",
            tape.shape(prototype),
            tape.shape(t_channel)
        ));
    }
    let joint = tape.concat0(&[prototype, t_channel])?;
    let x = tape.reshape(joint, &[2 * c, 1])?;
    let w1 = binder.var(tape, params.hidden_weight);
    let b1 = binder.var(tape, params.hidden_bias);
    let w2 = binder.var(tape, params.out_weight);
    let b2 = binder.var(tape, params.out_bias);
    let h = tape.matmul(w1, x)?;
    let b1 = tape.reshape(b1, &[c, 1])?;
    let h = tape.add(h, b1)?;
    let h = tape.relu(h);
    let y = tape.matmul(w2, h)?;
    let b2 = tape.reshape(b2, &[c, 1])?;
    let y = tape.add(y, b2)?;
    let w = tape.sigmoid(y);
    tape.reshape(w, &[c])
}

pub fn gcm_coefficient<T: Real>(
    store: &ParamStore<T>,
    prototype: &Tensor<T>,
    t_channel: &Tensor<T>,
    params: &ModulatorParams,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(store, false);
    let p = tape.constant(prototype.clone());
    let t = tape.constant(t_channel.clone());
    let w = gcm_coefficient_on_tape(&mut tape, &mut binder, p, t, params)?;
    Ok(tape.value(w).clone())
}

/// Applies the coefficient to the general prototype (`[C]`) and the query
/// map (`C×H×W`); `Gc2` adds the projected embedding afterwards.
pub fn gcm_modulate_on_tape<T: Real>(
    tape: &mut Tape<T>,
    p_gen: Var,
    f_q: Var,
    w: Option<Var>,
    t_channel: Option<Var>,
    kind: GcmKind,
) -> Result<(Var, Var)> {
    if kind == GcmKind::Off {
        return Ok((p_gen, f_q));
    }
    let w = w.ok_or_else(|| crate::HseError::Argument("modulation needs a coefficient".into()))?;
    let c = tape.shape(p_gen)[0];
    if tape.shape(w) != [c] || tape.shape(f_q).first() != Some(&c) || tape.shape(f_q).len() != 3 {
        return dim_err(format!(
            "modulation shapes disagree: prototype {:?}, coefficient {:?}, query {:?}",
            tape.shape(p_gen),
            tape.shape(w),
            tape.shape(f_q)
        ));
    }
    let w_map = tape.reshape(w, &[c, 1, 1])?;
    let mut p = tape.mul(p_gen, w)?;
    let mut f = tape.mul(f_q, w_map)?;
    if kind == GcmKind::Gc2 {
        let t = t_channel.ok_or_else(|| crate::HseError::Argument("gc2 needs t_channel".into()))?;
        if tape.shape(t) != [c] {
            return dim_err(format!(
                "t_channel {:?} does not match {c} channels",
                tape.shape(t)
            ));
        }
        let t_map = tape.reshape(t, &[c, 1, 1])?;
        p = tape.add(p, t)?;
        f = tape.add(f, t_map)?;
    }
    Ok((p, f))
}

pub fn gcm_modulate<T: Real>(
    p_gen: &Tensor<T>,
    f_q: &Tensor<T>,
    w: &Tensor<T>,
    t_channel: &Tensor<T>,
    kind: GcmKind,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let p = tape.constant(p_gen.clone());
    let f = tape.constant(f_q.clone());
    let wv = tape.constant(w.clone());
    let t = tape.constant(t_channel.clone());
    let (pm, fm) = gcm_modulate_on_tape(&mut tape, p, f, Some(wv), Some(t), kind)?;
    Ok((tape.value(pm).clone(), tape.value(fm).clone()))
}
