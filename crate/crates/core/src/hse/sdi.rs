//! Spatial dense interaction: support features are extended with projected
//! embedding tokens and mixed by a self-attention interactor.

use rand::Rng;

use super::variant::{SdiKind, SdiTokens};
use crate::error::{dim_err, HseError, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::params::{Binder, ParamId, ParamStore};
use crate::seeding::uniform_tensor;

/// Bound multiplier of the output projection, keeping the residual branch
/// small at initialisation.
pub const INTERACTOR_OUTPUT_SCALE: f64 = 0.1;

/// Square `C×C` query/key/value/output projections of the interactor.
#[derive(Clone, Debug)]
pub struct InteractorParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub channels: usize,
    pub heads: usize,
}

impl InteractorParams {
    pub fn build(
        channels: usize,
        heads: usize,
        rng: &mut impl Rng,
        store: &mut ParamStore<f32>,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(HseError::Config(format!(
                "{heads} attention heads do not divide {channels} channels"
            )));
        }
        let bound = 1.0 / (channels as f64).sqrt();
        let mut mat = |name: &str, bound: f64| {
            store.add(
                format!("interactor.{name}"),
                uniform_tensor(&[channels, channels], bound, rng),
                false,
            )
        };
        Ok(InteractorParams {
            query: mat("query", bound),
            key: mat("key", bound),
            value: mat("value", bound),
            output: mat("output", bound * INTERACTOR_OUTPUT_SCALE),
            channels,
            heads,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.query, self.key, self.value, self.output]
    }
}

/// Result of one interaction pass.
#[derive(Clone, Debug)]
pub struct SdiOutput {
    /// `C×H×W` enriched support features.
    pub features: Var,
    /// Token count after extension (0 when no attention ran).
    pub token_count: usize,
    /// Per-head `N×N` attention weights.
    pub attention: Vec<Var>,
}

/// Number of embedding tokens appended for an `H×W` map.
pub fn semantic_token_count(mode: SdiTokens, width: usize) -> usize {
    match mode {
        SdiTokens::Width => width,
        SdiTokens::Single => 1,
    }
}

pub fn sdi_on_tape<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    f_s: Var,
    t_spatial: Var,
    params: &InteractorParams,
    kind: SdiKind,
    tokens: SdiTokens,
) -> Result<SdiOutput> {
    let (c, h, w) = match tape.shape(f_s) {
        [c, h, w] => (*c, *h, *w),
        s => return dim_err(format!("SDI input must be C×H×W, got {s:?}")),
    };
    if tape.shape(t_spatial) != [c] {
        return dim_err(format!(
            "projected embedding {:?} does not match {c} channels",
            tape.shape(t_spatial)
        ));
    }
    let plain = |features| SdiOutput {
        features,
        token_count: 0,
        attention: Vec::new(),
    };
    match kind {
        SdiKind::Off => return Ok(plain(f_s)),
        SdiKind::Sd1 | SdiKind::Sd2 => {
            let t = tape.reshape(t_spatial, &[c, 1, 1])?;
            let out = if kind == SdiKind::Sd1 {
                tape.add(f_s, t)?
            } else {
                tape.mul(f_s, t)?
            };
            return Ok(plain(out));
        }
        SdiKind::Sd3 => {}
    }
    if params.channels != c {
        return dim_err(format!(
            "interactor built for {} channels, features have {c}",
            params.channels
        ));
    }

    let hw = h * w;
    let extra = semantic_token_count(tokens, w);
    let n = hw + extra;
    let flat = tape.reshape(f_s, &[c, hw])?;
    let visual = tape.transpose(flat)?;
    let t_row = tape.reshape(t_spatial, &[1, c])?;
    let semantic = tape.broadcast_to(t_row, &[extra, c])?;
    let x = tape.concat0(&[visual, semantic])?;

    let wq = binder.var(tape, params.query);
    let wk = binder.var(tape, params.key);
    let wv = binder.var(tape, params.value);
    let wo = binder.var(tape, params.output);
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;

    let heads = params.heads;
    let d = c / heads;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let qt = tape.transpose(q)?;
    let kt = tape.transpose(k)?;
    let vt = tape.transpose(v)?;
    let mut head_outs = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for hd in 0..heads {
        let (qh_t, kh_t, vh_t) = if heads == 1 {
            (qt, kt, vt)
        } else {
            (
                tape.slice0(qt, hd * d, (hd + 1) * d)?,
                tape.slice0(kt, hd * d, (hd + 1) * d)?,
                tape.slice0(vt, hd * d, (hd + 1) * d)?,
            )
        };
        let qh = tape.transpose(qh_t)?;
        let scores = tape.matmul(qh, kh_t)?;
        let scores = tape.scale(scores, scale);
        let a = tape.softmax(scores)?;
        let vh = tape.transpose(vh_t)?;
        let oh = tape.matmul(a, vh)?;
        head_outs.push(tape.transpose(oh)?);
        attention.push(a);
    }
    let mixed_t = if heads == 1 {
        head_outs[0]
    } else {
        tape.concat0(&head_outs)?
    };
    let mixed = tape.transpose(mixed_t)?;
    let projected = tape.matmul(mixed, wo)?;
    let out = tape.add(projected, x)?;
    debug_assert_eq!(tape.shape(out), &[n, c]);
    let kept = tape.slice0(out, 0, hw)?;
    let kept_t = tape.transpose(kept)?;
    let features = tape.reshape(kept_t, &[c, h, w])?;
    Ok(SdiOutput {
        features,
        token_count: n,
        attention,
    })
}

/// Value-level interaction, returning the enriched map and the per-head
/// attention weights.
pub fn sdi<T: Real>(
    store: &ParamStore<T>,
    f_s: &Tensor<T>,
    t_spatial: &Tensor<T>,
    params: &InteractorParams,
    kind: SdiKind,
    tokens: SdiTokens,
) -> Result<(Tensor<T>, usize, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(store, false);
    let f = tape.constant(f_s.clone());
    let t = tape.constant(t_spatial.clone());
    let out = sdi_on_tape(&mut tape, &mut binder, f, t, params, kind, tokens)?;
    let attn = out
        .attention
        .iter()
        .map(|&a| tape.value(a).clone())
        .collect();
    Ok((tape.value(out.features).clone(), out.token_count, attn))
}
