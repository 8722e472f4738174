//! Self-verification suites: tape gradients against finite differences and
//! forward kernels against the naive references in [`super::reference`].

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::metrics;
use super::reference as naive;
use crate::backbone::BackboneConfig;
use crate::episodes::{generate_in_memory, sample_episode, DatasetSpec, Phase};
use crate::error::Result;
use crate::hse::decoder::{decode_on_tape, DecoderParams, LOSS_CLAMP};
use crate::hse::gcm::{gcm_coefficient_on_tape, gcm_modulate_on_tape, ModulatorParams};
use crate::hse::prototype::masked_avg_pool_on_tape;
use crate::hse::sdi::{sdi, sdi_on_tape, InteractorParams};
use crate::hse::{
    bce_loss, masked_avg_pool, prior_mask, FeatureBank, GcmKind, HseModel, ModelConfig, SdiKind,
    SdiTokens, VariantConfig,
};
use crate::numerics::{check_gradients, ops, Tape, Tensor, Var};
use crate::params::{Binder, ParamId, ParamStore};
use crate::seeding::rng_for;
use crate::semantics::{EmbeddingTable, Projector, ProjectorKind};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-6;
/// Initial finite-difference step; halved per entry across branch changes.
pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub detail: Option<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.detail.is_none() && self.max_error < self.tolerance
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<CheckOutcome>,
    pub elapsed_secs: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckOutcome::passed)
    }

    pub fn to_text(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:<width$}  n={:<3} max_err={:.3e} tol={:.0e}",
                if c.passed() { "PASS" } else { "FAIL" },
                c.name,
                c.instances,
                c.max_error,
                c.tolerance,
            ));
            if let Some(d) = &c.detail {
                out.push_str(&format!("  ({d})"));
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "{} suite: {} in {:.1}s\n",
            self.suite,
            if self.passed() { "passed" } else { "FAILED" },
            self.elapsed_secs
        ));
        out
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks stay outside the FD stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape).map(|v| v + 0.2 * v.signum())
}

fn bits(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    (0..n).map(|_| rng.gen_bool(0.5)).collect()
}

type Objective = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Scalarises `v` as `Σ v ⊙ w` for a fixed random `w`.
fn weighted(tape: &mut Tape<f64>, v: Var, w: &Tensor<f64>) -> Result<Var> {
    let c = tape.constant(w.clone());
    let m = tape.mul(v, c)?;
    Ok(tape.sum(m))
}

/// Tape helper that binds every parameter of `store` to `vars` in order.
fn bind_all<'s>(store: &'s ParamStore<f64>, vars: &[Var]) -> Binder<'s, f64> {
    let mut b = Binder::new(store, false);
    for (id, &v) in store.ids().zip(vars) {
        b.preset(id, v);
    }
    b
}

fn store_values(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.iter().map(|(_, p)| p.value.clone()).collect()
}

/// One op-level case: its inputs and the scalar objective built on them.
fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, Objective)> {
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Objective)> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($input:expr),*], $w_shape:expr, |$tape:ident, $v:ident| $body:expr) => {{
            let inputs = vec![$($input),*];
            let w = random(rng, &$w_shape);
            let f: Objective = Box::new(move |$tape: &mut Tape<f64>, $v: &[Var]| {
                let out = $body?;
                weighted($tape, out, &w)
            });
            cases.push(($name, inputs, f));
        }};
    }
    case!(
        "matmul",
        [random(rng, &[3, 4]), random(rng, &[4, 2])],
        [3, 2],
        |t, v| t.matmul(v[0], v[1])
    );
    case!("transpose", [random(rng, &[3, 4])], [4, 3], |t, v| t
        .transpose(v[0]));
    case!("reshape", [random(rng, &[2, 6])], [3, 4], |t, v| t
        .reshape(v[0], &[3, 4]));
    case!(
        "add (broadcast)",
        [random(rng, &[3, 2, 2]), random(rng, &[3, 1, 1])],
        [3, 2, 2],
        |t, v| t.add(v[0], v[1])
    );
    case!(
        "sub",
        [random(rng, &[2, 3]), random(rng, &[2, 3])],
        [2, 3],
        |t, v| t.sub(v[0], v[1])
    );
    case!(
        "mul (broadcast)",
        [random(rng, &[3, 2, 2]), random(rng, &[3, 1, 1])],
        [3, 2, 2],
        |t, v| t.mul(v[0], v[1])
    );
    case!("scale", [random(rng, &[2, 3])], [2, 3], |t, v| Ok::<
        _,
        crate::HseError,
    >(
        t.scale(v[0], 0.7)
    ));
    case!("relu", [away_from_zero(rng, &[3, 4])], [3, 4], |t, v| Ok::<
        _,
        crate::HseError,
    >(
        t.relu(v[0])
    ));
    case!(
        "sigmoid",
        [random(rng, &[3, 4]).map(|x| 3.0 * x)],
        [3, 4],
        |t, v| Ok::<_, crate::HseError>(t.sigmoid(v[0]))
    );
    case!(
        "softmax",
        [random(rng, &[3, 5]).map(|x| 2.0 * x)],
        [3, 5],
        |t, v| t.softmax(v[0])
    );
    case!(
        "conv2d 3x3 stride 1",
        [random(rng, &[2, 5, 5]), random(rng, &[3, 2, 3, 3])],
        [3, 5, 5],
        |t, v| t.conv2d(v[0], v[1], 1, 1)
    );
    case!(
        "conv2d 3x3 stride 2",
        [random(rng, &[2, 6, 6]), random(rng, &[2, 2, 3, 3])],
        [2, 3, 3],
        |t, v| t.conv2d(v[0], v[1], 2, 1)
    );
    case!(
        "conv2d 1x1",
        [random(rng, &[3, 4, 4]), random(rng, &[2, 3, 1, 1])],
        [2, 4, 4],
        |t, v| t.conv2d(v[0], v[1], 1, 0)
    );
    case!(
        "concat",
        [random(rng, &[2, 3]), random(rng, &[1, 3])],
        [3, 3],
        |t, v| t.concat0(&[v[0], v[1]])
    );
    case!("slice", [random(rng, &[5, 3])], [3, 3], |t, v| t
        .slice0(v[0], 1, 4));
    case!("broadcast_to", [random(rng, &[1, 3])], [4, 3], |t, v| t
        .broadcast_to(v[0], &[4, 3]));
    case!("resize up", [random(rng, &[2, 3, 3])], [2, 7, 5], |t, v| t
        .resize_bilinear(v[0], 7, 5));
    case!(
        "resize down",
        [random(rng, &[1, 8, 8])],
        [1, 3, 3],
        |t, v| t.resize_bilinear(v[0], 3, 3)
    );
    case!("mean", [random(rng, &[2, 3])], [], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        Ok::<_, crate::HseError>(t.mean(sq))
    });
    case!(
        "average",
        [random(rng, &[4]), random(rng, &[4]), random(rng, &[4])],
        [4],
        |t, v| t.average(&[v[0], v[1], v[2]])
    );
    {
        let target = bits(rng, 9);
        let f: Objective = Box::new(move |t, v| t.cross_entropy2(v[0], &target, LOSS_CLAMP));
        cases.push((
            "cross-entropy",
            vec![random(rng, &[2, 3, 3]).map(|x| 2.0 * x)],
            f,
        ));
    }
    {
        let mask = Tensor::from_fn([3, 3], |i| (i % 2) as f64);
        let w = random(rng, &[4]);
        let f: Objective = Box::new(move |t, v| {
            let (p, _) = masked_avg_pool_on_tape(t, v[0], &mask)?;
            weighted(t, p, &w)
        });
        cases.push(("masked average pool", vec![random(rng, &[4, 3, 3])], f));
    }
    cases
}

/// Component-level cases whose parameters live in a store.
fn component_cases(
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<Vec<(&'static str, Vec<Tensor<f64>>, Objective)>> {
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Objective)> = Vec::new();
    let mut init = rng_for("gradcheck-components", &[seed]);

    // Two-head interaction over a 4×3×3 map with W extra tokens.
    let mut s32 = ParamStore::new();
    let inter = InteractorParams::build(4, 2, &mut init, &mut s32)?;
    let store = s32.cast::<f64>();
    let mut inputs = store_values(&store);
    inputs.push(random(rng, &[4, 3, 3]));
    inputs.push(random(rng, &[4]));
    let w = random(rng, &[4, 3, 3]);
    let np = store.len();
    let f: Objective = Box::new(move |t, v| {
        let mut b = bind_all(&store, &v[..np]);
        let out = sdi_on_tape(
            t,
            &mut b,
            v[np],
            v[np + 1],
            &inter,
            SdiKind::Sd3,
            SdiTokens::Width,
        )?;
        weighted(t, out.features, &w)
    });
    cases.push(("interaction (sd3, 2 heads)", inputs, f));

    // Coefficient and residual modulation.
    let mut s32 = ParamStore::new();
    let modu = ModulatorParams::build(3, &mut init, &mut s32);
    let store = s32.cast::<f64>();
    let mut inputs = store_values(&store);
    inputs.extend([
        random(rng, &[3]),
        random(rng, &[3]),
        random(rng, &[3, 2, 2]),
        random(rng, &[3]),
    ]);
    let (wp, wf) = (random(rng, &[3]), random(rng, &[3, 2, 2]));
    let np = store.len();
    let f: Objective = Box::new(move |t, v| {
        let mut b = bind_all(&store, &v[..np]);
        let (p, p_gen, f_q, t_ch) = (v[np], v[np + 1], v[np + 2], v[np + 3]);
        let coeff = gcm_coefficient_on_tape(t, &mut b, p, t_ch, &modu)?;
        let (pm, fm) = gcm_modulate_on_tape(t, p_gen, f_q, Some(coeff), Some(t_ch), GcmKind::Gc2)?;
        let a = weighted(t, pm, &wp)?;
        let c = weighted(t, fm, &wf)?;
        t.add(a, c)
    });
    cases.push(("modulation (gc2)", inputs, f));

    // Three-layer projector.
    let mut s32 = ParamStore::new();
    let proj = Projector::build(ProjectorKind::Mlp3, 5, 3, 1.0, "p", &mut init, &mut s32);
    let store = s32.cast::<f64>();
    let mut inputs = store_values(&store);
    inputs.push(random(rng, &[5]));
    let w = random(rng, &[3]);
    let np = store.len();
    let f: Objective = Box::new(move |t, v| {
        let mut b = bind_all(&store, &v[..np]);
        let y = proj.apply(t, &mut b, v[np])?;
        weighted(t, y, &w)
    });
    cases.push(("projector (mlp3)", inputs, f));

    // Decoder with loss.
    let mut s32 = ParamStore::new();
    let dec = DecoderParams::build(3, 2, &mut init, &mut s32)?;
    let store = s32.cast::<f64>();
    let mut inputs = store_values(&store);
    inputs.extend([random(rng, &[3]), random(rng, &[3, 4, 4])]);
    let prior = Tensor::from_fn([4, 4], |i| i as f64 / 15.0);
    let target = bits(rng, 64);
    let np = store.len();
    let f: Objective = Box::new(move |t, v| {
        let mut b = bind_all(&store, &v[..np]);
        let m = t.constant(prior.clone());
        let logits = decode_on_tape(t, &mut b, v[np], v[np + 1], m, &dec, 8, 8)?;
        t.cross_entropy2(logits, &target, LOSS_CLAMP)
    });
    cases.push(("decoder + loss", inputs, f));
    Ok(cases)
}

/// Configuration of the end-to-end gradient check: 8 channels, 32×32 images.
pub fn episode_check_config(variant: VariantConfig) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            mid_channels: 8,
            high_channels: 8,
            ..BackboneConfig::default()
        },
        variant,
        ..ModelConfig::default()
    }
}

/// Finite-difference check of a full training-episode loss with respect to
/// every trainable parameter, in 64-bit precision.
pub fn episode_gradient_check(
    seed: u64,
    variant: VariantConfig,
    shots: usize,
) -> Result<crate::numerics::GradCheckReport> {
    let spec = DatasetSpec {
        extent: 32,
        train_per_class: shots + 2,
        test_per_class: shots + 1,
        ..DatasetSpec::default()
    };
    let (_, data) = generate_in_memory(&spec, seed)?;
    let embeddings = EmbeddingTable::synthesize(data.classes(), 16, seed)?;
    let model = HseModel::new(episode_check_config(variant), seed)?.cast::<f64>();
    let episode = sample_episode(&data, 0, Phase::Train, shots, seed, 0)?;
    let ids: Vec<ParamId> = model.trainable();
    let params: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| model.store().value(id).clone())
        .collect();
    let bank = FeatureBank::new();
    check_gradients(
        |tape, vars| model.loss_with_params(tape, &ids, vars, &episode, &embeddings, Some(&bank)),
        &params,
        FD_STEP,
        GRADIENT_TOLERANCE,
    )
}

/// Every op and component on random inputs plus the full episode loss,
/// for each seed.
pub fn gradient_suite(seeds: &[u64]) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut by_name: Vec<CheckOutcome> = Vec::new();
    let mut record = |name: &str, max_error: f64, detail: Option<String>| match by_name
        .iter_mut()
        .find(|c| c.name == name)
    {
        Some(c) => {
            c.instances += 1;
            c.max_error = c.max_error.max(max_error);
            if c.detail.is_none() {
                c.detail = detail;
            }
        }
        None => by_name.push(CheckOutcome {
            name: name.to_string(),
            instances: 1,
            max_error,
            tolerance: GRADIENT_TOLERANCE,
            detail,
        }),
    };
    for &seed in seeds {
        let mut rng = rng_for("gradcheck", &[seed]);
        let mut cases = op_cases(&mut rng);
        cases.extend(component_cases(&mut rng, seed)?);
        for (name, inputs, f) in cases {
            match check_gradients(f, &inputs, FD_STEP, GRADIENT_TOLERANCE) {
                Ok(r) => record(name, r.max_rel_error, None),
                Err(e) => record(name, f64::INFINITY, Some(e.to_string())),
            }
        }
        for (name, variant, shots) in [
            ("episode loss (sd3,gc2)", VariantConfig::FULL, 1),
            ("episode loss (off,off)", VariantConfig::BASELINE, 1),
            ("episode loss (sd3,gc2, 2-shot)", VariantConfig::FULL, 2),
        ] {
            match episode_gradient_check(seed, variant, shots) {
                Ok(r) => {
                    let detail = (!r.passed()).then(|| format!("worst entry {:?}", r.worst));
                    record(name, r.max_rel_error, detail);
                }
                Err(e) => record(name, f64::INFINITY, Some(e.to_string())),
            }
        }
    }
    Ok(SuiteReport {
        suite: "gradient".into(),
        checks: by_name,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

struct OracleCheck {
    name: &'static str,
    run: fn(&mut ChaCha8Rng) -> Result<f64>,
}

fn oracle_matmul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, k, n) = (
        rng.gen_range(1..=8),
        rng.gen_range(1..=8),
        rng.gen_range(1..=8),
    );
    let (a, b) = (random(rng, &[m, k]), random(rng, &[k, n]));
    Ok(max_diff(
        ops::matmul(&a, &b)?.data(),
        &naive::matmul(a.data(), b.data(), m, k, n),
    ))
}

fn oracle_softmax(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (r, n) = (rng.gen_range(1..=6), rng.gen_range(1..=8));
    let x = random(rng, &[r, n]).map(|v| 5.0 * v);
    Ok(max_diff(
        ops::softmax_lastdim(&x)?.data(),
        &naive::softmax_rows(x.data(), n),
    ))
}

fn oracle_conv(rng: &mut ChaCha8Rng) -> Result<f64> {
    let k = [1, 3, 5][rng.gen_range(0..3)];
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=k / 2);
    let h = rng.gen_range(k.max(2)..=8);
    let w = rng.gen_range(k.max(2)..=8);
    let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let x = random(rng, &[ci, h, w]);
    let kern = random(rng, &[co, ci, k, k]);
    Ok(ops::conv2d(&x, &kern, stride, pad)?.max_abs_diff(&naive::conv2d(&x, &kern, stride, pad)))
}

fn oracle_bilinear(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w) = (rng.gen_range(2..=8), rng.gen_range(2..=8));
    let (oh, ow) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
    let x = random(rng, &[h, w]);
    Ok(max_diff(
        ops::bilinear_resize(&x, oh, ow)?.data(),
        &naive::bilinear(x.data(), h, w, oh, ow),
    ))
}

fn oracle_pool(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (c, h, w) = (
        rng.gen_range(1..=5),
        rng.gen_range(2..=7),
        rng.gen_range(2..=7),
    );
    let f = random(rng, &[c, h, w]);
    let mask = Tensor::from_fn([h, w], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
    Ok(max_diff(
        masked_avg_pool(&f, &mask)?.vector.data(),
        &naive::masked_avg_pool(&f, mask.data()),
    ))
}

fn oracle_prior(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (c, h, w) = (
        rng.gen_range(1..=5),
        rng.gen_range(2..=5),
        rng.gen_range(2..=5),
    );
    let (s, q) = (random(rng, &[c, h, w]), random(rng, &[c, h, w]));
    let mask = Tensor::from_fn([h, w], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
    let (oh, ow) = (2 * h, 2 * w);
    let got = prior_mask(&s, &q, &mask, oh, ow)?;
    Ok(max_diff(
        got.map.data(),
        &naive::prior_mask(&s, &q, mask.data(), oh, ow),
    ))
}

fn oracle_attention(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = [2, 4][rng.gen_range(0..2)];
    let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
    let mut store = ParamStore::new();
    let mut init = rng_for("oracle-attention", &[rng.gen()]);
    let params = InteractorParams::build(c, 1, &mut init, &mut store)?;
    let store = store.cast::<f64>();
    let f = random(rng, &[c, h, w]);
    let t = random(rng, &[c]);
    let (got, tokens, attn) = sdi(&store, &f, &t, &params, SdiKind::Sd3, SdiTokens::Width)?;
    if tokens != h * w + w {
        return Ok(f64::INFINITY);
    }
    let val = |id| store.value(id).data().to_vec();
    let (want, want_attn) = naive::dense_attention(
        &f,
        t.data(),
        w,
        &val(params.query),
        &val(params.key),
        &val(params.value),
        &val(params.output),
    );
    Ok(max_diff(got.data(), &want).max(max_diff(attn[0].data(), &want_attn)))
}

fn oracle_bce(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
    let logits = random(rng, &[2, h, w]).map(|v| 4.0 * v);
    let target = bits(rng, h * w);
    let mask = Tensor::from_fn([h, w], |i| target[i] as u8 as f64);
    Ok((bce_loss(&logits, &mask)? - naive::bce(logits.data(), &target, LOSS_CLAMP)).abs())
}

fn oracle_miou(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.gen_range(1..=12);
    let px = rng.gen_range(1..=20);
    let names = ["a", "b", "c"];
    let preds: Vec<Vec<bool>> = (0..n).map(|_| bits(rng, px)).collect();
    let truths: Vec<Vec<bool>> = (0..n).map(|_| bits(rng, px)).collect();
    let classes: Vec<String> = (0..n)
        .map(|_| names[rng.gen_range(0..3)].to_string())
        .collect();
    let got = metrics::miou(&preds, &truths, &classes)?.miou;
    Ok((got - naive::miou(&preds, &truths, &classes)).abs())
}

const ORACLES: &[OracleCheck] = &[
    OracleCheck {
        name: "matmul",
        run: oracle_matmul,
    },
    OracleCheck {
        name: "softmax",
        run: oracle_softmax,
    },
    OracleCheck {
        name: "conv2d",
        run: oracle_conv,
    },
    OracleCheck {
        name: "bilinear resize",
        run: oracle_bilinear,
    },
    OracleCheck {
        name: "masked average pool",
        run: oracle_pool,
    },
    OracleCheck {
        name: "prior mask",
        run: oracle_prior,
    },
    OracleCheck {
        name: "dense attention",
        run: oracle_attention,
    },
    OracleCheck {
        name: "cross-entropy",
        run: oracle_bce,
    },
    OracleCheck {
        name: "mIoU",
        run: oracle_miou,
    },
];

/// Compares each kernel with its naive reference on `instances` random cases.
pub fn oracle_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut checks = Vec::new();
    for (k, oracle) in ORACLES.iter().enumerate() {
        let mut worst = 0.0f64;
        let mut detail = None;
        for i in 0..instances {
            let mut rng = rng_for("oracle", &[seed, k as u64, i as u64]);
            match (oracle.run)(&mut rng) {
                Ok(e) => worst = worst.max(e),
                Err(e) => {
                    detail = Some(format!("instance {i}: {e}"));
                    break;
                }
            }
        }
        checks.push(CheckOutcome {
            name: oracle.name.to_string(),
            instances,
            max_error: worst,
            tolerance: ORACLE_TOLERANCE,
            detail,
        });
    }
    Ok(SuiteReport {
        suite: "oracle".into(),
        checks,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}
