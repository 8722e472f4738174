//! Forward kernels against frozen values and naive loop references.

use rand::Rng;

use hse_core::episodes::DatasetSpec;
use hse_core::harness::optim::{Sgd, SgdConfig};
use hse_core::harness::reference as naive;
use hse_core::harness::{miou, oracle_suite};
use hse_core::hse::{
    bce_loss, decode, gcm_coefficient, gcm_modulate, kshot_merge, masked_avg_pool, prior_mask, sdi,
    DecoderParams, GcmKind, InteractorParams, ModulatorParams, SdiKind, SdiTokens, LOSS_CLAMP,
};
use hse_core::numerics::{ops, Tensor};
use hse_core::params::ParamStore;
use hse_core::seeding::{rng_for, uniform_tensor};
use hse_core::semantics::{cosine, synth_embedding, Projector, ProjectorKind};

fn close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= tol, "entry {i}: got {g}, want {w}");
    }
}

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn oracle_suite_passes() {
    let report = oracle_suite(20, 11).unwrap();
    assert!(report.passed(), "{}", report.to_text());
    assert!(report.checks.iter().all(|c| c.instances >= 20));
}

#[test]
fn matmul_two_by_two_times_ones() {
    let a = Tensor::<f64>::from_f64s([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::<f64>::from_f64s([2, 1], &[1.0, 1.0]).unwrap();
    let c = ops::matmul(&a, &b).unwrap();
    assert_eq!(c.shape(), &[2, 1]);
    assert_eq!(c.data(), &[3.0, 7.0]);
    assert_eq!(naive::matmul(a.data(), b.data(), 2, 2, 1), vec![3.0, 7.0]);
}

#[test]
fn softmax_of_zero_and_ln3() {
    let x = Tensor::<f64>::from_f64s([2], &[0.0, 3f64.ln()]).unwrap();
    close(
        ops::softmax_lastdim(&x).unwrap().data(),
        &[0.25, 0.75],
        1e-12,
    );
}

#[test]
fn conv2d_sliding_window_case() {
    let x = Tensor::<f64>::from_fn([1, 4, 4], |i| ((i * 7) % 11) as f64 / 10.0 - 0.5);
    let k = Tensor::<f64>::from_fn([1, 1, 3, 3], |j| ((j * 5) % 7) as f64 / 7.0 - 0.4);
    let want = [
        -0.3285714285714285,
        0.42,
        -0.18285714285714288,
        0.23428571428571424,
        0.09714285714285716,
        0.057142857142857155,
        -0.020000000000000046,
        0.34571428571428575,
        -0.25142857142857133,
        0.31428571428571433,
        -0.1085714285714286,
        -0.45999999999999996,
        -0.06000000000000003,
        0.19428571428571434,
        0.1314285714285714,
        -0.2,
    ];
    let got = ops::conv2d(&x, &k, 1, 1).unwrap();
    assert_eq!(got.shape(), &[1, 4, 4]);
    close(got.data(), &want, 1e-12);
    close(naive::conv2d(&x, &k, 1, 1).data(), &want, 1e-12);
}

#[test]
fn masked_pool_fixed_case() {
    let f = Tensor::<f64>::from_fn([2, 3, 3], |i| (i as f64).sin());
    let m = Tensor::<f64>::from_f64s([3, 3], &[1., 0., 1., 0., 1., 0., 0., 0., 1.]).unwrap();
    let p = masked_avg_pool(&f, &m).unwrap();
    assert!(!p.empty_foreground);
    close(
        p.vector.data(),
        &[0.28546329453528385, -0.2822755440904657],
        1e-12,
    );
}

#[test]
fn masked_pool_matches_double_loop() {
    let mut rng = rng_for("test-pool", &[0]);
    for _ in 0..20 {
        let f = random(&mut rng, &[3, 5, 4]);
        let m = Tensor::<f64>::from_fn([5, 4], |_| rng.gen_bool(0.4) as u8 as f64);
        let got = masked_avg_pool(&f, &m).unwrap();
        close(
            got.vector.data(),
            &naive::masked_avg_pool(&f, m.data()),
            1e-6,
        );
    }
}

#[test]
fn prior_mask_fixed_four_channel_case() {
    let s = Tensor::<f64>::from_fn([4, 4, 4], |i| (0.7 * i as f64).sin());
    let q = Tensor::<f64>::from_fn([4, 4, 4], |i| (0.3 * i as f64).cos());
    let m = Tensor::<f64>::from_fn([4, 4], |i| (i % 3 == 0) as u8 as f64);
    let want = [
        0.599071534409477,
        0.875352611216102,
        1.0,
        0.979242996032184,
        0.8081691073000622,
        0.47968184066762004,
        0.0,
        0.3880533481446118,
        0.7736357894840593,
        0.9727159454047826,
        0.9826187033202097,
        0.8274491350381925,
        0.5345052307991522,
        0.23356162785642084,
        0.6148513928740148,
        0.8805646595054583,
    ];
    let prior = prior_mask(&s, &q, &m, 4, 4).unwrap();
    assert!(!prior.constant);
    close(prior.map.data(), &want, 1e-9);
    close(&naive::prior_mask(&s, &q, m.data(), 4, 4), &want, 1e-9);
}

#[test]
fn bce_fixed_case() {
    let logits =
        Tensor::<f64>::from_f64s([2, 2, 2], &[0.3, -1.2, 2.0, 0.0, -0.5, 0.7, -2.5, 0.0]).unwrap();
    let target = Tensor::<f64>::from_f64s([2, 2], &[1., 0., 0., 1.]).unwrap();
    let loss = bce_loss(&logits, &target).unwrap();
    assert!((loss - 0.9786705874098195).abs() < 1e-12, "{loss}");
    let bits = [true, false, false, true];
    assert!((naive::bce(logits.data(), &bits, LOSS_CLAMP) - loss).abs() < 1e-12);
}

#[test]
fn full_width_token_extension_on_sixteen_square_map() {
    let mut store = ParamStore::new();
    let params = InteractorParams::build(4, 1, &mut rng_for("t", &[1]), &mut store).unwrap();
    let store = store.cast::<f64>();
    let mut rng = rng_for("test-tokens", &[0]);
    let f = random(&mut rng, &[4, 16, 16]);
    let t = random(&mut rng, &[4]);
    let (out, tokens, attn) = sdi(&store, &f, &t, &params, SdiKind::Sd3, SdiTokens::Width).unwrap();
    assert_eq!(tokens, 272);
    assert_eq!(out.shape(), &[4, 16, 16]);
    assert_eq!(attn[0].shape(), &[272, 272]);
    let (_, single, _) = sdi(&store, &f, &t, &params, SdiKind::Sd3, SdiTokens::Single).unwrap();
    assert_eq!(single, 257);
}

#[test]
fn attention_matches_dense_reference() {
    let mut store = ParamStore::new();
    let params = InteractorParams::build(4, 1, &mut rng_for("t", &[2]), &mut store).unwrap();
    let store = store.cast::<f64>();
    let mut rng = rng_for("test-attention", &[0]);
    let f = random(&mut rng, &[4, 3, 3]);
    let t = random(&mut rng, &[4]);
    let (got, _, attn) = sdi(&store, &f, &t, &params, SdiKind::Sd3, SdiTokens::Width).unwrap();
    let val = |id| store.value(id).data().to_vec();
    let (want, want_attn) = naive::dense_attention(
        &f,
        t.data(),
        3,
        &val(params.query),
        &val(params.key),
        &val(params.value),
        &val(params.output),
    );
    close(got.data(), &want, 1e-6);
    close(attn[0].data(), &want_attn, 1e-6);
}

#[test]
fn linear_projector_matches_matmul_plus_bias() {
    let mut store = ParamStore::new();
    let proj = Projector::build(
        ProjectorKind::Linear,
        6,
        4,
        1.0,
        "p",
        &mut rng_for("t", &[3]),
        &mut store,
    );
    let store = store.cast::<f64>();
    let t = random(&mut rng_for("test-proj", &[0]), &[6]);
    let ids = proj.param_ids();
    let (w, b) = (store.value(ids[0]), store.value(ids[1]));
    let mut want = naive::matmul(w.data(), t.data(), 4, 6, 1);
    for (o, bias) in want.iter_mut().zip(b.data()) {
        *o += bias;
    }
    close(proj.project(&store, &t).unwrap().data(), &want, 1e-6);
}

#[test]
fn coefficient_matches_explicit_two_layer_stack() {
    let c = 3;
    let mut store = ParamStore::new();
    let params = ModulatorParams::build(c, &mut rng_for("t", &[4]), &mut store);
    let store = store.cast::<f64>();
    let mut rng = rng_for("test-coef", &[0]);
    let p = random(&mut rng, &[c]);
    let t = random(&mut rng, &[c]);
    let input: Vec<f64> = p.data().iter().chain(t.data()).copied().collect();
    let val = |id| store.value(id).data().to_vec();
    let (w1, b1, w2, b2) = (
        val(params.hidden_weight),
        val(params.hidden_bias),
        val(params.out_weight),
        val(params.out_bias),
    );
    let hidden: Vec<f64> = (0..c)
        .map(|i| {
            ((0..2 * c)
                .map(|j| w1[i * 2 * c + j] * input[j])
                .sum::<f64>()
                + b1[i])
                .max(0.0)
        })
        .collect();
    let want: Vec<f64> = (0..c)
        .map(|i| {
            let z = (0..c).map(|j| w2[i * c + j] * hidden[j]).sum::<f64>() + b2[i];
            1.0 / (1.0 + (-z).exp())
        })
        .collect();
    let got = gcm_coefficient(&store, &p, &t, &params).unwrap();
    close(got.data(), &want, 1e-6);
    assert!(got.data().iter().all(|&w| w > 0.0 && w < 1.0));
}

#[test]
fn residual_modulation_matches_broadcast_loop() {
    let p = Tensor::<f64>::from_f64s([2], &[1.0, 2.0]).unwrap();
    let f = Tensor::<f64>::from_f64s([2, 1, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = Tensor::<f64>::from_f64s([2], &[0.5, 0.25]).unwrap();
    let t = Tensor::<f64>::from_f64s([2], &[0.1, -0.1]).unwrap();
    let (pm, fm) = gcm_modulate(&p, &f, &w, &t, GcmKind::Gc2).unwrap();
    close(pm.data(), &[0.6, 0.4], 1e-12);
    close(fm.data(), &[0.6, 1.1, 0.65, 0.9], 1e-12);

    let mut rng = rng_for("test-gc2", &[0]);
    let (p, f, w, t) = (
        random(&mut rng, &[3]),
        random(&mut rng, &[3, 2, 4]),
        random(&mut rng, &[3]),
        random(&mut rng, &[3]),
    );
    let (_, fm) = gcm_modulate(&p, &f, &w, &t, GcmKind::Gc2).unwrap();
    for ch in 0..3 {
        for y in 0..2 {
            for x in 0..4 {
                let want = f.at(&[ch, y, x]) * w.data()[ch] + t.data()[ch];
                assert!((fm.at(&[ch, y, x]) - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn decoder_upsampling_matches_bilinear_oracle() {
    let c = 4;
    let mut store = ParamStore::new();
    let params = DecoderParams::build(c, 2, &mut rng_for("t", &[5]), &mut store).unwrap();
    let store = store.cast::<f64>();
    let mut rng = rng_for("test-decoder", &[0]);
    let p = random(&mut rng, &[c]);
    let q = random(&mut rng, &[c, 16, 16]);
    let prior = Tensor::<f64>::from_fn([16, 16], |_| rng.gen_range(0.0..1.0));
    let low = decode(&store, &params, &p, &q, &prior, 16, 16).unwrap();
    let high = decode(&store, &params, &p, &q, &prior, 64, 64).unwrap();
    assert_eq!(high.shape(), &[2, 64, 64]);
    for ch in 0..2 {
        let plane = &low.data()[ch * 256..(ch + 1) * 256];
        let want = naive::bilinear(plane, 16, 16, 64, 64);
        close(&high.data()[ch * 4096..(ch + 1) * 4096], &want, 1e-5);
    }
}

#[test]
fn three_prototype_mean_matches_loop() {
    let mut rng = rng_for("test-merge", &[0]);
    let items: Vec<Tensor<f64>> = (0..3).map(|_| random(&mut rng, &[5])).collect();
    let merged = kshot_merge(&items).unwrap();
    let want: Vec<f64> = (0..5)
        .map(|i| (items[0].data()[i] + items[1].data()[i] + items[2].data()[i]) / 3.0)
        .collect();
    close(merged.data(), &want, 1e-7);
}

#[test]
fn truth_plus_equal_sized_extra_scores_half() {
    let truth: Vec<bool> = (0..20).map(|i| i < 5).collect();
    let pred: Vec<bool> = (0..20).map(|i| i < 10).collect();
    let classes = vec!["a".to_string()];
    let summary = miou(&[pred], &[truth], &classes).unwrap();
    assert!((summary.miou - 0.5).abs() < 1e-12);
}

#[test]
fn two_momentum_steps_move_by_two_point_nine_lr_g() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", Tensor::from_f64s([2], &[1.0, -2.0]).unwrap(), false);
    let g = Tensor::<f64>::from_f64s([2], &[0.3, -0.7]).unwrap();
    let lr = 0.005;
    let mut sgd = Sgd::new(SgdConfig {
        lr,
        momentum: 0.9,
        weight_decay: 0.0,
    });
    for _ in 0..2 {
        sgd.step(&mut store, &[Some(g.clone())], lr).unwrap();
    }
    let want: Vec<f64> = [1.0, -2.0]
        .iter()
        .zip(g.data())
        .map(|(x, gi)| x - lr * gi * 2.9)
        .collect();
    close(store.value(id).data(), &want, 1e-12);
}

#[test]
fn weight_decay_alone_shrinks_by_closed_form_factor() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", Tensor::from_f64s([1], &[2.0]).unwrap(), false);
    let mut sgd = Sgd::new(SgdConfig::default());
    sgd.step(&mut store, &[Some(Tensor::zeros([1]))], 0.005)
        .unwrap();
    assert!((store.value(id).data()[0] - 2.0 * (1.0 - 5e-7)).abs() < 1e-15);
}

#[test]
fn benchmark_class_embeddings_are_distinct() {
    let names = DatasetSpec::default().classes;
    assert_eq!(names.len(), 9);
    let vecs: Vec<_> = names
        .iter()
        .map(|n| synth_embedding(n, 16, 7).unwrap())
        .collect();
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            let c = cosine(vecs[i].vector.data(), vecs[j].vector.data());
            assert!(c < 0.9, "{} vs {}: {c}", names[i], names[j]);
        }
    }
}

#[test]
fn random_linear_init_is_bounded() {
    let t: Tensor<f64> = uniform_tensor(&[50], 0.25, &mut rng_for("t", &[6]));
    assert!(t.data().iter().all(|v| v.abs() <= 0.25));
}
