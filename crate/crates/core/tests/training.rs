use hse_core::episodes::{generate_in_memory, sample_episode, Dataset, DatasetSpec, Phase};
use hse_core::harness::optim::Sgd;
use hse_core::harness::{train, SgdConfig, TrainConfig};
use hse_core::hse::{FeatureBank, HseModel, ModelConfig, VariantConfig};
use hse_core::params::ParamStore;
use hse_core::semantics::EmbeddingTable;
use hse_core::{Execution, HseError};

fn data(extent: usize, per_class: usize) -> (Dataset, EmbeddingTable) {
    let spec = DatasetSpec {
        extent,
        train_per_class: per_class,
        test_per_class: per_class,
        ..DatasetSpec::default()
    };
    let (_, data) = generate_in_memory(&spec, 2).unwrap();
    let emb = EmbeddingTable::synthesize(data.classes(), 16, 7).unwrap();
    (data, emb)
}

fn model(variant: VariantConfig, seed: u64) -> HseModel<f32> {
    let mut cfg = ModelConfig {
        variant,
        ..ModelConfig::default()
    };
    cfg.backbone.mid_channels = 8;
    cfg.backbone.high_channels = 8;
    HseModel::new(cfg, seed).unwrap()
}

fn short(epochs: usize, episodes: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        episodes_per_epoch: episodes,
        seed,
        check_frozen: true,
        ..TrainConfig::default()
    }
}

fn values_with_prefix(store: &ParamStore<f32>, prefix: &str) -> Vec<Vec<u32>> {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn one_sgd_step_leaves_the_backbone_bitwise_unchanged() {
    let (data, emb) = data(32, 4);
    let mut m = model(VariantConfig::FULL, 1);
    let before = values_with_prefix(m.store(), "backbone.");
    let decoder_before = values_with_prefix(m.store(), "decoder.");
    let ep = sample_episode(&data, 0, Phase::Train, 1, 0, 0).unwrap();
    let (_, grads) = m
        .episode_gradients(&ep, &emb, Some(&FeatureBank::new()))
        .unwrap();
    let mut sgd = Sgd::new(SgdConfig::default());
    sgd.step(m.store_mut(), &grads, 0.005).unwrap();
    assert!(!before.is_empty());
    assert_eq!(values_with_prefix(m.store(), "backbone."), before);
    assert_ne!(values_with_prefix(m.store(), "decoder."), decoder_before);
}

#[test]
fn baseline_graph_holds_no_interaction_or_modulation_parameters() {
    let (data, emb) = data(32, 4);
    let ep = sample_episode(&data, 0, Phase::Train, 1, 0, 0).unwrap();
    let names = |v: VariantConfig| -> Vec<String> {
        let m = model(v, 1);
        m.parameters_on_tape(&ep, &emb)
            .unwrap()
            .into_iter()
            .map(|id| m.store().get(id).name.clone())
            .collect()
    };
    let base = names(VariantConfig::BASELINE);
    assert!(base.iter().all(|n| n.starts_with("decoder.")), "{base:?}");
    let full = names(VariantConfig::FULL);
    for group in [
        "interactor.",
        "modulator.",
        "projector.spatial.",
        "projector.channel.",
    ] {
        assert!(
            full.iter().any(|n| n.starts_with(group)),
            "{group} missing from {full:?}"
        );
    }
    assert!(full.iter().all(|n| !n.starts_with("backbone.")));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (data, emb) = data(32, 4);
    let mut m = model(VariantConfig::FULL, 3);
    let before = m.store().clone();
    let mut cfg = short(2, 8, 0);
    cfg.sgd.lr = 0.0;
    cfg.sgd.weight_decay = 0.0;
    train(&mut m, &data, &emb, &cfg, Execution::default(), |_| {}).unwrap();
    assert_eq!(m.store(), &before);
}

#[test]
fn identical_seeds_give_identical_loss_curves_in_both_execution_modes() {
    let (data, emb) = data(32, 4);
    let run = |exec| {
        let mut m = model(VariantConfig::FULL, 4);
        let out = train(&mut m, &data, &emb, &short(2, 8, 5), exec, |_| {}).unwrap();
        (out.loss_curve, m.store().clone())
    };
    let (curve_a, store_a) = run(Execution::Sequential);
    let (curve_b, store_b) = run(Execution::Parallel);
    let (curve_c, _) = run(Execution::Parallel);
    assert_eq!(curve_a.len(), 2);
    assert_eq!(curve_a, curve_b);
    assert_eq!(curve_b, curve_c);
    assert_eq!(store_a, store_b);
}

#[test]
fn unused_projector_stays_put_while_the_used_one_trains() {
    let (data, emb) = data(32, 4);
    let variant = "sd3,off".parse().unwrap();
    let mut m = model(variant, 6);
    let spatial = values_with_prefix(m.store(), "projector.spatial.");
    let channel = values_with_prefix(m.store(), "projector.channel.");
    train(
        &mut m,
        &data,
        &emb,
        &short(1, 8, 0),
        Execution::default(),
        |_| {},
    )
    .unwrap();
    assert_ne!(values_with_prefix(m.store(), "projector.spatial."), spatial);
    assert_eq!(values_with_prefix(m.store(), "projector.channel."), channel);
}

#[test]
fn loss_falls_from_first_to_last_epoch_over_three_seeds() {
    let (data, emb) = data(64, 12);
    for seed in 0..3 {
        let mut m = HseModel::new(ModelConfig::default(), seed).unwrap();
        let out = train(
            &mut m,
            &data,
            &emb,
            &short(4, 40, seed),
            Execution::default(),
            |_| {},
        )
        .unwrap();
        let first = out.loss_curve.first().unwrap().mean_loss;
        let last = out.loss_curve.last().unwrap().mean_loss;
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}

#[test]
fn exploding_updates_report_the_divergent_epoch() {
    let (data, emb) = data(32, 4);
    let mut m = model(VariantConfig::FULL, 1);
    let mut cfg = short(30, 8, 0);
    cfg.sgd.lr = 1e12;
    cfg.sgd.momentum = 0.0;
    match train(&mut m, &data, &emb, &cfg, Execution::default(), |_| {}) {
        Err(HseError::Divergence { epoch, .. }) => assert!(epoch < 30),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn invalid_configuration_is_rejected_before_training() {
    let (data, emb) = data(32, 4);
    let mut m = model(VariantConfig::FULL, 1);
    let mut cfg = short(1, 8, 0);
    cfg.batch_size = 0;
    assert!(matches!(
        train(&mut m, &data, &emb, &cfg, Execution::default(), |_| {}),
        Err(HseError::Config(_))
    ));
}
