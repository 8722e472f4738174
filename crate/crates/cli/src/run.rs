use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use serde_json::json;
use sha2::{Digest, Sha256};

use hse_core::backbone::BackboneConfig;
use hse_core::episodes::{
    generate_dataset, load_dataset, sample_episode, Dataset, DatasetSpec, Phase,
};
use hse_core::harness::{
    evaluate, gradient_suite, oracle_suite, run_ablation, train, write_loss_curve, AblationConfig,
    EvalConfig, IouMode, LrSchedule, ModelPredictor, SgdConfig, TrainConfig,
};
use hse_core::hse::{HseModel, ModelConfig, VariantConfig};
use hse_core::params::{encode_snapshot, read_snapshot};
use hse_core::semantics::{load_embeddings, save_embeddings, EmbeddingTable};
use hse_core::{Execution, HseError};

use crate::{
    AblateArgs, CheckArgs, Cli, Command, EmbeddingArgs, EvalArgs, GenDataArgs, ModelArgs,
    OptimArgs, PredictArgs, TrainArgs,
};

/// 0 success, 1 verification or runtime failure, 2 usage, 3 data/format.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<HseError>() {
        Some(h) if h.is_data_error() => 3,
        Some(HseError::Config(_) | HseError::Argument(_)) => 2,
        _ => 1,
    }
}

pub fn dispatch(cli: Cli) -> Result<ExitCode> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a, exec),
        Command::Eval(a) => eval_cmd(a, exec),
        Command::Ablate(a) => ablate_cmd(a, exec),
        Command::Predict(a) => predict_cmd(a),
        Command::Check(a) => check_cmd(a),
    }
}

/// Run description stored next to a parameter snapshot.
#[derive(serde::Serialize, serde::Deserialize, Debug)]
struct RunRecord {
    model: ModelConfig,
    train: TrainConfig,
    init_seed: u64,
    embeddings: EmbeddingSource,
    params_sha256: String,
}

#[derive(serde::Serialize, serde::Deserialize, Debug, Clone, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum EmbeddingSource {
    File { path: PathBuf },
    Synthetic { dim: usize, seed: u64 },
}

fn sidecar(params: &Path) -> PathBuf {
    let mut s = params.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn resolve_embeddings(source: &EmbeddingSource, classes: &[String]) -> Result<EmbeddingTable> {
    Ok(match source {
        EmbeddingSource::File { path } => EmbeddingTable::new(load_embeddings(path)?)?,
        EmbeddingSource::Synthetic { dim, seed } => {
            EmbeddingTable::synthesize(classes, *dim, *seed)?
        }
    })
}

/// A file with no entries falls back to synthesis.
fn embedding_source(args: &EmbeddingArgs) -> Result<EmbeddingSource> {
    let synth = EmbeddingSource::Synthetic {
        dim: args.ct,
        seed: args.embedding_seed,
    };
    match &args.embeddings {
        Some(path) if !args.synth_embeddings => {
            if load_embeddings(path)?.is_empty() {
                eprintln!(
                    "{} holds no embeddings; synthesizing instead",
                    path.display()
                );
                Ok(synth)
            } else {
                Ok(EmbeddingSource::File { path: path.clone() })
            }
        }
        _ => Ok(synth),
    }
}

fn embedding_dim(table: &EmbeddingTable, source: &EmbeddingSource) -> usize {
    match source {
        EmbeddingSource::Synthetic { dim, .. } => *dim,
        EmbeddingSource::File { .. } => table.dim(),
    }
}

fn model_config(args: &ModelArgs, embed_dim: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            mid_channels: args.channels,
            high_channels: args.channels,
            ..BackboneConfig::default()
        },
        embed_dim,
        projector: args.projector,
        variant: args.variant,
        heads: args.heads,
        sdi_tokens: args.sdi_tokens,
        decoder_depth: args.decoder_depth,
        train_backbone: args.train_backbone,
    }
}

fn train_config(args: &OptimArgs, fold: usize, shots: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        sgd: SgdConfig {
            lr: args.lr,
            momentum: args.momentum,
            weight_decay: args.weight_decay,
        },
        schedule: match args.poly_power {
            Some(power) => LrSchedule::Poly { power },
            None => LrSchedule::Constant,
        },
        batch_size: args.batch_size,
        epochs: args.epochs,
        episodes_per_epoch: args.episodes_per_epoch,
        fold,
        shots,
        seed,
        ..TrainConfig::default()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HseError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| HseError::io(path, e))?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let spec = DatasetSpec {
        extent: a.extent,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        ..DatasetSpec::with_classes(a.classes)?
    };
    let manifest = generate_dataset(&spec, a.seed, &a.out)?;
    if let Some(path) = &a.embeddings_out {
        let table = EmbeddingTable::synthesize(&spec.classes, a.ct, a.seed)?;
        save_embeddings(path, table.entries())?;
    }
    println!(
        "wrote {} images of {} classes to {}",
        manifest.images.len(),
        spec.classes.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(a: TrainArgs, exec: Execution) -> Result<ExitCode> {
    let data = load_dataset(&a.data)?;
    let source = embedding_source(&a.embeddings)?;
    let table = resolve_embeddings(&source, data.classes())?;
    let model_cfg = model_config(&a.model, embedding_dim(&table, &source));
    let train_cfg = train_config(&a.optim, a.fold, a.shots, a.seed);
    let mut model = HseModel::new(model_cfg.clone(), a.optim.train_seed)?;
    let outcome = train(&mut model, &data, &table, &train_cfg, exec, |s| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  lr {:.5}",
            s.epoch, s.mean_loss, s.lr
        );
    })?;
    let mut bytes = Vec::new();
    encode_snapshot(model.store(), &mut bytes)?;
    write_file(&a.out, &bytes)?;
    let record = RunRecord {
        model: model_cfg,
        train: train_cfg,
        init_seed: a.optim.train_seed,
        embeddings: source,
        params_sha256: hex_digest(&bytes),
    };
    write_file(
        &sidecar(&a.out),
        serde_json::to_string_pretty(&record)?.as_bytes(),
    )?;
    if let Some(path) = &a.loss_curve {
        write_loss_curve(path, &outcome.loss_curve)?;
    }
    println!("wrote {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn hex_digest(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

struct Loaded {
    model: HseModel<f32>,
    record: RunRecord,
    table: EmbeddingTable,
    source: EmbeddingSource,
}

fn load_trained(
    params: &Path,
    data: &Dataset,
    override_embeddings: Option<&PathBuf>,
) -> Result<Loaded> {
    let side = sidecar(params);
    let text = std::fs::read_to_string(&side).map_err(|e| HseError::io(&side, e))?;
    let record: RunRecord = serde_json::from_str(&text)
        .map_err(|e| HseError::Format(format!("{}: {e}", side.display())))?;
    let records = read_snapshot(params)?;
    let model = HseModel::from_snapshot(record.model.clone(), &records)?;
    let source = match override_embeddings {
        Some(p) => EmbeddingSource::File { path: p.clone() },
        None => record.embeddings.clone(),
    };
    let table = resolve_embeddings(&source, data.classes())?;
    Ok(Loaded {
        model,
        record,
        table,
        source,
    })
}

fn eval_cmd(a: EvalArgs, exec: Execution) -> Result<ExitCode> {
    let data = load_dataset(&a.data)?;
    let loaded = load_trained(&a.params, &data, a.embeddings.as_ref())?;
    let cfg = EvalConfig {
        fold: a.fold.unwrap_or(loaded.record.train.fold),
        shots: a.shots,
        episodes: a.episodes,
        seeds: a.seeds.clone(),
        iou_mode: if a.per_episode_iou {
            IouMode::PerEpisode
        } else {
            IouMode::Dataset
        },
    };
    let predictor = ModelPredictor::new(&loaded.model, &loaded.table);
    let context = json!({
        "model": loaded.record.model,
        "params_sha256": loaded.record.params_sha256,
        "embeddings": loaded.source,
    });
    let report = evaluate(&data, &predictor, &cfg, &context, exec)?;
    let text = report.to_json();
    if let Some(path) = &a.report {
        write_file(path, (text.clone() + "\n").as_bytes())?;
    }
    println!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn parse_variants(list: Option<&str>) -> Result<Vec<VariantConfig>> {
    match list {
        None => Ok(VariantConfig::component_ablation()),
        Some(s) => {
            let v: Vec<VariantConfig> = s
                .split(|c| c == ';' || c == ' ')
                .filter(|p| !p.trim().is_empty())
                .map(|p| p.trim().parse())
                .collect::<Result<_, HseError>>()?;
            if v.is_empty() {
                bail!(HseError::Argument("no variants given".into()));
            }
            Ok(v)
        }
    }
}

fn ablate_cmd(a: AblateArgs, exec: Execution) -> Result<ExitCode> {
    let data = load_dataset(&a.data)?;
    let variants = parse_variants(a.variants.as_deref())?;
    let source = embedding_source(&a.embeddings)?;
    let table = resolve_embeddings(&source, data.classes())?;
    let cfg = AblationConfig {
        model: model_config(&a.model, embedding_dim(&table, &source)),
        train: train_config(&a.optim, 0, a.shots, a.train_stream_seed),
        eval: EvalConfig {
            shots: a.shots,
            episodes: a.episodes,
            seeds: a.seeds.clone(),
            ..EvalConfig::default()
        },
        folds: a.folds.clone(),
        init_seed: a.optim.train_seed,
    };
    let result = run_ablation(&data, &table, &variants, &cfg, exec, |ev| match ev {
        hse_core::harness::ablation::AblationEvent::Start { variant, fold } => {
            eprintln!("training {variant} on fold {fold}")
        }
        hse_core::harness::ablation::AblationEvent::Done {
            variant,
            fold,
            miou,
        } => {
            eprintln!("{variant} fold {fold}: mIoU {:.4}", miou)
        }
    })?;
    let text = result.to_text();
    if let Some(path) = &a.report {
        write_file(
            path,
            (serde_json::to_string_pretty(&result)? + "\n").as_bytes(),
        )?;
    }
    if let Some(path) = &a.text {
        write_file(path, text.as_bytes())?;
    }
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn with_suffix(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("episode");
    out.with_file_name(format!("{stem}_{suffix}.png"))
}

fn save_gray(path: &Path, values: &[f32], w: usize, h: usize) -> Result<()> {
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    save_png(path, &bytes, w, h, image::ExtendedColorType::L8)
}

fn save_png(
    path: &Path,
    bytes: &[u8],
    w: usize,
    h: usize,
    color: image::ExtendedColorType,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HseError::io(dir, e))?;
    }
    image::save_buffer(path, bytes, w as u32, h as u32, color).map_err(|source| {
        HseError::Image {
            path: path.to_path_buf(),
            source,
        }
    })?;
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<ExitCode> {
    let data = load_dataset(&a.data)?;
    let loaded = load_trained(&a.params, &data, a.embeddings.as_ref())?;
    let fold = a.fold.unwrap_or(loaded.record.train.fold);
    let episode = sample_episode(
        &data,
        fold,
        Phase::Test,
        a.shots,
        a.episode_seed,
        a.episode_index,
    )?;
    let out = loaded
        .model
        .forward_episode(&episode, &loaded.table, None)?;
    let (h, w) = data.extent();
    let img = episode.query.image.data();
    let n = h * w;
    let rgb: Vec<u8> = (0..n)
        .flat_map(|p| (0..3).map(move |c| (img[c * n + p].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    save_png(
        &with_suffix(&a.out, "query"),
        &rgb,
        w,
        h,
        image::ExtendedColorType::Rgb8,
    )?;
    save_gray(
        &with_suffix(&a.out, "truth"),
        episode.query.mask.data(),
        w,
        h,
    )?;
    let prior = hse_core::numerics::bilinear_resize(&out.prior.map, h, w)?;
    save_gray(&with_suffix(&a.out, "prior"), prior.data(), w, h)?;
    let pred: Vec<f32> = out.prediction().iter().map(|&b| b as u8 as f32).collect();
    save_gray(&with_suffix(&a.out, "pred"), &pred, w, h)?;
    println!(
        "class {}  query {}  loss {:.5}  wrote {}",
        episode.class,
        episode.query.id,
        out.loss,
        with_suffix(&a.out, "*").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn check_cmd(a: CheckArgs) -> Result<ExitCode> {
    let report = if a.gradients {
        gradient_suite(&a.seeds)?
    } else {
        oracle_suite(a.instances, a.seeds.first().copied().unwrap_or(0))?
    };
    print!("{}", report.to_text());
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
