//! Episodic evaluation and the report format.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{IouAccumulator, IouMode};
use crate::episodes::{sample_episode, Dataset, Episode, Phase};
use crate::error::{HseError, Result};
use crate::exec::{try_map_indexed, Execution};
use crate::hse::{FeatureBank, HseModel};
use crate::semantics::EmbeddingTable;

/// Produces a binary query mask for an episode.
pub trait Predictor: Sync {
    fn predict(&self, episode: &Episode) -> Result<Vec<bool>>;
}

/// Runs the model and takes the per-pixel argmax.
pub struct ModelPredictor<'a> {
    model: &'a HseModel<f32>,
    embeddings: &'a EmbeddingTable,
    bank: FeatureBank<f32>,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a HseModel<f32>, embeddings: &'a EmbeddingTable) -> Self {
        ModelPredictor {
            model,
            embeddings,
            bank: FeatureBank::new(),
        }
    }
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, episode: &Episode) -> Result<Vec<bool>> {
        Ok(self
            .model
            .forward_episode(episode, self.embeddings, Some(&self.bank))?
            .prediction())
    }
}

/// Predicts the ground truth.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, episode: &Episode) -> Result<Vec<bool>> {
        Ok(episode.query.mask.data().iter().map(|&v| v > 0.5).collect())
    }
}

/// Predicts background everywhere.
pub struct BackgroundPredictor;

impl Predictor for BackgroundPredictor {
    fn predict(&self, episode: &Episode) -> Result<Vec<bool>> {
        Ok(vec![false; episode.query.mask.len()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub fold: usize,
    pub shots: usize,
    /// Episodes per seed.
    pub episodes: usize,
    /// Each seed keys an independent test-episode stream.
    pub seeds: Vec<u64>,
    pub iou_mode: IouMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fold: 0,
            shots: 1,
            episodes: 200,
            seeds: vec![0, 1, 2],
            iou_mode: IouMode::Dataset,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_fingerprint: String,
    pub fold: usize,
    pub shots: usize,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub per_seed_miou: Vec<f64>,
    /// Mean over seeds of each class's IoU; classes undefined in every seed are omitted.
    pub per_class_iou: BTreeMap<String, f64>,
    pub miou: f64,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialise")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| HseError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HseError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| HseError::Format(format!("{}: {e}", path.display())))
    }
}

/// Hex SHA-256 of the canonical JSON of `value`.
pub fn fingerprint<S: Serialize>(value: &S) -> String {
    let bytes = serde_json::to_vec(value).expect("fingerprinted values serialise");
    hex::encode(Sha256::digest(bytes))
}

/// Mean of `values` summed in ascending order, so the result does not depend
/// on their arrangement.
fn order_free_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum::<f64>() / sorted.len() as f64
}

/// Evaluates `predictor` on `cfg.episodes` test episodes per seed.
/// `context` (model config, parameter digest, …) enters the fingerprint.
pub fn evaluate<P: Predictor, C: Serialize>(
    dataset: &Dataset,
    predictor: &P,
    cfg: &EvalConfig,
    context: &C,
    exec: Execution,
) -> Result<EvalReport> {
    if cfg.seeds.is_empty() {
        return Err(HseError::Argument(
            "evaluation needs at least one seed".into(),
        ));
    }
    if cfg.episodes == 0 {
        return Err(HseError::Argument(
            "evaluation needs at least one episode".into(),
        ));
    }
    let fold_classes: Vec<String> = dataset
        .fold_classes(cfg.fold)?
        .iter()
        .map(|&c| dataset.classes()[c].clone())
        .collect();

    let mut per_seed_miou = Vec::with_capacity(cfg.seeds.len());
    let mut class_values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut warnings = Vec::new();
    for &seed in &cfg.seeds {
        let results = try_map_indexed(exec, cfg.episodes, |i| {
            let ep = sample_episode(dataset, cfg.fold, Phase::Test, cfg.shots, seed, i as u64)?;
            let truth: Vec<bool> = ep.query.mask.data().iter().map(|&v| v > 0.5).collect();
            let pred = predictor.predict(&ep)?;
            Ok::<_, HseError>((ep.class, pred, truth))
        })?;
        let mut acc = IouAccumulator::new(cfg.iou_mode);
        for (class, pred, truth) in &results {
            acc.add(class, pred, truth)?;
        }
        let summary = acc.summarize(&fold_classes);
        for c in &summary.undefined {
            warnings.push(format!(
                "seed {seed}: IoU of class {c:?} undefined (no union pixels or no episodes)"
            ));
        }
        for (c, v) in summary.per_class {
            if let Some(v) = v {
                class_values.entry(c).or_default().push(v);
            }
        }
        per_seed_miou.push(summary.miou);
    }
    let per_class_iou = class_values
        .into_iter()
        .map(|(c, v)| (c, order_free_mean(&v)))
        .collect();
    let miou = order_free_mean(&per_seed_miou);
    let config_fingerprint = fingerprint(&serde_json::json!({ "eval": cfg, "context": context }));
    Ok(EvalReport {
        config_fingerprint,
        fold: cfg.fold,
        shots: cfg.shots,
        episodes: cfg.episodes,
        seeds: cfg.seeds.clone(),
        per_seed_miou,
        per_class_iou,
        miou,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_free_mean_ignores_permutation() {
        let a = [0.1, 0.7, 0.30000000000000004, 1e-17];
        let b = [1e-17, 0.30000000000000004, 0.1, 0.7];
        assert_eq!(order_free_mean(&a).to_bits(), order_free_mean(&b).to_bits());
    }

    #[test]
    fn fingerprint_is_stable_hex() {
        let f = fingerprint(&serde_json::json!({"a": 1}));
        assert_eq!(f.len(), 64);
        assert_eq!(f, fingerprint(&serde_json::json!({"a": 1})));
    }
}
