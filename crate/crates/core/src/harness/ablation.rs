//! Trains and evaluates several architecture variants under one protocol.

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalConfig, ModelPredictor};
use super::train::{train, TrainConfig};
use crate::episodes::Dataset;
use crate::error::{HseError, Result};
use crate::exec::Execution;
use crate::hse::{HseModel, ModelConfig, VariantConfig};
use crate::semantics::EmbeddingTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub model: ModelConfig,
    /// `fold` is overridden per column.
    pub train: TrainConfig,
    /// `fold` is overridden per column.
    pub eval: EvalConfig,
    pub folds: Vec<usize>,
    /// Parameter initialisation seed shared by every variant.
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub label: String,
    pub fold_miou: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub folds: Vec<usize>,
    pub seeds: Vec<u64>,
    pub init_seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Aligned plain-text rendering, one row per variant.
    pub fn to_text(&self) -> String {
        let mut header = vec!["Method".to_string(), "Variant".to_string()];
        header.extend(self.folds.iter().map(|f| format!("Fold-{f}")));
        header.push("Mean".into());
        let mut cells = vec![header];
        for r in &self.rows {
            let mut line = vec![r.label.clone(), r.variant.clone()];
            line.extend(r.fold_miou.iter().map(|v| format!("{:.2}", v * 100.0)));
            line.push(format!("{:.2}", r.mean * 100.0));
            cells.push(line);
        }
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|i| {
                cells
                    .iter()
                    .map(|r| r[i].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for (n, row) in cells.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| {
                    if i < 2 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if n == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        out
    }

    /// Index of the row with the largest mean.
    pub fn best_row(&self) -> Option<usize> {
        (0..self.rows.len()).max_by(|&a, &b| self.rows[a].mean.total_cmp(&self.rows[b].mean))
    }
}

/// Progress events while the table is being built.
#[derive(Clone, Debug)]
pub enum AblationEvent<'a> {
    Start {
        variant: &'a VariantConfig,
        fold: usize,
    },
    Done {
        variant: &'a VariantConfig,
        fold: usize,
        miou: f64,
    },
}

pub fn run_ablation(
    dataset: &Dataset,
    embeddings: &EmbeddingTable,
    variants: &[VariantConfig],
    cfg: &AblationConfig,
    exec: Execution,
    mut progress: impl FnMut(AblationEvent<'_>),
) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(HseError::Argument(
            "ablation needs at least one variant".into(),
        ));
    }
    if cfg.folds.is_empty() {
        return Err(HseError::Argument(
            "ablation needs at least one fold".into(),
        ));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let mut fold_miou = Vec::with_capacity(cfg.folds.len());
        for &fold in &cfg.folds {
            progress(AblationEvent::Start { variant, fold });
            let model_cfg = ModelConfig {
                variant: *variant,
                ..cfg.model.clone()
            };
            let mut model = HseModel::new(model_cfg.clone(), cfg.init_seed)?;
            let train_cfg = TrainConfig {
                fold,
                ..cfg.train.clone()
            };
            train(&mut model, dataset, embeddings, &train_cfg, exec, |_| {})?;
            let eval_cfg = EvalConfig {
                fold,
                ..cfg.eval.clone()
            };
            let predictor = ModelPredictor::new(&model, embeddings);
            let context = serde_json::json!({ "model": model_cfg, "train": train_cfg, "init_seed": cfg.init_seed });
            let report = evaluate(dataset, &predictor, &eval_cfg, &context, exec)?;
            progress(AblationEvent::Done {
                variant,
                fold,
                miou: report.miou,
            });
            fold_miou.push(report.miou);
        }
        let mean = fold_miou.iter().sum::<f64>() / fold_miou.len() as f64;
        rows.push(AblationRow {
            variant: variant.to_string(),
            label: variant.label(),
            fold_miou,
            mean,
        });
    }
    Ok(AblationTable {
        folds: cfg.folds.clone(),
        seeds: cfg.eval.seeds.clone(),
        init_seed: cfg.init_seed,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_table_is_aligned() {
        let t = AblationTable {
            folds: vec![0, 1],
            seeds: vec![1],
            init_seed: 0,
            rows: vec![
                AblationRow {
                    variant: "off,off".into(),
                    label: "Baseline".into(),
                    fold_miou: vec![0.5, 0.25],
                    mean: 0.375,
                },
                AblationRow {
                    variant: "sd3,gc2".into(),
                    label: "Baseline+GCM+SDI".into(),
                    fold_miou: vec![0.6, 0.4],
                    mean: 0.5,
                },
            ],
        };
        let text = t.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[2].ends_with("37.50"));
        assert_eq!(lines[2].len(), lines[3].len());
        assert_eq!(t.best_row(), Some(1));
    }
}
