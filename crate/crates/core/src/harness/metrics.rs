//! Intersection-over-union bookkeeping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};

/// How per-class IoU is aggregated over episodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IouMode {
    /// `Σ intersection / Σ union` over the class's episodes.
    #[default]
    Dataset,
    /// Mean of per-episode IoU (episodes with empty union skipped).
    PerEpisode,
}

/// Intersection and union pixel counts.
pub fn overlap(pred: &[bool], truth: &[bool]) -> Result<(u64, u64)> {
    if pred.len() != truth.len() {
        return dim_err(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            truth.len()
        ));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        inter += (p && t) as u64;
        union += (p || t) as u64;
    }
    Ok((inter, union))
}

#[derive(Clone, Debug, Default)]
struct ClassTally {
    intersection: u64,
    union: u64,
    episode_iou_sum: f64,
    episodes_with_union: usize,
}

#[derive(Clone, Debug, Default)]
pub struct IouAccumulator {
    mode: IouMode,
    tallies: BTreeMap<String, ClassTally>,
}

/// Per-class IoU (`None` when undefined) and their mean over defined classes.
#[derive(Clone, Debug, PartialEq)]
pub struct MiouSummary {
    pub per_class: BTreeMap<String, Option<f64>>,
    pub miou: f64,
    /// Classes whose IoU is undefined (no union pixels or no episodes).
    pub undefined: Vec<String>,
}

impl IouAccumulator {
    pub fn new(mode: IouMode) -> Self {
        IouAccumulator {
            mode,
            tallies: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, class: &str, pred: &[bool], truth: &[bool]) -> Result<()> {
        let (i, u) = overlap(pred, truth)?;
        let t = self.tallies.entry(class.to_string()).or_default();
        t.intersection += i;
        t.union += u;
        if u > 0 {
            t.episode_iou_sum += i as f64 / u as f64;
            t.episodes_with_union += 1;
        }
        Ok(())
    }

    fn class_iou(&self, class: &str) -> Option<f64> {
        let t = self.tallies.get(class)?;
        match self.mode {
            IouMode::Dataset => (t.union > 0).then(|| t.intersection as f64 / t.union as f64),
            IouMode::PerEpisode => (t.episodes_with_union > 0)
                .then(|| t.episode_iou_sum / t.episodes_with_union as f64),
        }
    }

    /// Mean IoU over `classes`; undefined classes are excluded and listed.
    /// With no defined class the mean is 0.
    pub fn summarize(&self, classes: &[String]) -> MiouSummary {
        let mut per_class = BTreeMap::new();
        let mut undefined = Vec::new();
        let mut total = 0.0;
        let mut defined = 0usize;
        for c in classes {
            let iou = self.class_iou(c);
            match iou {
                Some(v) => {
                    total += v;
                    defined += 1;
                }
                None => undefined.push(c.clone()),
            }
            per_class.insert(c.clone(), iou);
        }
        MiouSummary {
            per_class,
            miou: if defined > 0 {
                total / defined as f64
            } else {
                0.0
            },
            undefined,
        }
    }
}

/// Dataset-level mIoU of aligned prediction/truth lists, `classes[i]` being
/// the class of pair `i`, averaged over the distinct classes.
pub fn miou(
    predictions: &[Vec<bool>],
    truths: &[Vec<bool>],
    classes: &[String],
) -> Result<MiouSummary> {
    if predictions.len() != truths.len() || truths.len() != classes.len() {
        return dim_err(format!(
            "{} predictions, {} truths and {} class labels",
            predictions.len(),
            truths.len(),
            classes.len()
        ));
    }
    let mut acc = IouAccumulator::new(IouMode::Dataset);
    for ((p, t), c) in predictions.iter().zip(truths).zip(classes) {
        acc.add(c, p, t)?;
    }
    let mut names: Vec<String> = classes.to_vec();
    names.sort();
    names.dedup();
    Ok(acc.summarize(&names))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bools(s: &str) -> Vec<bool> {
        s.chars().map(|c| c == '1').collect()
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let t = bools("0110");
        let s = miou(&[t.clone()], &[t], &["a".into()]).unwrap();
        assert_eq!(s.miou, 1.0);
    }

    #[test]
    fn superset_of_double_size_scores_half() {
        let s = miou(&[bools("1111")], &[bools("1100")], &["a".into()]).unwrap();
        assert_eq!(s.miou, 0.5);
    }

    #[test]
    fn empty_union_is_undefined_and_excluded() {
        let s = miou(
            &[bools("00"), bools("11")],
            &[bools("00"), bools("10")],
            &["a".into(), "b".into()],
        )
        .unwrap();
        assert_eq!(s.undefined, vec!["a".to_string()]);
        assert_eq!(s.miou, 0.5);
    }

    #[test]
    fn per_episode_mode_averages_ratios() {
        let mut acc = IouAccumulator::new(IouMode::PerEpisode);
        acc.add("a", &bools("1000"), &bools("1000")).unwrap();
        acc.add("a", &bools("1111"), &bools("1000")).unwrap();
        let s = acc.summarize(&["a".into()]);
        assert!((s.miou - 0.625).abs() < 1e-15);
        let mut acc = IouAccumulator::new(IouMode::Dataset);
        acc.add("a", &bools("1000"), &bools("1000")).unwrap();
        acc.add("a", &bools("1111"), &bools("1000")).unwrap();
        assert!((acc.summarize(&["a".into()]).miou - 0.4).abs() < 1e-15);
    }
}
