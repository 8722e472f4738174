//! Benchmark data: dataset description, directory loading and seeded
//! episode sampling.

pub mod shapes;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HseError, Result};
use crate::numerics::Tensor;
use crate::seeding::rng_for;

pub use shapes::{ShapeInstance, ShapeKind};
pub use synth::{
    generate_dataset, generate_in_memory, mask_from_record, ImageRecord, Manifest, MANIFEST_FILE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

impl Phase {
    pub const ALL: [Phase; 2] = [Phase::Train, Phase::Test];

    pub fn dir(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Test => "test",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir())
    }
}

impl FromStr for Phase {
    type Err = HseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Phase::Train),
            "test" => Ok(Phase::Test),
            _ => Err(HseError::Argument(format!("unknown phase {s:?}"))),
        }
    }
}

/// Classes, their fold partition, image extent and per-class counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: Vec<String>,
    /// Class indices per fold.
    pub folds: Vec<Vec<usize>>,
    pub extent: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::with_classes(ShapeKind::ALL.len()).expect("the full shape list is valid")
    }
}

/// Splits `n` class indices into three contiguous folds.
pub fn contiguous_folds(n: usize) -> Vec<Vec<usize>> {
    let mut folds = Vec::with_capacity(3);
    let mut start = 0;
    for f in 0..3 {
        let size = n / 3 + usize::from(f < n % 3);
        folds.push((start..start + size).collect());
        start += size;
    }
    folds
}

impl DatasetSpec {
    /// The first `n` shape classes in three folds, at the default extent and counts.
    pub fn with_classes(n: usize) -> Result<Self> {
        if !(3..=ShapeKind::ALL.len()).contains(&n) {
            return Err(HseError::Argument(format!(
                "class count must lie in 3..={}, got {n}",
                ShapeKind::ALL.len()
            )));
        }
        Ok(DatasetSpec {
            classes: ShapeKind::ALL[..n]
                .iter()
                .map(|k| k.name().to_string())
                .collect(),
            folds: contiguous_folds(n),
            extent: 64,
            train_per_class: 60,
            test_per_class: 20,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HseError::Config(m));
        if self.classes.is_empty() {
            return bad("dataset has no classes".into());
        }
        let unique: BTreeSet<&String> = self.classes.iter().collect();
        if unique.len() != self.classes.len() {
            return bad("class names must be unique".into());
        }
        let mut seen = vec![false; self.classes.len()];
        for fold in &self.folds {
            if fold.is_empty() {
                return bad("folds must be non-empty".into());
            }
            for &c in fold {
                if c >= self.classes.len() || std::mem::replace(&mut seen[c], true) {
                    return bad(format!(
                        "folds {:?} are not a partition of the classes",
                        self.folds
                    ));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return bad(format!("folds {:?} do not cover every class", self.folds));
        }
        if self.extent == 0 {
            return bad("image extent must be positive".into());
        }
        Ok(())
    }

    pub fn count(&self, phase: Phase) -> usize {
        match phase {
            Phase::Train => self.train_per_class,
            Phase::Test => self.test_per_class,
        }
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| HseError::Lookup(format!("unknown class {name:?}")))
    }
}

/// Stable address of a sample inside a loaded dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleKey {
    pub phase: Phase,
    pub class: usize,
    /// Position in the class's sample list.
    pub index: usize,
}

/// An image (`3×H×W`, values in `[0, 1]`) and its binary mask (`H×W`).
#[derive(Clone, Debug)]
pub struct Sample {
    pub key: SampleKey,
    pub id: String,
    pub image: Arc<Tensor<f32>>,
    pub mask: Arc<Tensor<f32>>,
}

impl Sample {
    /// From interleaved RGB8 and a grayscale mask thresholded at 128.
    pub fn from_pixels(
        key: SampleKey,
        id: String,
        width: usize,
        height: usize,
        rgb: &[u8],
        mask: &[u8],
    ) -> Result<Self> {
        let n = width * height;
        if rgb.len() != 3 * n || mask.len() != n {
            return Err(HseError::Format(format!(
                "sample {id}: {} RGB bytes and {} mask bytes for {width}×{height}",
                rgb.len(),
                mask.len()
            )));
        }
        let image = Tensor::from_fn([3, height, width], |i| {
            let (c, p) = (i / n, i % n);
            rgb[p * 3 + c] as f32 / 255.0
        });
        let mask = Tensor::from_fn([height, width], |i| if mask[i] >= 128 { 1.0 } else { 0.0 });
        Ok(Sample {
            key,
            id,
            image: Arc::new(image),
            mask: Arc::new(mask),
        })
    }

    pub fn foreground_pixels(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v > 0.5).count()
    }
}

/// One few-shot task.
#[derive(Clone, Debug)]
pub struct Episode {
    pub class: String,
    pub class_index: usize,
    pub support: Vec<Sample>,
    pub query: Sample,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.support.len()
    }
}

/// In-memory index of every sample, grouped by phase and class.
#[derive(Clone, Debug)]
pub struct Dataset {
    spec: DatasetSpec,
    samples: BTreeMap<(Phase, usize), Vec<Sample>>,
    extent: (usize, usize),
}

impl Dataset {
    pub fn from_parts(
        spec: DatasetSpec,
        samples: BTreeMap<(Phase, usize), Vec<Sample>>,
    ) -> Result<Self> {
        spec.validate()?;
        let mut extent = None;
        for list in samples.values() {
            for s in list {
                let e = match s.image.shape() {
                    [3, h, w] => (*h, *w),
                    sh => {
                        return Err(HseError::Format(format!(
                            "sample {} has image shape {sh:?}",
                            s.id
                        )))
                    }
                };
                if s.mask.shape() != [e.0, e.1] {
                    return Err(HseError::Format(format!(
                        "sample {}: mask {:?} does not match image {:?}",
                        s.id,
                        s.mask.shape(),
                        s.image.shape()
                    )));
                }
                match extent {
                    None => extent = Some(e),
                    Some(prev) if prev != e => {
                        return Err(HseError::Format(format!(
                            "sample {} is {}×{}, others are {}×{}",
                            s.id, e.0, e.1, prev.0, prev.1
                        )))
                    }
                    _ => {}
                }
            }
        }
        let extent =
            extent.ok_or_else(|| HseError::Format("dataset contains no samples".into()))?;
        Ok(Dataset {
            spec,
            samples,
            extent,
        })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn classes(&self) -> &[String] {
        &self.spec.classes
    }

    /// Image height and width shared by every sample.
    pub fn extent(&self) -> (usize, usize) {
        self.extent
    }

    pub fn fold_count(&self) -> usize {
        self.spec.folds.len()
    }

    pub fn fold_classes(&self, fold: usize) -> Result<&[usize]> {
        self.spec.folds.get(fold).map(Vec::as_slice).ok_or_else(|| {
            HseError::Argument(format!(
                "fold {fold} out of range 0..{}",
                self.spec.folds.len()
            ))
        })
    }

    pub fn samples(&self, phase: Phase, class: usize) -> &[Sample] {
        self.samples
            .get(&(phase, class))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn sample(&self, key: SampleKey) -> Option<&Sample> {
        self.samples(key.phase, key.class).get(key.index)
    }

    pub fn len(&self) -> usize {
        self.samples.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Classes an episode of `phase` may draw for `fold`: the held-out fold
    /// when testing, every other class when training.
    pub fn episode_classes(&self, fold: usize, phase: Phase) -> Result<Vec<usize>> {
        let held_out = self.fold_classes(fold)?;
        Ok(match phase {
            Phase::Test => held_out.to_vec(),
            Phase::Train => (0..self.spec.classes.len())
                .filter(|c| !held_out.contains(c))
                .collect(),
        })
    }
}

fn read_png(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| HseError::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| HseError::io(dir, e))? {
        out.push(entry.map_err(|e| HseError::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn file_id<'a>(path: &'a Path, prefix: &str) -> Option<&'a str> {
    path.file_name()?
        .to_str()?
        .strip_prefix(prefix)?
        .strip_suffix(".png")
}

fn id_order(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

fn load_class(dir: &Path, phase: Phase, class: usize) -> Result<Vec<Sample>> {
    let files = list_dir(dir)?;
    let mut images: Vec<&str> = files.iter().filter_map(|p| file_id(p, "img_")).collect();
    let masks: BTreeSet<&str> = files.iter().filter_map(|p| file_id(p, "mask_")).collect();
    images.sort_by(|a, b| id_order(a, b));
    if let Some(orphan) = masks.iter().find(|m| !images.contains(m)) {
        return Err(HseError::Format(format!(
            "{} has no matching image",
            dir.join(format!("mask_{orphan}.png")).display()
        )));
    }
    let mut out = Vec::with_capacity(images.len());
    for (index, id) in images.into_iter().enumerate() {
        let img_path = dir.join(format!("img_{id}.png"));
        let mask_path = dir.join(format!("mask_{id}.png"));
        if !masks.contains(id) {
            return Err(HseError::Format(format!(
                "{} has no mask file {}",
                img_path.display(),
                mask_path.display()
            )));
        }
        let rgb = read_png(&img_path)?.to_rgb8();
        let mask = read_png(&mask_path)?.to_luma8();
        if rgb.dimensions() != mask.dimensions() {
            return Err(HseError::Format(format!(
                "{} is {:?} but its mask is {:?}",
                img_path.display(),
                rgb.dimensions(),
                mask.dimensions()
            )));
        }
        let (w, h) = rgb.dimensions();
        let key = SampleKey {
            phase,
            class,
            index,
        };
        out.push(Sample::from_pixels(
            key,
            id.to_string(),
            w as usize,
            h as usize,
            rgb.as_raw(),
            mask.as_raw(),
        )?);
    }
    Ok(out)
}

/// Loads `<root>/<phase>/<class>/img_<id>.png` + `mask_<id>.png` pairs.
/// Classes and folds come from `manifest.json` when present, otherwise from
/// the sorted class directory names split into three contiguous folds.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join(MANIFEST_FILE);
    let spec = if manifest_path.exists() {
        Manifest::read(&manifest_path)?.spec
    } else {
        let mut names = BTreeSet::new();
        for phase in Phase::ALL {
            let dir = root.join(phase.dir());
            if dir.is_dir() {
                for p in list_dir(&dir)? {
                    if p.is_dir() {
                        if let Some(n) = p.file_name().and_then(|n| n.to_str()) {
                            names.insert(n.to_string());
                        }
                    }
                }
            }
        }
        if names.len() < 3 {
            return Err(HseError::Format(format!(
                "{} holds {} class directories; at least 3 are needed",
                root.display(),
                names.len()
            )));
        }
        let classes: Vec<String> = names.into_iter().collect();
        DatasetSpec {
            folds: contiguous_folds(classes.len()),
            classes,
            extent: 0,
            train_per_class: 0,
            test_per_class: 0,
        }
    };
    let mut samples = BTreeMap::new();
    for phase in Phase::ALL {
        for (ci, name) in spec.classes.iter().enumerate() {
            let dir = root.join(phase.dir()).join(name);
            if dir.is_dir() {
                samples.insert((phase, ci), load_class(&dir, phase, ci)?);
            }
        }
    }
    let mut ds = Dataset::from_parts(
        DatasetSpec {
            extent: spec.extent.max(1),
            ..spec.clone()
        },
        samples,
    )?;
    if spec.extent == 0 {
        ds.spec.extent = ds.extent.0;
    }
    Ok(ds)
}

/// Draws episode `index` of the stream keyed on `seed`. The episode depends
/// only on `(dataset, fold, phase, shots, seed, index)`.
pub fn sample_episode(
    dataset: &Dataset,
    fold: usize,
    phase: Phase,
    shots: usize,
    seed: u64,
    index: u64,
) -> Result<Episode> {
    if shots == 0 {
        return Err(HseError::Argument("shot count must be at least 1".into()));
    }
    let classes = dataset.episode_classes(fold, phase)?;
    for &c in &classes {
        let n = dataset.samples(phase, c).len();
        if n < shots + 1 {
            return Err(HseError::Sampling(format!(
                "class {:?} has {n} {phase} samples, {} needed for {shots}-shot episodes",
                dataset.classes()[c],
                shots + 1
            )));
        }
    }
    let mut rng = rng_for("episode", &[seed, index, fold as u64, phase as u64]);
    let class = classes[rng.gen_range(0..classes.len())];
    let pool = dataset.samples(phase, class);
    let q = rng.gen_range(0..pool.len());
    let eligible: Vec<usize> = (0..pool.len())
        .filter(|&i| i != q && pool[i].foreground_pixels() > 0)
        .collect();
    if eligible.len() < shots {
        return Err(HseError::Sampling(format!(
            "class {:?} has {} usable support samples, {shots} needed",
            dataset.classes()[class],
            eligible.len()
        )));
    }
    let support = sample_indices(&mut rng, eligible.len(), shots)
        .into_iter()
        .map(|i| pool[eligible[i]].clone())
        .collect();
    Ok(Episode {
        class: dataset.classes()[class].clone(),
        class_index: class,
        support,
        query: pool[q].clone(),
    })
}
