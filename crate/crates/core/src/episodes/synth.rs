//! Synthetic shape benchmark: textured backgrounds, coloured target
//! instances and unlabeled distractors from other classes.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::shapes::{rasterize_union, ShapeInstance, ShapeKind};
use super::{Dataset, DatasetSpec, Phase, Sample, SampleKey};
use crate::error::{HseError, Result};
use crate::seeding::rng_for;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Upper bound on the foreground fraction of a generated mask.
pub const MAX_FOREGROUND_FRACTION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub phase: Phase,
    pub class: String,
    pub id: usize,
    pub image: String,
    pub mask: String,
    pub targets: Vec<ShapeInstance>,
    pub distractors: Vec<ShapeInstance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub seed: u64,
    /// phase → class → image count.
    pub counts: BTreeMap<Phase, BTreeMap<String, usize>>,
    pub images: Vec<ImageRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HseError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| HseError::Format(format!("{}: {e}", path.display())))
    }
}

/// Pixels of one rendered image before encoding.
pub struct RenderedImage {
    pub record: ImageRecord,
    /// Interleaved RGB8.
    pub rgb: Vec<u8>,
    /// `{0, 255}` grayscale.
    pub mask: Vec<u8>,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn class_kind(spec: &DatasetSpec, class: usize) -> Result<ShapeKind> {
    spec.classes[class].parse().map_err(|_| {
        HseError::Config(format!(
            "class {:?} is not a generatable shape",
            spec.classes[class]
        ))
    })
}

fn random_instance(kind: ShapeKind, extent: f64, rng: &mut impl Rng) -> ShapeInstance {
    let radius = rng.gen_range(0.09..0.2) * extent;
    let margin = radius * 0.9;
    ShapeInstance {
        kind,
        cx: rng.gen_range(margin..extent - margin),
        cy: rng.gen_range(margin..extent - margin),
        radius,
        angle: rng.gen_range(0.0..2.0 * PI),
        color: hsv_to_rgb(
            rng.gen(),
            rng.gen_range(0.55..0.95),
            rng.gen_range(0.6..1.0),
        ),
    }
}

/// Renders image `id` of `class` in `phase`. Deterministic in its arguments.
pub fn render_image(
    spec: &DatasetSpec,
    seed: u64,
    phase: Phase,
    class: usize,
    id: usize,
) -> Result<RenderedImage> {
    let n_classes = spec.classes.len();
    let extent = spec.extent;
    let ext = extent as f64;
    let kind = class_kind(spec, class)?;
    let mut rng = rng_for("image", &[seed, phase as u64, class as u64, id as u64]);

    let (targets, mask) = loop {
        let n = rng.gen_range(1..=3);
        let targets: Vec<ShapeInstance> = (0..n)
            .map(|_| random_instance(kind, ext, &mut rng))
            .collect();
        let mask = rasterize_union(&targets, extent, extent);
        let fg = mask.iter().filter(|&&b| b).count() as f64 / (extent * extent) as f64;
        if fg > 0.0 && fg <= MAX_FOREGROUND_FRACTION {
            break (targets, mask);
        }
    };

    let mut distractors = Vec::new();
    if n_classes > 1 {
        let wanted = rng.gen_range(0..=2);
        let mut attempts = 0;
        while distractors.len() < wanted && attempts < 20 {
            attempts += 1;
            let mut other = rng.gen_range(0..n_classes - 1);
            if other >= class {
                other += 1;
            }
            let d = random_instance(class_kind(spec, other)?, ext, &mut rng);
            let clear = targets.iter().chain(&distractors).all(|t| {
                let dist = ((t.cx - d.cx).powi(2) + (t.cy - d.cy).powi(2)).sqrt();
                dist > t.radius + d.radius
            });
            if clear {
                distractors.push(d);
            }
        }
    }

    // Textured background: a tinted base, a low-frequency wave and pixel noise.
    let base = hsv_to_rgb(
        rng.gen(),
        rng.gen_range(0.0..0.25),
        rng.gen_range(0.25..0.55),
    );
    let (fx, fy, phase_off) = (
        rng.gen_range(0.05..0.3),
        rng.gen_range(0.05..0.3),
        rng.gen_range(0.0..2.0 * PI),
    );
    let mut pixels = vec![[0.0f64; 3]; extent * extent];
    for y in 0..extent {
        for x in 0..extent {
            let wave = 0.06 * ((x as f64 * fx + y as f64 * fy) + phase_off).sin();
            for c in 0..3 {
                pixels[y * extent + x][c] = base[c] + wave + rng.gen_range(-0.08..0.08);
            }
        }
    }
    for inst in distractors.iter().chain(&targets) {
        for (i, covered) in inst.rasterize(extent, extent).into_iter().enumerate() {
            if covered {
                for c in 0..3 {
                    pixels[i][c] = inst.color[c] + rng.gen_range(-0.03..0.03);
                }
            }
        }
    }
    let rgb = pixels
        .iter()
        .flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    let mask = mask.into_iter().map(|b| if b { 255 } else { 0 }).collect();
    let name = &spec.classes[class];
    Ok(RenderedImage {
        record: ImageRecord {
            phase,
            class: name.clone(),
            id,
            image: format!("{}/{name}/img_{id:04}.png", phase.dir()),
            mask: format!("{}/{name}/mask_{id:04}.png", phase.dir()),
            targets,
            distractors,
        },
        rgb,
        mask,
    })
}

/// Every image of the benchmark, in manifest order.
pub fn render_all(spec: &DatasetSpec, seed: u64) -> Result<Vec<RenderedImage>> {
    spec.validate()?;
    let mut out = Vec::new();
    for phase in Phase::ALL {
        for class in 0..spec.classes.len() {
            for id in 0..spec.count(phase) {
                out.push(render_image(spec, seed, phase, class, id)?);
            }
        }
    }
    Ok(out)
}

fn manifest_for(spec: &DatasetSpec, seed: u64, images: &[RenderedImage]) -> Manifest {
    let mut counts: BTreeMap<Phase, BTreeMap<String, usize>> = BTreeMap::new();
    for r in images {
        *counts
            .entry(r.record.phase)
            .or_default()
            .entry(r.record.class.clone())
            .or_default() += 1;
    }
    Manifest {
        spec: spec.clone(),
        seed,
        counts,
        images: images.iter().map(|r| r.record.clone()).collect(),
    }
}

/// Builds the benchmark in memory without touching the filesystem.
pub fn generate_in_memory(spec: &DatasetSpec, seed: u64) -> Result<(Manifest, Dataset)> {
    let images = render_all(spec, seed)?;
    let manifest = manifest_for(spec, seed, &images);
    let e = spec.extent;
    let mut samples: BTreeMap<(Phase, usize), Vec<Sample>> = BTreeMap::new();
    for r in &images {
        let class = spec.class_index(&r.record.class)?;
        let list = samples.entry((r.record.phase, class)).or_default();
        let key = SampleKey {
            phase: r.record.phase,
            class,
            index: list.len(),
        };
        list.push(Sample::from_pixels(
            key,
            r.record.id.to_string(),
            e,
            e,
            &r.rgb,
            &r.mask,
        )?);
    }
    Ok((manifest, Dataset::from_parts(spec.clone(), samples)?))
}

/// Writes the benchmark tree and `manifest.json` under `out_dir`.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64, out_dir: &Path) -> Result<Manifest> {
    let images = render_all(spec, seed)?;
    let manifest = manifest_for(spec, seed, &images);
    let e = spec.extent as u32;
    for r in &images {
        let img_path = out_dir.join(&r.record.image);
        let dir = img_path.parent().expect("image path has a parent");
        std::fs::create_dir_all(dir).map_err(|e| HseError::io(dir, e))?;
        image::save_buffer(&img_path, &r.rgb, e, e, image::ExtendedColorType::Rgb8).map_err(
            |source| HseError::Image {
                path: img_path.clone(),
                source,
            },
        )?;
        let mask_path = out_dir.join(&r.record.mask);
        image::save_buffer(&mask_path, &r.mask, e, e, image::ExtendedColorType::L8).map_err(
            |source| HseError::Image {
                path: mask_path.clone(),
                source,
            },
        )?;
    }
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| HseError::io(&path, e))?;
    Ok(manifest)
}

/// Re-rasterises the recorded target shapes of a manifest entry.
pub fn mask_from_record(record: &ImageRecord, extent: usize) -> Vec<bool> {
    rasterize_union(&record.targets, extent, extent)
}
