//! Class-description embeddings and the projectors that map them into the
//! visual channel space.
//!
//! Embedding files are JSON lines, one object per class:
//! `{"name": "ship", "dim": 16, "vector": [...]}`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, HseError, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::params::{Binder, ParamId, ParamStore};
use crate::seeding::{rng_for, uniform_tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbedding {
    pub name: String,
    pub vector: Tensor<f32>,
}

impl ClassEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRecord {
    name: String,
    dim: usize,
    vector: Vec<f64>,
}

pub fn parse_embeddings(text: &str) -> Result<Vec<ClassEmbedding>> {
    let mut out: Vec<ClassEmbedding> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(line)
            .map_err(|e| HseError::Format(format!("embedding line {}: {e}", lineno + 1)))?;
        if rec.dim != rec.vector.len() {
            return Err(HseError::Format(format!(
                "embedding {:?} declares dim {} but has {} values",
                rec.name,
                rec.dim,
                rec.vector.len()
            )));
        }
        if rec.dim == 0 || rec.vector.iter().any(|v| !v.is_finite()) {
            return Err(HseError::Format(format!(
                "embedding {:?} is empty or not finite",
                rec.name
            )));
        }
        if let Some(first) = out.first() {
            if first.dim() != rec.dim {
                return Err(HseError::Format(format!(
                    "mixed embedding dimensions {} and {} ({:?} vs {:?})",
                    first.dim(),
                    rec.dim,
                    first.name,
                    rec.name
                )));
            }
        }
        if out.iter().any(|e| e.name == rec.name) {
            return Err(HseError::Format(format!(
                "duplicate embedding name {:?}",
                rec.name
            )));
        }
        out.push(ClassEmbedding {
            vector: Tensor::from_f64s([rec.dim], &rec.vector)?,
            name: rec.name,
        });
    }
    Ok(out)
}

pub fn load_embeddings(path: &Path) -> Result<Vec<ClassEmbedding>> {
    let text = std::fs::read_to_string(path).map_err(|e| HseError::io(path, e))?;
    parse_embeddings(&text)
}

pub fn save_embeddings(path: &Path, embeddings: &[ClassEmbedding]) -> Result<()> {
    let mut text = String::new();
    for e in embeddings {
        let rec = EmbeddingRecord {
            name: e.name.clone(),
            dim: e.dim(),
            vector: e.vector.to_f64_vec(),
        };
        text.push_str(&serde_json::to_string(&rec)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| HseError::io(path, e))
}

/// Deterministic unit-norm stand-in for a language-model embedding of `name`.
pub fn synth_embedding(name: &str, dim: usize, seed: u64) -> Result<ClassEmbedding> {
    if name.is_empty() {
        return Err(HseError::Argument("class name is empty".into()));
    }
    if dim < 2 {
        return Err(HseError::Argument(format!("embedding dimension {dim} < 2")));
    }
    let mut rng = rng_for(&format!("embedding:{name}"), &[seed, dim as u64]);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    Ok(ClassEmbedding {
        name: name.to_string(),
        vector: Tensor::from_f64s([dim], &v)?,
    })
}

/// Class name → embedding lookup with one shared dimension.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingTable {
    dim: usize,
    entries: Vec<ClassEmbedding>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(entries: Vec<ClassEmbedding>) -> Result<Self> {
        let dim = entries.first().map_or(0, |e| e.dim());
        let mut index = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.dim() != dim {
                return Err(HseError::Format(format!(
                    "mixed embedding dimensions {dim} and {}",
                    e.dim()
                )));
            }
            if index.insert(e.name.clone(), i).is_some() {
                return Err(HseError::Format(format!(
                    "duplicate embedding name {:?}",
                    e.name
                )));
            }
        }
        Ok(EmbeddingTable {
            dim,
            entries,
            index,
        })
    }

    pub fn synthesize<S: AsRef<str>>(names: &[S], dim: usize, seed: u64) -> Result<Self> {
        let entries = names
            .iter()
            .map(|n| synth_embedding(n.as_ref(), dim, seed))
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ClassEmbedding] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].vector)
            .ok_or_else(|| HseError::Lookup(format!("no embedding for class {name:?}")))
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

// ── projectors ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectorKind {
    #[default]
    Linear,
    Mlp2,
    Mlp3,
}

impl ProjectorKind {
    fn depth(self) -> usize {
        match self {
            ProjectorKind::Linear => 1,
            ProjectorKind::Mlp2 => 2,
            ProjectorKind::Mlp3 => 3,
        }
    }
}

impl fmt::Display for ProjectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProjectorKind::Linear => "linear",
            ProjectorKind::Mlp2 => "mlp2",
            ProjectorKind::Mlp3 => "mlp3",
        })
    }
}

impl FromStr for ProjectorKind {
    type Err = HseError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ProjectorKind::Linear),
            "mlp2" => Ok(ProjectorKind::Mlp2),
            "mlp3" => Ok(ProjectorKind::Mlp3),
            _ => Err(HseError::Argument(format!("unknown projector kind {s:?}"))),
        }
    }
}

/// Affine stack `C_t → C (→ C …)` with ReLU between layers.
#[derive(Clone, Debug)]
pub struct Projector {
    kind: ProjectorKind,
    in_dim: usize,
    out_dim: usize,
    layers: Vec<(ParamId, ParamId)>,
}

impl Projector {
    /// Uniform `±1/√fan_in` init; the last layer's bound is multiplied by
    /// `output_scale`.
    pub fn build(
        kind: ProjectorKind,
        in_dim: usize,
        out_dim: usize,
        output_scale: f64,
        prefix: &str,
        rng: &mut impl Rng,
        store: &mut ParamStore<f32>,
    ) -> Self {
        let mut layers = Vec::new();
        let mut d = in_dim;
        for i in 0..kind.depth() {
            let mut bound = 1.0 / (d as f64).sqrt();
            if i + 1 == kind.depth() {
                bound *= output_scale;
            }
            let w = store.add(
                format!("{prefix}.l{i}.weight"),
                uniform_tensor(&[out_dim, d], bound, rng),
                false,
            );
            let b = store.add(
                format!("{prefix}.l{i}.bias"),
                uniform_tensor(&[out_dim], bound, rng),
                false,
            );
            layers.push((w, b));
            d = out_dim;
        }
        Projector {
            kind,
            in_dim,
            out_dim,
            layers,
        }
    }

    pub fn kind(&self) -> ProjectorKind {
        self.kind
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn apply<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        t: Var,
    ) -> Result<Var> {
        if tape.shape(t) != [self.in_dim] {
            return dim_err(format!(
                "projector expects a [{}] embedding, got {:?}",
                self.in_dim,
                tape.shape(t)
            ));
        }
        let mut x = tape.reshape(t, &[self.in_dim, 1])?;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                x = tape.relu(x);
            }
            let wv = binder.var(tape, w);
            let bv = binder.var(tape, b);
            let y = tape.matmul(wv, x)?;
            let bv = tape.reshape(bv, &[self.out_dim, 1])?;
            x = tape.add(y, bv)?;
        }
        tape.reshape(x, &[self.out_dim])
    }

    /// Projects one embedding by value.
    pub fn project<T: Real>(&self, store: &ParamStore<T>, t: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store, false);
        let x = tape.constant(t.clone());
        let y = self.apply(&mut tape, &mut binder, x)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;

    #[test]
    fn synth_is_deterministic_and_unit_norm() {
        let a = synth_embedding("ship", 16, 7).unwrap();
        let b = synth_embedding("ship", 16, 7).unwrap();
        assert_eq!(a, b);
        let n: f64 = a
            .vector
            .data()
            .iter()
            .map(|&x| (x as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert!(synth_embedding("", 16, 7).is_err());
        assert!(synth_embedding("ship", 1, 7).is_err());
    }

    #[test]
    fn parse_rejects_mixed_dims_naming_both() {
        let text = "{\"name\":\"a\",\"dim\":2,\"vector\":[1,0]}\n{\"name\":\"b\",\"dim\":3,\"vector\":[1,0,0]}\n";
        let err = parse_embeddings(text).unwrap_err().to_string();
        assert!(err.contains('2') && err.contains('3'), "{err}");
    }

    #[test]
    fn parse_rejects_duplicates_and_accepts_empty() {
        let text = "{\"name\":\"a\",\"dim\":2,\"vector\":[1,0]}\n{\"name\":\"a\",\"dim\":2,\"vector\":[0,1]}";
        assert!(matches!(parse_embeddings(text), Err(HseError::Format(_))));
        assert!(parse_embeddings("").unwrap().is_empty());
        assert!(parse_embeddings("\n\n").unwrap().is_empty());
    }

    #[test]
    fn table_lookup_error() {
        let t = EmbeddingTable::synthesize(&["a", "b"], 4, 1).unwrap();
        assert_eq!(t.dim(), 4);
        assert!(matches!(t.get("c"), Err(HseError::Lookup(_))));
    }

    #[test]
    fn linear_identity_projection() {
        let mut store = ParamStore::new();
        let mut rng = rng_for("t", &[0]);
        let p = Projector::build(ProjectorKind::Linear, 3, 3, 1.0, "p", &mut rng, &mut store);
        let ids = p.param_ids();
        *store.value_mut(ids[0]) =
            Tensor::from_f64s([3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        *store.value_mut(ids[1]) = Tensor::zeros([3]);
        let t = Tensor::from_f64s([3], &[0.2, -0.5, 0.9]).unwrap();
        assert_eq!(p.project(&store, &t).unwrap(), t);
        assert_eq!(
            p.project(&store, &Tensor::zeros([3])).unwrap(),
            Tensor::zeros([3])
        );
        assert!(p.project(&store, &Tensor::zeros([4])).is_err());
    }

    #[test]
    fn every_kind_outputs_channel_dim() {
        for kind in [
            ProjectorKind::Linear,
            ProjectorKind::Mlp2,
            ProjectorKind::Mlp3,
        ] {
            let mut store = ParamStore::new();
            let mut rng = rng_for("t", &[1]);
            let p = Projector::build(kind, 16, 8, 1.0, "p", &mut rng, &mut store);
            let t = synth_embedding("x", 16, 0).unwrap().vector;
            assert_eq!(p.project(&store, &t).unwrap().shape(), &[8]);
            assert_eq!(p.param_ids().len(), 2 * kind.depth());
        }
    }
}
