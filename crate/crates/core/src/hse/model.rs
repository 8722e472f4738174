//! End-to-end episode forward pass: prototypes and prior, interaction,
//! modulation, decoding and loss.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::decoder::{decode_on_tape, mask_to_bools, predicted_mask, DecoderParams, LOSS_CLAMP};
use super::gcm::{gcm_coefficient_on_tape, gcm_modulate_on_tape, ModulatorParams};
use super::prototype::{
    downsample_mask, kshot_merge, masked_avg_pool_on_tape, prior_mask, PriorMask,
};
use super::sdi::{sdi_on_tape, InteractorParams};
use super::variant::{GcmKind, SdiKind, SdiTokens, VariantConfig};
use crate::backbone::{build_backbone, Backbone, BackboneConfig, FeaturePair, BACKBONE_PREFIX};
use crate::episodes::{Episode, Sample, SampleKey};
use crate::error::{dim_err, HseError, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::params::{Binder, ParamId, ParamStore};
use crate::seeding::rng_for;
use crate::semantics::{EmbeddingTable, Projector, ProjectorKind};

/// Init scale of the channel projector's last layer, keeping the residual
/// embedding term small at the start of training.
pub const CHANNEL_PROJECTOR_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Embedding dimension fed to the projectors.
    pub embed_dim: usize,
    pub projector: ProjectorKind,
    pub variant: VariantConfig,
    pub heads: usize,
    pub sdi_tokens: SdiTokens,
    pub decoder_depth: usize,
    pub train_backbone: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            embed_dim: 16,
            projector: ProjectorKind::Linear,
            variant: VariantConfig::FULL,
            heads: 1,
            sdi_tokens: SdiTokens::Width,
            decoder_depth: 2,
            train_backbone: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.embed_dim == 0 {
            return Err(HseError::Config(
                "embedding dimension must be positive".into(),
            ));
        }
        if self.decoder_depth == 0 {
            return Err(HseError::Config("decoder depth must be at least 1".into()));
        }
        let c = self.backbone.mid_channels;
        if self.heads == 0 || c % self.heads != 0 {
            return Err(HseError::Config(format!(
                "{} attention heads do not divide {c} channels",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Which parameters belong to which component.
#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub backbone: Backbone,
    pub spatial_projector: Projector,
    pub channel_projector: Projector,
    pub interactor: InteractorParams,
    pub modulator: ModulatorParams,
    pub decoder: DecoderParams,
}

/// Parameters plus layout. `T` is the working precision.
#[derive(Clone, Debug)]
pub struct HseModel<T: Real = f32> {
    config: ModelConfig,
    layout: ModelLayout,
    store: ParamStore<T>,
}

/// Per-image backbone features, shared across episodes of one run.
/// Only valid while the backbone is frozen.
pub struct FeatureBank<T: Real = f32> {
    entries: Mutex<HashMap<SampleKey, Arc<FeaturePair<T>>>>,
}

impl<T: Real> Default for FeatureBank<T> {
    fn default() -> Self {
        FeatureBank {
            entries: Mutex::new(HashMap::new()),
        }
    }
}

impl<T: Real> FeatureBank<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("feature bank poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get_or_insert(
        &self,
        key: SampleKey,
        make: impl FnOnce() -> Result<FeaturePair<T>>,
    ) -> Result<Arc<FeaturePair<T>>> {
        if let Some(f) = self
            .entries
            .lock()
            .expect("feature bank poisoned")
            .get(&key)
        {
            return Ok(f.clone());
        }
        let f = Arc::new(make()?);
        self.entries
            .lock()
            .expect("feature bank poisoned")
            .entry(key)
            .or_insert_with(|| f.clone());
        Ok(f)
    }
}

/// Value-level outputs of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeOutput<T: Real = f32> {
    /// `2×H₀×W₀` background/foreground logits.
    pub logits: Tensor<T>,
    pub loss: f64,
    pub prior: PriorMask<T>,
    pub warnings: Vec<String>,
}

impl<T: Real> EpisodeOutput<T> {
    pub fn prediction(&self) -> Vec<bool> {
        predicted_mask(&self.logits).expect("logits are 2×H×W by construction")
    }
}

struct TapeForward<T: Real> {
    logits: Var,
    loss: Var,
    prior: PriorMask<T>,
    warnings: Vec<String>,
}

impl HseModel<f32> {
    /// Fresh parameters: backbone from `seed`, the rest from a stream keyed on it.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = build_backbone(&config.backbone, seed, &mut store)?;
        let c = config.backbone.mid_channels;
        let mut rng = rng_for("model", &[seed]);
        let spatial_projector = Projector::build(
            config.projector,
            config.embed_dim,
            c,
            1.0,
            "projector.spatial",
            &mut rng,
            &mut store,
        );
        let channel_projector = Projector::build(
            config.projector,
            config.embed_dim,
            c,
            CHANNEL_PROJECTOR_SCALE,
            "projector.channel",
            &mut rng,
            &mut store,
        );
        let interactor = InteractorParams::build(c, config.heads, &mut rng, &mut store)?;
        let modulator = ModulatorParams::build(c, &mut rng, &mut store);
        let decoder = DecoderParams::build(c, config.decoder_depth, &mut rng, &mut store)?;
        if config.train_backbone {
            store.set_frozen(BACKBONE_PREFIX, false);
        }
        Ok(HseModel {
            config,
            layout: ModelLayout {
                backbone,
                spatial_projector,
                channel_projector,
                interactor,
                modulator,
                decoder,
            },
            store,
        })
    }

    /// Rebuilds the layout for `config` and fills it from snapshot records.
    pub fn from_snapshot(config: ModelConfig, records: &[(String, Tensor<f32>)]) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.store.load_values(records)?;
        Ok(model)
    }
}

impl<T: Real> HseModel<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn cast<U: Real>(&self) -> HseModel<U> {
        HseModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            store: self.store.cast(),
        }
    }

    pub fn variant(&self) -> VariantConfig {
        self.config.variant
    }

    /// Switches the architecture variant; parameters are kept.
    pub fn set_variant(&mut self, variant: VariantConfig) {
        self.config.variant = variant;
    }

    /// Ids of the trainable (non-frozen) parameters.
    pub fn trainable(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(id, _)| id)
            .collect()
    }

    fn backbone_frozen(&self) -> bool {
        self.layout
            .backbone
            .param_ids()
            .iter()
            .all(|&id| self.store.get(id).frozen)
    }

    /// Backbone features of one sample, through `bank` when given.
    pub fn features(
        &self,
        sample: &Sample,
        bank: Option<&FeatureBank<T>>,
    ) -> Result<Arc<FeaturePair<T>>> {
        let extract = || {
            self.layout
                .backbone
                .extract_features(&self.store, &sample.image.cast())
        };
        match bank {
            Some(bank) if self.backbone_frozen() => bank.get_or_insert(sample.key, extract),
            _ => extract().map(Arc::new),
        }
    }

    fn embedding(&self, table: &EmbeddingTable, class: &str) -> Result<Tensor<T>> {
        let t = table.get(class)?;
        if t.len() != self.config.embed_dim {
            return dim_err(format!(
                "embedding for {class:?} has dimension {}, model expects {}",
                t.len(),
                self.config.embed_dim
            ));
        }
        Ok(t.cast())
    }

    /// Places (mid, high) feature pairs of a sample on the tape.
    fn sample_on_tape(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        sample: &Sample,
        bank: Option<&FeatureBank<T>>,
    ) -> Result<(Var, Var)> {
        if self.backbone_frozen() {
            let f = self.features(sample, bank)?;
            Ok((tape.constant(f.mid.clone()), tape.constant(f.high.clone())))
        } else {
            let image = tape.constant(sample.image.cast());
            self.layout.backbone.extract_on_tape(tape, binder, image)
        }
    }

    fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        episode: &Episode,
        embedding: &Tensor<T>,
        bank: Option<&FeatureBank<T>>,
    ) -> Result<TapeForward<T>> {
        if episode.support.is_empty() {
            return Err(HseError::Argument("episode has no support samples".into()));
        }
        let variant = self.config.variant;
        let layout = &self.layout;
        let (h0, w0) = match episode.query.image.shape() {
            [_, h, w] => (*h, *w),
            s => return dim_err(format!("query image must be 3×H×W, got {s:?}")),
        };
        let (q_mid, q_high) = self.sample_on_tape(tape, binder, &episode.query, bank)?;
        let (h, w) = match tape.shape(q_mid) {
            [_, h, w] => (*h, *w),
            _ => unreachable!("backbone emits C×H×W"),
        };

        let mut warnings = Vec::new();
        let mut shots = Vec::with_capacity(episode.support.len());
        let mut protos = Vec::with_capacity(episode.support.len());
        let mut priors = Vec::with_capacity(episode.support.len());
        let mut all_constant = true;
        for (k, s) in episode.support.iter().enumerate() {
            let (s_mid, s_high) = self.sample_on_tape(tape, binder, s, bank)?;
            let mask: Tensor<T> = s.mask.cast();
            let mask_mid = downsample_mask(&mask, h, w)?;
            let (p, empty) = masked_avg_pool_on_tape(tape, s_mid, &mask_mid)?;
            if empty {
                warnings.push(format!(
                    "support {k} has no foreground at the feature resolution"
                ));
            }
            let prior = prior_mask(tape.value(s_high), tape.value(q_high), &mask, h, w)?;
            all_constant &= prior.constant;
            priors.push(prior.map);
            protos.push(p);
            shots.push((s_mid, mask_mid));
        }
        let prototype = tape.average(&protos)?;
        let prior = PriorMask {
            map: kshot_merge(&priors)?,
            constant: all_constant,
        };

        let t = tape.constant(embedding.clone());
        let general = if variant.sdi == SdiKind::Off {
            prototype
        } else {
            let t_spatial = layout.spatial_projector.apply(tape, binder, t)?;
            let mut pooled = Vec::with_capacity(shots.len());
            for (s_mid, mask_mid) in &shots {
                let out = sdi_on_tape(
                    tape,
                    binder,
                    *s_mid,
                    t_spatial,
                    &layout.interactor,
                    variant.sdi,
                    self.config.sdi_tokens,
                )?;
                pooled.push(masked_avg_pool_on_tape(tape, out.features, mask_mid)?.0);
            }
            tape.average(&pooled)?
        };

        let (p_mod, q_mod) = if variant.gcm == GcmKind::Off {
            (general, q_mid)
        } else {
            let t_channel = layout.channel_projector.apply(tape, binder, t)?;
            let coeff =
                gcm_coefficient_on_tape(tape, binder, prototype, t_channel, &layout.modulator)?;
            gcm_modulate_on_tape(
                tape,
                general,
                q_mid,
                Some(coeff),
                Some(t_channel),
                variant.gcm,
            )?
        };

        let prior_var = tape.constant(prior.map.clone());
        let logits = decode_on_tape(
            tape,
            binder,
            p_mod,
            q_mod,
            prior_var,
            &layout.decoder,
            h0,
            w0,
        )?;
        let target = mask_to_bools(&*episode.query.mask);
        let loss = tape.cross_entropy2(logits, &target, LOSS_CLAMP)?;
        Ok(TapeForward {
            logits,
            loss,
            prior,
            warnings,
        })
    }

    /// Inference pass; the loss is reported against the query mask.
    pub fn forward_episode(
        &self,
        episode: &Episode,
        embeddings: &EmbeddingTable,
        bank: Option<&FeatureBank<T>>,
    ) -> Result<EpisodeOutput<T>> {
        let embedding = self.embedding(embeddings, &episode.class)?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store, false);
        let out = self.forward_on_tape(&mut tape, &mut binder, episode, &embedding, bank)?;
        Ok(EpisodeOutput {
            logits: tape.value(out.logits).clone(),
            loss: tape.value(out.loss).item().to_f64(),
            prior: out.prior,
            warnings: out.warnings,
        })
    }

    /// Loss and per-parameter gradients (`None` for frozen or unused ones).
    pub fn episode_gradients(
        &self,
        episode: &Episode,
        embeddings: &EmbeddingTable,
        bank: Option<&FeatureBank<T>>,
    ) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
        let embedding = self.embedding(embeddings, &episode.class)?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store, true);
        let out = self.forward_on_tape(&mut tape, &mut binder, episode, &embedding, bank)?;
        let loss = tape.value(out.loss).item().to_f64();
        let mut grads = tape.backward(out.loss)?;
        Ok((loss, binder.collect(&mut grads)))
    }

    /// Parameters that receive a gradient for this variant.
    pub fn parameters_on_tape(
        &self,
        episode: &Episode,
        embeddings: &EmbeddingTable,
    ) -> Result<Vec<ParamId>> {
        let embedding = self.embedding(embeddings, &episode.class)?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store, true);
        self.forward_on_tape(&mut tape, &mut binder, episode, &embedding, None)?;
        Ok(binder
            .bound()
            .filter(|&(_, v)| tape.requires_grad(v))
            .map(|(id, _)| id)
            .collect())
    }

    /// Episode loss as a function of the given parameters, recorded on an
    /// external tape. `vars[i]` stands for `ids[i]`.
    pub fn loss_with_params(
        &self,
        tape: &mut Tape<T>,
        ids: &[ParamId],
        vars: &[Var],
        episode: &Episode,
        embeddings: &EmbeddingTable,
        bank: Option<&FeatureBank<T>>,
    ) -> Result<Var> {
        if ids.len() != vars.len() {
            return Err(HseError::Argument(format!(
                "{} parameter ids for {} variables",
                ids.len(),
                vars.len()
            )));
        }
        let embedding = self.embedding(embeddings, &episode.class)?;
        let mut binder = Binder::new(&self.store, false);
        for (&id, &v) in ids.iter().zip(vars) {
            binder.preset(id, v);
        }
        Ok(self
            .forward_on_tape(tape, &mut binder, episode, &embedding, bank)?
            .loss)
    }
}
