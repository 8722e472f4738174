pub mod decoder;
pub mod gcm;
pub mod model;
pub mod prototype;
pub mod sdi;
pub mod variant;

pub use decoder::{bce_loss, decode, predicted_mask, DecoderParams, LOSS_CLAMP};
pub use gcm::{gcm_coefficient, gcm_modulate, ModulatorParams};
pub use model::{EpisodeOutput, FeatureBank, HseModel, ModelConfig, ModelLayout};
pub use prototype::{
    binarize, downsample_mask, kshot_merge, masked_avg_pool, prior_mask, resize_mask, PriorMask,
    Prototype, MASK_THRESHOLD,
};
pub use sdi::{sdi, semantic_token_count, InteractorParams};
pub use variant::{GcmKind, SdiKind, SdiTokens, VariantConfig};

/// The pooled prototype of a support map after interaction; identical to
/// [`masked_avg_pool`] on the enriched features.
pub fn general_prototype<T: crate::numerics::Real>(
    enriched: &crate::numerics::Tensor<T>,
    mask: &crate::numerics::Tensor<T>,
) -> crate::Result<Prototype<T>> {
    masked_avg_pool(enriched, mask)
}
