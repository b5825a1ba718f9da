//! Representation machinery: feature batching, the spatial and temporal
//! sequence encoders with the momentum twin, the social graph-attention
//! block, projection heads and category text vectors.

mod features;
mod model;
mod sequence;
mod social;
mod text;

pub use features::{FeatureSpace, SeqBatch};
pub use model::{momentum_update, ModelConfig, ModelSnapshot, RepresentationModel, UserContext};
pub use sequence::{ProjectionHead, SpatialEncoder, TemporalEncoder};
pub use social::SocialBlock;
pub use text::{CategoryTextProvider, HashedBagOfWords, PrecomputedText};
