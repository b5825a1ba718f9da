//! Small neural-network toolkit on top of candle's autodiff: named
//! parameter storage, dense and recurrent layers, Adam, and a tensor
//! archive format for checkpoints.

mod adam;
mod archive;
mod layers;
mod params;

pub use adam::Adam;
pub use archive::{TensorArchive, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use layers::{dropout, l2_normalize, softplus, BiGru, Gru, Linear};
pub use params::ParamStore;

use candle_core::{DType, Device};

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

/// Seeded generator used for initialization, shuffling and dropout masks.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
