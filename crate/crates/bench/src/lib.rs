//! Shared fixtures for the benchmarks.

use relab_core::synthdata::generate_synthfaces;
use relab_core::{Geometry, ImageBatch};

/// Default image geometry of the lab.
pub const GEOMETRY: Geometry = Geometry { width: 32, height: 32, channels: 3 };

/// Private split of a small synthetic dataset at the default geometry.
pub fn private_batch(identities: usize, samples_per_identity: usize) -> ImageBatch {
    generate_synthfaces(identities, samples_per_identity, GEOMETRY, 1)
        .expect("valid fixture sizes")
        .private
        .batch
}
