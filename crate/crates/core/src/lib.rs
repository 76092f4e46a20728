//! Random-erasure defenses against model inversion: masking policies,
//! synthetic face data, a small CNN engine, inversion attacks and the
//! metrics used to compare them.

pub mod attacks;
pub mod batch;
pub mod erasing;
pub mod error;
pub mod featspace;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod synthdata;

pub use batch::{Geometry, ImageBatch};
pub use erasing::{EraseRegion, ErasePolicy, FillKind, FillStrategy, MaskSpec, Scheme};
pub use error::{Error, Result};
pub use attacks::{AttackConfig, AttackResult, AttackRun, Strategy};
pub use featspace::{HullPolygon, Projection2D};
pub use metrics::MetricsReport;
pub use nn::{ArchKind, ArchSpec, FeatureSet, TrainConfig, TrainedModel};
pub use synthdata::{DatasetBundle, Role, Split};
