//! Dataset manifests, sample typing, deterministic splits, and the synthetic
//! phantom dataset used for desk-scale verification.

pub mod manifest;
pub mod phantom;
pub mod sample;
pub mod split;

pub use manifest::{DatasetManifest, ManifestEntry, Split};
pub use phantom::{synthesize_phantom, PhantomSpec, StyleParams};
pub use sample::{BoundingBox, Domain, ImageSample, LabelData, LabelOrigin, LabelPayload, TaskKind};
pub use split::{split_dataset, SplitSummary};
