//! Hyperspherical uncertainty for place-recognition retrieval.
//!
//! Descriptors are unit vectors modelled as von Mises-Fisher samples around
//! class prototypes. A small head regresses the concentration κ from a
//! feature map; the κ's of a query and its matches fuse into a resultant
//! vector whose inverse length is the uncertainty score, which is then
//! judged by ECE@K.

pub mod anchoring;
pub mod bessel;
pub mod calibration;
pub mod digest;
pub mod error;
pub mod head;
pub mod io;
pub mod latency;
pub mod linalg;
pub mod pipeline;
pub mod retrieval;
pub mod scores;
pub mod synth;
pub mod trainer;
pub mod vmf;

pub use anchoring::{AnchorMode, PrototypeSet};
pub use calibration::{BinningConfig, BinningStrategy, CalibrationReport, ClampMode};
pub use error::{Error, Result};
pub use head::{FeatureMap, FeatureShape, HeadParams, HeadVariant};
pub use retrieval::{DescriptorBank, GroundTruth, RetrievalResult};
pub use scores::Method;
pub use synth::{SceneConfig, Split, SynthDataset};
pub use trainer::{TrainConfig, TrainMode};
pub use vmf::{BesselOrder, UnitDescriptor, VmfParams};
