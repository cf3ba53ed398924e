pub mod attrop;
pub mod corpus;
pub mod error;
pub mod format;
pub mod genbridge;
pub mod idsampler;
pub mod numkit;
pub mod pca;
pub mod perturb;
pub mod pipeline;
pub mod qa;

pub use error::{BridgeError, Error, ErrorClass, Result};
pub use attrop::{AttrOpConfig, AttrOpTrace, GradMode};
pub use genbridge::{BridgeConfig, BridgeMode, Image};
pub use idsampler::{IdentityPool, SamplerConfig, SamplerStats};
pub use numkit::{FeatureVector, RngState, RowMatrix};
pub use pca::{LatentGaussian, PcaModel};
pub use perturb::{PerturbSpec, PerturbedSet};
pub use pipeline::{DatasetManifest, PipelineConfig};
pub use qa::{QaReport, QaThresholds};
