//! Joint semantic entity recognition and relation extraction for
//! semi-structured forms.

pub mod autodiff;
pub mod corpus;
pub mod encoder;
pub mod heads;
mod layers;
pub mod metrics;
pub mod model;
pub mod syngen;
pub mod trainer;
mod error;

pub use corpus::{BBox, Cell, Dataset, Document, LabelSet, Relation, Split, TagSet, Vocab};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use model::{DocPrediction, Example, JointModel, ModelConfig, PredictedRelation};
pub use trainer::{Checkpoint, Session, TrainConfig};
