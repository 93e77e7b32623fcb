//! Abdominal trauma detection at desk scale.
//!
//! The pipeline runs synthetic CT studies through study-level cropping and
//! 2.5D slice stacking, a 2D CNN + bidirectional GRU slice classifier with
//! auxiliary Dice segmentation heads, slice/patient/fold ensembling and a
//! composite weighted log-loss score.

pub mod ensemble;
pub mod error;
pub mod io;
pub mod metric;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod schema;
pub mod segmenter;
pub mod traumanet;
pub mod volume;
pub mod volumeprep;

pub use error::{Error, Result};
pub use schema::{LabelGroup, LabelSchema};
