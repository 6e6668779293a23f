pub mod anchors;
pub mod data;
pub mod design;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod input;
pub mod linalg;
pub mod optimizer;

pub use anchors::{MetricWeight, RegionOfInterest};
pub use data::{AnchorSet, Dataset, Points};
pub use error::{Error, Result};
pub use gp::KernelConfig;
pub use input::{Bounds, InputFamily, InputSignal};
