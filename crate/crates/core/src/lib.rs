pub mod array;
pub mod dataset;
pub mod error;
pub mod format;
pub mod geometry;
pub mod scalar;
pub mod storage;
pub mod tql;
pub mod version;
pub mod view;
pub mod loader;

pub use array::DynArray;
pub use dataset::{Dataset, LinkedSample, SampleInput, Snapshot};
pub use error::{Error, Result};
pub use geometry::Bbox;
pub use scalar::{Dtype, Element};
pub use view::DatasetView;

pub type Bbox32 = Bbox<f32>;
pub type Bbox64 = Bbox<f64>;
