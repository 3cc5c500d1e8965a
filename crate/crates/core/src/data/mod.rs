//! Synthetic "shapes world" segmentation data and its on-disk formats.

mod dataset;
mod segt;
mod shapes;

pub use dataset::{read_dataset, write_dataset, Dataset, Manifest, SplitCounts};
pub use segt::{decode, encode, read_tensor, write_tensor, SegtData, SegtTensor};
pub use shapes::{gen_dataset, gen_sample, palette, SegSample, Shape, ShapeGeometry, ShapesConfig};
