//! Line images in, feature sequences out: loading and normalization,
//! random distortions, batch padding, the convolutional feature extractor
//! and its cost model.

pub mod augment;
pub mod batch;
pub mod cnn;
pub mod flops;
pub mod image;
pub mod sequence;

pub use augment::{augment, warp, AffineParams, AugmentConfig};
pub use batch::{left_pad, pad_batch, ColumnRanges, ImageBatch};
pub use cnn::{apply_bn_updates, Cnn, CnnConfig, ConvLayerSpec, STANDARD_FILTERS};
pub use flops::{estimate_flops, FlopReport, RnnDims};
pub use image::{
    denormalize, load_and_normalize, normalize_gray, prepare_line_image, read_line_image, rescale_height, write_pgm, LineImage,
    LINE_HEIGHT, MIN_WIDTH,
};
pub use sequence::{extract, features, map_to_sequence, FeatureSequence};
