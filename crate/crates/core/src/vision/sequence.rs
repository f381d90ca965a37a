use super::batch::{ColumnRanges, ImageBatch};
use super::cnn::Cnn;
use crate::error::{dim_err, Result};
use crate::session::Session;
use crate::tensor::{ParamStore, Scalar, Tensor, Var};

/// Column feature vectors `[B×Ts×D]` plus a `[B×Ts]` validity mask.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub vectors: Var,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub steps: usize,
    pub dim: usize,
}

impl FeatureSequence {
    pub fn valid(&self, b: usize, t: usize) -> bool {
        self.mask[b * self.steps + t]
    }
}

/// Splits height-1 feature maps into their columns: vector `i` of item `b`
/// is `fmaps[b, :, 0, i]`.
pub fn map_to_sequence<T: Scalar>(s: &mut Session<'_, T>, fmaps: Var, ranges: &ColumnRanges) -> Result<FeatureSequence> {
    let vectors = s.graph.map_to_sequence(fmaps)?;
    let (batch, steps, dim) = match s.graph.shape(vectors) {
        [b, t, d] => (*b, *t, *d),
        _ => unreachable!("map_to_sequence yields rank 3"),
    };
    if ranges.batch() != batch || ranges.width() != steps {
        return Err(dim_err!("frame ranges ({}x{}) do not match feature maps ({batch}x{steps})", ranges.batch(), ranges.width()));
    }
    Ok(FeatureSequence { vectors, mask: ranges.mask(), batch, steps, dim })
}

/// Runs the CNN on a padded batch and returns its feature sequence.
pub fn extract<T: Scalar>(s: &mut Session<'_, T>, cnn: &Cnn, batch: &ImageBatch) -> Result<FeatureSequence> {
    let x = s.graph.constant(batch.pixels.cast::<T>());
    let (fmaps, ranges) = cnn.forward(s, x, &batch.column_ranges())?;
    let seq = map_to_sequence(s, fmaps, &ranges)?;
    debug_assert_eq!(seq.mask, batch.frame_mask);
    Ok(seq)
}

/// Inference-mode features as plain values: `([B×Ts×D], mask)`.
pub fn features<T: Scalar>(cnn: &Cnn, params: &ParamStore<T>, batch: &ImageBatch) -> Result<(Tensor<T>, Vec<bool>)> {
    let mut s = Session::inference(params);
    let seq = extract(&mut s, cnn, batch)?;
    Ok((s.graph.value(seq.vectors).clone(), seq.mask))
}
