use super::cnn::CnnConfig;
use super::image::{LineImage, LINE_HEIGHT};
use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;

/// Per-item valid column interval `[start, start + len)` inside a padded
/// batch, tracked through the network's width changes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnRanges {
    width: usize,
    spans: Vec<(usize, usize)>,
}

impl ColumnRanges {
    pub fn new(width: usize, spans: Vec<(usize, usize)>) -> Result<Self> {
        if let Some(&(s, l)) = spans.iter().find(|&&(s, l)| s + l > width) {
            return Err(dim_err!("column span {s}+{l} exceeds width {width}"));
        }
        Ok(Self { width, spans })
    }

    /// Every column of every item valid.
    pub fn full(batch: usize, width: usize) -> Self {
        Self { width, spans: vec![(0, width); batch] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn batch(&self) -> usize {
        self.spans.len()
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    /// Row-major `[B×W]` validity flags.
    pub fn mask(&self) -> Vec<bool> {
        self.spans.iter().flat_map(|&(s, l)| (0..self.width).map(move |x| x >= s && x < s + l)).collect()
    }

    /// Stride-1 convolution of kernel width `kw`, padding `pw`: an item's
    /// output column `j` reads the same inputs as when it is run alone.
    pub(crate) fn after_conv(&self, kw: usize, pw: usize) -> Self {
        let grow = |n: usize| (n + 2 * pw + 1).saturating_sub(kw);
        Self { width: grow(self.width), spans: self.spans.iter().map(|&(s, l)| (s, grow(l))).collect() }
    }

    pub(crate) fn after_pool(&self, kw: usize) -> Result<Self> {
        if let Some(&(s, _)) = self.spans.iter().find(|&&(s, _)| s % kw != 0) {
            return Err(contract_err!("column offset {s} is not aligned to the pooling width {kw}"));
        }
        Ok(Self { width: self.width / kw, spans: self.spans.iter().map(|&(s, l)| (s / kw, l / kw)).collect() })
    }
}

/// Equal-height line images padded to a common width.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    /// `[B×1×32×Wmax]`.
    pub pixels: Tensor<f32>,
    /// True widths before padding.
    pub widths: Vec<usize>,
    /// Left padding of each item.
    pub offsets: Vec<usize>,
    /// `[B×Ts]` validity of the feature frames the network will emit.
    pub frame_mask: Vec<bool>,
    /// Number of feature frames Ts for `Wmax`.
    pub frames: usize,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    pub fn max_width(&self) -> usize {
        self.pixels.shape()[3]
    }

    pub fn column_ranges(&self) -> ColumnRanges {
        ColumnRanges { width: self.max_width(), spans: self.offsets.iter().copied().zip(self.widths.iter().copied()).collect() }
    }

    /// Valid frame count of item `b`.
    pub fn valid_frames(&self, b: usize) -> usize {
        self.frame_mask[b * self.frames..(b + 1) * self.frames].iter().filter(|&&v| v).count()
    }
}

/// Left padding for an image `diff` pixels narrower than the batch: half the
/// difference, rounded down to a multiple of `stride` so the item's pooled
/// columns line up with those of the image run alone.
pub fn left_pad(diff: usize, stride: usize) -> usize {
    let stride = stride.max(1);
    diff / 2 / stride * stride
}

/// Centers every image in a zero-filled canvas of the widest width.
pub fn pad_batch(imgs: &[LineImage], cnn: &CnnConfig) -> Result<ImageBatch> {
    if imgs.is_empty() {
        return Err(contract_err!("pad_batch: empty image list"));
    }
    if let Some(img) = imgs.iter().find(|i| i.height() != LINE_HEIGHT) {
        return Err(contract_err!("pad_batch: image height {} is not {LINE_HEIGHT}", img.height()));
    }
    let wmax = imgs.iter().map(LineImage::width).max().expect("non-empty");
    let (_, frames) = cnn
        .output_size(LINE_HEIGHT, wmax)
        .ok_or_else(|| dim_err!("pad_batch: width {wmax} too narrow for the network"))?;
    let stride = cnn.width_stride();
    let b = imgs.len();
    let mut data = vec![0f32; b * LINE_HEIGHT * wmax];
    let mut offsets = Vec::with_capacity(b);
    let mut frame_mask = Vec::with_capacity(b * frames);
    for (i, img) in imgs.iter().enumerate() {
        let w = img.width();
        let left = left_pad(wmax - w, stride);
        for y in 0..LINE_HEIGHT {
            let dst = (i * LINE_HEIGHT + y) * wmax + left;
            data[dst..dst + w].copy_from_slice(&img.data()[y * w..(y + 1) * w]);
        }
        let (start, len) = match cnn.output_size(LINE_HEIGHT, w) {
            Some((_, n)) => (left / stride, n),
            None => return Err(dim_err!("pad_batch: item {i} of width {w} too narrow for the network")),
        };
        frame_mask.extend((0..frames).map(|f| f >= start && f < start + len));
        offsets.push(left);
    }
    Ok(ImageBatch {
        pixels: Tensor::new(vec![b, 1, LINE_HEIGHT, wmax], data)?,
        widths: imgs.iter().map(LineImage::width).collect(),
        offsets,
        frame_mask,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank(w: usize) -> LineImage {
        LineImage::from_pixels(LINE_HEIGHT, w, vec![0.5; LINE_HEIGHT * w]).unwrap()
    }

    #[test]
    fn uniform_batch_has_no_padding() {
        let b = pad_batch(&[blank(100), blank(100)], &CnnConfig::standard()).unwrap();
        assert_eq!(b.max_width(), 100);
        assert_eq!(b.offsets, [0, 0]);
        assert_eq!(b.frames, 24);
        assert!(b.frame_mask.iter().all(|&v| v));
    }

    #[test]
    fn narrower_item_padding() {
        let b = pad_batch(&[blank(96), blank(100)], &CnnConfig::standard()).unwrap();
        assert_eq!(b.offsets[0], 0);
        let row = &b.pixels.data()[..100];
        assert!(row[..96].iter().all(|&v| v == 0.5));
        assert!(row[96..].iter().all(|&v| v == 0.0));
        assert_eq!(b.valid_frames(0), 96 / 4 - 1);

        let b = pad_batch(&[blank(40), blank(100)], &CnnConfig::standard()).unwrap();
        assert_eq!(b.offsets[0], 28);
        let mask = &b.frame_mask[..b.frames];
        let valid: Vec<usize> = (0..b.frames).filter(|&f| mask[f]).collect();
        assert_eq!(valid, (7..16).collect::<Vec<_>>());
    }

    #[test]
    fn single_image() {
        let b = pad_batch(&[blank(37)], &CnnConfig::standard()).unwrap();
        assert_eq!(b.len(), 1);
        assert!(b.frame_mask.iter().all(|&v| v));
    }

    #[test]
    fn empty_and_bad_height_rejected() {
        assert!(pad_batch(&[], &CnnConfig::standard()).is_err());
        let tall = LineImage::from_pixels(33, 10, vec![0.0; 330]).unwrap();
        assert!(pad_batch(&[tall], &CnnConfig::standard()).is_err());
    }

    #[test]
    fn left_pad_is_aligned() {
        for diff in 0..64 {
            let l = left_pad(diff, 4);
            assert_eq!(l % 4, 0);
            assert!(l <= diff - l);
            assert!(diff - 2 * l < 8);
        }
    }
}
