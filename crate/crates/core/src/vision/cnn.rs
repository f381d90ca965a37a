use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batch::ColumnRanges;
use crate::error::{HtrError, Result};
use crate::init::glorot_uniform;
use crate::session::{BnUpdate, Session};
use crate::tensor::{cast, ParamId, ParamStore, Scalar, Tensor, Var};

/// One conv → batch-norm → leaky-ReLU block, optionally followed by max pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub filters: usize,
    pub kernel: (usize, usize),
    pub pad: (usize, usize),
    pub pool: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub in_channels: usize,
    pub layers: Vec<ConvLayerSpec>,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

pub const STANDARD_FILTERS: [usize; 7] = [16, 32, 64, 64, 128, 128, 128];

impl CnnConfig {
    /// The seven-layer network: 3×3 convolutions with padding 1, a final 2×2
    /// valid convolution, 2×2 pooling after layers 1–2 and 2×1 after 5–6.
    pub fn standard() -> Self {
        Self::with_filters(&STANDARD_FILTERS)
    }

    /// Same geometry with every filter count halved.
    pub fn halved() -> Self {
        let f = STANDARD_FILTERS.map(|f| f / 2);
        Self::with_filters(&f)
    }

    pub fn with_filters(filters: &[usize; 7]) -> Self {
        let pools = [Some((2, 2)), Some((2, 2)), None, None, Some((2, 1)), Some((2, 1)), None];
        let layers = filters
            .iter()
            .zip(pools)
            .enumerate()
            .map(|(i, (&f, pool))| {
                let (kernel, pad) = if i == 6 { ((2, 2), (0, 0)) } else { ((3, 3), (1, 1)) };
                ConvLayerSpec { filters: f, kernel, pad, pool }
            })
            .collect();
        Self { in_channels: 1, layers, leaky_slope: 0.01, bn_eps: 1e-5, bn_momentum: 0.9 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(HtrError::Config("cnn needs at least one input channel".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.filters == 0 || l.kernel.0 == 0 || l.kernel.1 == 0 {
                return Err(HtrError::Config(format!("cnn layer {}: zero-sized filters or kernel", i + 1)));
            }
            if matches!(l.pool, Some((0, _)) | Some((_, 0))) {
                return Err(HtrError::Config(format!("cnn layer {}: zero-sized pooling window", i + 1)));
            }
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(HtrError::Config("batch-norm momentum must be in [0,1) and eps > 0".into()));
        }
        Ok(())
    }

    /// Channel count of the final feature maps.
    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(self.in_channels, |l| l.filters)
    }

    /// Product of horizontal pooling factors; batch padding offsets are
    /// multiples of this.
    pub fn width_stride(&self) -> usize {
        self.layers.iter().filter_map(|l| l.pool).map(|(_, kw)| kw).product()
    }

    /// Output `(height, width)` for an `h × w` input, or `None` if some layer
    /// does not fit.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let mut hw = (h, w);
        for l in &self.layers {
            hw = l.output_size(hw.0, hw.1)?;
        }
        Some(hw)
    }

    /// Feature-vector dimensionality for input height `h`.
    pub fn feature_dim(&self, h: usize) -> Option<usize> {
        self.output_size(h, self.min_width()).map(|(ho, _)| ho * self.out_channels())
    }

    /// Narrowest input producing at least one output column.
    pub fn min_width(&self) -> usize {
        (1..=4096).find(|&w| matches!(self.output_size(1 << 20, w), Some((_, wo)) if wo >= 1)).unwrap_or(4096)
    }
}

impl ConvLayerSpec {
    /// Spatial size after convolution and pooling.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (ch, cw) = self.conv_size(h, w)?;
        match self.pool {
            None => Some((ch, cw)),
            Some((ph, pw)) => {
                let (oh, ow) = (ch / ph, cw / pw);
                (oh >= 1 && ow >= 1).then_some((oh, ow))
            }
        }
    }

    pub fn conv_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ho = (h + 2 * self.pad.0 + 1).checked_sub(self.kernel.0)?;
        let wo = (w + 2 * self.pad.1 + 1).checked_sub(self.kernel.1)?;
        (ho >= 1 && wo >= 1).then_some((ho, wo))
    }
}

#[derive(Debug, Clone)]
struct LayerParams {
    kernel: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

/// Parameters of the convolutional feature extractor.
#[derive(Debug, Clone)]
pub struct Cnn {
    pub config: CnnConfig,
    layers: Vec<LayerParams>,
}

impl Cnn {
    pub fn new<T: Scalar, R: Rng + ?Sized>(config: CnnConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut cin = config.in_channels;
        for (i, l) in config.layers.iter().enumerate() {
            let (kh, kw) = l.kernel;
            let f = l.filters;
            let kernel = glorot_uniform(rng, &[f, cin, kh, kw], cin * kh * kw, f * kh * kw);
            layers.push(LayerParams {
                kernel: store.add(format!("cnn.{i}.kernel"), kernel, true),
                gamma: store.add(format!("cnn.{i}.bn.gamma"), Tensor::full(&[f], T::one()), true),
                beta: store.add(format!("cnn.{i}.bn.beta"), Tensor::zeros(&[f]), true),
                running_mean: store.add(format!("cnn.{i}.bn.running_mean"), Tensor::zeros(&[f]), false),
                running_var: store.add(format!("cnn.{i}.bn.running_var"), Tensor::full(&[f], T::one()), false),
            });
            cin = f;
        }
        Ok(Self { config, layers })
    }

    /// Runs the network on `x: [B×C×H×W]`. Columns outside each item's valid
    /// range are held at zero after every layer, so an item's features do
    /// not depend on how much padding surrounds it. Returns the final maps
    /// and their valid column ranges.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, ranges: &ColumnRanges) -> Result<(Var, ColumnRanges)> {
        let w_in = s.graph.shape(x).get(3).copied().unwrap_or(0);
        if ranges.width() != w_in {
            return Err(crate::error::dim_err!("cnn: column ranges cover width {}, input has {w_in}", ranges.width()));
        }
        let mut x = x;
        let mut ranges = ranges.clone();
        for (spec, p) in self.config.layers.iter().zip(&self.layers) {
            let (h, w) = match s.graph.shape(x) {
                [_, _, h, w] => (*h, *w),
                sh => return Err(crate::error::dim_err!("cnn input must be rank 4, got {sh:?}")),
            };
            if spec.conv_size(h, w).is_none() {
                return Err(crate::error::dim_err!(
                    "cnn: input {h}x{w} too small for a {:?} kernel with padding {:?}",
                    spec.kernel,
                    spec.pad
                ));
            }
            let k = s.p(p.kernel);
            x = s.graph.conv2d(x, k, spec.pad)?;
            ranges = ranges.after_conv(spec.kernel.1, spec.pad.1);
            let mask = ranges.mask();
            let (gamma, beta) = (s.p(p.gamma), s.p(p.beta));
            x = if s.is_train() {
                let bn = s.graph.batch_norm_train(x, gamma, beta, self.config.bn_eps, Some(&mask))?;
                let n: T = cast(bn.count as f64);
                let unbiased = bn.var.iter().map(|&v| v * n / (n - T::one())).collect();
                s.bn_updates.push(BnUpdate { mean_id: p.running_mean, var_id: p.running_var, batch_mean: bn.mean, batch_var: unbiased });
                bn.out
            } else {
                let mean = s.params.get(p.running_mean).data().to_vec();
                let var = s.params.get(p.running_var).data().to_vec();
                s.graph.batch_norm_infer(x, gamma, beta, &mean, &var, self.config.bn_eps, Some(&mask))?
            };
            x = s.graph.leaky_relu(x, cast(self.config.leaky_slope));
            if let Some((ph, pw)) = spec.pool {
                let (ch, cw) = spec.conv_size(h, w).expect("checked");
                if ch < ph || cw < pw {
                    return Err(crate::error::dim_err!("cnn: {ch}x{cw} maps too small for {ph}x{pw} pooling"));
                }
                x = s.graph.maxpool2d(x, ph, pw)?;
                ranges = ranges.after_pool(pw)?;
                x = s.graph.mask_columns(x, &ranges.mask())?;
            }
        }
        Ok((x, ranges))
    }
}

/// Folds observed batch statistics into the running averages:
/// `running = momentum·running + (1 − momentum)·batch`.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>], momentum: f64) {
    let m: T = cast(momentum);
    for u in updates {
        for (id, batch) in [(u.mean_id, &u.batch_mean), (u.var_id, &u.batch_var)] {
            for (r, &b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = m * *r + (T::one() - m) * b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_matches_table() {
        let c = CnnConfig::standard();
        let f: Vec<usize> = c.layers.iter().map(|l| l.filters).collect();
        assert_eq!(f, STANDARD_FILTERS);
        assert_eq!(c.layers[6].kernel, (2, 2));
        assert_eq!(c.layers[6].pad, (0, 0));
        assert!(c.layers[..6].iter().all(|l| l.kernel == (3, 3) && l.pad == (1, 1)));
        let pools: Vec<_> = c.layers.iter().map(|l| l.pool).collect();
        assert_eq!(pools, [Some((2, 2)), Some((2, 2)), None, None, Some((2, 1)), Some((2, 1)), None]);
        assert_eq!(c.width_stride(), 4);
        assert_eq!(c.feature_dim(32), Some(128));
    }

    #[test]
    fn output_size_closed_form() {
        let c = CnnConfig::standard();
        assert_eq!(c.output_size(32, 100), Some((1, 24)));
        assert_eq!(c.output_size(32, 8), Some((1, 1)));
        assert_eq!(c.output_size(32, 7), None);
        assert_eq!(c.min_width(), 8);
        for w in 8..300 {
            assert_eq!(c.output_size(32, w), Some((1, w / 2 / 2 - 1)));
        }
    }

    #[test]
    fn halved_filters() {
        let c = CnnConfig::halved();
        assert_eq!(c.out_channels(), 64);
        assert_eq!(c.layers[0].filters, 8);
    }
}
