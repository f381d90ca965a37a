use std::fmt;

use serde::{Deserialize, Serialize};

use super::cnn::CnnConfig;

/// Recurrent dimensions entering the cost estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RnnDims {
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub embed_dim: usize,
}

impl RnnDims {
    pub fn standard() -> Self {
        Self { hidden: 256, encoder_layers: 2, decoder_layers: 2, embed_dim: 256 }
    }

    pub fn none() -> Self {
        Self { hidden: 0, encoder_layers: 0, decoder_layers: 0, embed_dim: 0 }
    }
}

/// Forward-pass floating-point operation counts (a multiply-add counts 2).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub height: usize,
    pub width: usize,
    pub conv_layers: Vec<u128>,
    pub conv: u128,
    pub encoder: u128,
    pub decoder: u128,
    pub total: u128,
    /// Feature frames Ts (also the decoder length assumed).
    pub frames: usize,
    pub feature_dim: usize,
}

fn lstm_step(din: usize, dh: usize) -> u128 {
    2 * 4 * (din as u128 + dh as u128) * dh as u128
}

/// Analytic forward cost of the network on an `h × w` image. Layers that do
/// not fit the input contribute nothing, as does everything after them.
pub fn estimate_flops(cfg: &CnnConfig, rnn: &RnnDims, h: usize, w: usize) -> FlopReport {
    let mut conv_layers = Vec::with_capacity(cfg.layers.len());
    let mut size = Some((h, w));
    let mut cin = cfg.in_channels;
    for l in &cfg.layers {
        let conv = size.and_then(|(h, w)| l.conv_size(h, w));
        let cost = conv.map_or(0, |(ho, wo)| {
            2 * (l.kernel.0 * l.kernel.1) as u128 * cin as u128 * l.filters as u128 * (ho * wo) as u128
        });
        conv_layers.push(cost);
        size = size.and_then(|(h, w)| l.output_size(h, w));
        cin = l.filters;
    }
    let (frames, feature_dim) = size.map_or((0, 0), |(ho, wo)| (wo, ho * cin));
    let dh = rnn.hidden;
    let steps = frames as u128;
    let encoder: u128 = (0..rnn.encoder_layers)
        .map(|i| {
            let din = if i == 0 { feature_dim } else { 2 * dh };
            2 * steps * lstm_step(din, dh)
        })
        .sum();
    let decoder: u128 = (0..rnn.decoder_layers)
        .map(|i| {
            let din = if i == 0 { rnn.embed_dim + 2 * dh } else { dh };
            steps * lstm_step(din, dh)
        })
        .sum();
    let conv = conv_layers.iter().sum();
    FlopReport { height: h, width: w, conv_layers, conv, encoder, decoder, total: conv + encoder + decoder, frames, feature_dim }
}

impl fmt::Display for FlopReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input\t{}x{}", self.height, self.width)?;
        writeln!(f, "frames\t{}", self.frames)?;
        writeln!(f, "feature_dim\t{}", self.feature_dim)?;
        for (i, c) in self.conv_layers.iter().enumerate() {
            writeln!(f, "conv{}\t{}", i + 1, c)?;
        }
        writeln!(f, "conv\t{}", self.conv)?;
        writeln!(f, "encoder\t{}", self.encoder)?;
        writeln!(f, "decoder\t{}", self.decoder)?;
        write!(f, "total\t{}", self.total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vision::cnn::ConvLayerSpec;

    #[test]
    fn zero_layers_zero_flops() {
        let cfg = CnnConfig { layers: vec![], ..CnnConfig::standard() };
        assert_eq!(estimate_flops(&cfg, &RnnDims::none(), 32, 100).total, 0);
    }

    #[test]
    fn single_pointwise_conv() {
        let layer = ConvLayerSpec { filters: 1, kernel: (1, 1), pad: (0, 0), pool: None };
        let cfg = CnnConfig { layers: vec![layer], ..CnnConfig::standard() };
        let r = estimate_flops(&cfg, &RnnDims::none(), 4, 4);
        assert_eq!(r.conv, 32);
        assert_eq!(r.total, 32);
    }

    #[test]
    fn downsampling_ratio() {
        let cfg = CnnConfig::standard();
        let big = estimate_flops(&cfg, &RnnDims::standard(), 128, 1600);
        let small = estimate_flops(&cfg, &RnnDims::standard(), 32, 400);
        let ratio = big.conv as f64 / small.conv as f64;
        assert!((ratio - 16.0).abs() / 16.0 < 0.05, "{ratio}");
        assert!(1.0 - small.total as f64 / big.total as f64 > 0.6);
        assert_eq!(small.frames, 99);
        assert_eq!(small.feature_dim, 128);
    }

    #[test]
    fn invalid_geometry_counts_nothing() {
        let r = estimate_flops(&CnnConfig::standard(), &RnnDims::standard(), 32, 4);
        assert_eq!(r.frames, 0);
        assert_eq!(r.encoder + r.decoder, 0);
    }
}
