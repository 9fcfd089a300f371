//! Wall-time scaling of the encoder stack with sequence length.

use std::time::Instant;

use speech_mamba_core::model::{ModelConfig, SpeechMambaModel};
use speech_mamba_core::nn::{Ctx, Init, Module};
use speech_mamba_core::ssm::ScanMode;

use crate::error::Result;

/// Encoder geometry shared by the Mamba and Transformer variants.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchGeometry {
    pub d_model: usize,
    pub num_heads: usize,
    pub blocks: usize,
    pub ssm_state: usize,
    pub expand: usize,
    pub ffn_dim: usize,
    pub scan_mode: ScanMode,
}

impl Default for BenchGeometry {
    fn default() -> Self {
        BenchGeometry {
            d_model: 8,
            num_heads: 1,
            blocks: 1,
            ssm_state: 2048,
            expand: 2,
            ffn_dim: 32,
            scan_mode: ScanMode::Sequential,
        }
    }
}

impl BenchGeometry {
    /// Mamba and Transformer encoders of this geometry.
    pub fn configs(&self) -> (ModelConfig, ModelConfig) {
        let mamba = ModelConfig {
            d_model: self.d_model,
            num_heads: self.num_heads,
            encoder_blocks: self.blocks,
            decoder_blocks: 1,
            ssm_state: self.ssm_state,
            expand: self.expand,
            dropout_p: 0.0,
            feature_dim: 8,
            frontend_channels: (2, 2),
            transformer_encoder_blocks: self.blocks,
            transformer_decoder_blocks: 1,
            ffn_dim: self.ffn_dim,
            use_s2s: false,
            scan_mode: self.scan_mode,
            ..ModelConfig::base(5)
        };
        let transformer = ModelConfig {
            mamba_encoder: false,
            ..mamba.clone()
        };
        (mamba, transformer)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    pub geometry: BenchGeometry,
    pub short_frames: usize,
    pub long_frames: usize,
    pub runs: usize,
    /// Median seconds at the short and long lengths.
    pub mamba_s: (f64, f64),
    pub transformer_s: (f64, f64),
}

impl ScalingReport {
    pub fn mamba_ratio(&self) -> f64 {
        self.mamba_s.1 / self.mamba_s.0
    }

    pub fn transformer_ratio(&self) -> f64 {
        self.transformer_s.1 / self.transformer_s.0
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median seconds of `runs` inference passes of the encoder blocks over a
/// `[1, frames, d]` input, after one untimed warm-up pass.
pub fn time_encoder(model: &SpeechMambaModel, frames: usize, runs: usize, seed: u64) -> Result<f64> {
    model.set_trainable(false);
    let x = Init::new(seed).uniform(&[1, frames, model.cfg.d_model], 1.0);
    let ctx = Ctx::new(0);
    model.encode_blocks(&x, &[frames], &ctx)?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        let y = model.encode_blocks(&x, &[frames], &ctx)?;
        times.push(t0.elapsed().as_secs_f64());
        std::hint::black_box(y);
    }
    Ok(median(times))
}

/// Times both encoders at `short` and `long` frames.
pub fn scaling(geometry: &BenchGeometry, short: usize, long: usize, runs: usize) -> Result<ScalingReport> {
    let (mc, tc) = geometry.configs();
    let mamba = SpeechMambaModel::new(mc, 0)?;
    let transformer = SpeechMambaModel::new(tc, 0)?;
    let mamba_s = (time_encoder(&mamba, short, runs, 1)?, time_encoder(&mamba, long, runs, 2)?);
    let transformer_s = (
        time_encoder(&transformer, short, runs, 1)?,
        time_encoder(&transformer, long, runs, 2)?,
    );
    Ok(ScalingReport {
        geometry: geometry.clone(),
        short_frames: short,
        long_frames: long,
        runs,
        mamba_s,
        transformer_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn small_run_reports_positive_times() {
        let g = BenchGeometry {
            ssm_state: 4,
            ..BenchGeometry::default()
        };
        let r = scaling(&g, 16, 32, 3).unwrap();
        assert!(r.mamba_s.0 > 0.0 && r.transformer_s.1 > 0.0);
        assert!(r.mamba_ratio().is_finite());
    }
}
