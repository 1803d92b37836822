use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Listener 3DMM coefficient count.
pub const DIM_3DMM: usize = 58;
/// Listener emotion vector width: valence/arousal, action units, expressions.
pub const DIM_EMO: usize = 25;
pub const EMO_VA: std::ops::Range<usize> = 0..2;
pub const EMO_AU: std::ops::Range<usize> = 2..17;
pub const EMO_FE: std::ops::Range<usize> = 17..25;

/// Frame counts and feature widths for every stream the pipeline touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub n_frames: usize,
    pub ws: usize,
    pub dim_va: usize,
    pub dim_au: usize,
    pub dim_fe: usize,
    pub dim_mfcc: usize,
    pub dim_afr: usize,
    pub d_model: usize,
    pub d_latent: usize,
    pub d_cond: usize,
    pub fps: usize,
}

impl FeatureConfig {
    /// Full-size extractor widths.
    pub fn paper(n_frames: usize) -> Self {
        Self {
            n_frames,
            ws: 50,
            dim_va: 64,
            dim_au: 25088,
            dim_fe: 1408,
            dim_mfcc: 26,
            dim_afr: 1536,
            d_model: 1024,
            d_latent: 128,
            d_cond: 1024,
            fps: 25,
        }
    }

    /// Reduced widths that train on one CPU core in minutes.
    pub fn desk(n_frames: usize) -> Self {
        Self {
            n_frames,
            ws: 50,
            dim_va: 8,
            dim_au: 64,
            dim_fe: 32,
            dim_mfcc: 8,
            dim_afr: 48,
            d_model: 64,
            d_latent: 16,
            d_cond: 64,
            fps: 25,
        }
    }

    pub fn preset(name: &str, n_frames: usize) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper(n_frames)),
            "desk" => Ok(Self::desk(n_frames)),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected paper|desk)"))),
        }
    }

    pub fn n_windows(&self) -> usize {
        self.n_frames / self.ws
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_frames", self.n_frames),
            ("ws", self.ws),
            ("dim_va", self.dim_va),
            ("dim_au", self.dim_au),
            ("dim_fe", self.dim_fe),
            ("dim_mfcc", self.dim_mfcc),
            ("dim_afr", self.dim_afr),
            ("d_model", self.d_model),
            ("d_latent", self.d_latent),
            ("d_cond", self.d_cond),
            ("fps", self.fps),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.n_frames.is_multiple_of(self.ws) {
            return Err(Error::Config(format!(
                "n_frames {} is not a multiple of window size {}",
                self.n_frames, self.ws
            )));
        }
        Ok(())
    }
}
