//! Flat JSON run configuration.

use std::path::{Path, PathBuf};

use reactdiff::diffusion::{DiffusionArch, Stage2Config};
use reactdiff::features::dataset::config_digest;
use reactdiff::features::FeatureConfig;
use reactdiff::metrics::EvalConfig;
use reactdiff::mmt::TrainConfig;
use reactdiff::numerics::AdamWConfig;
use reactdiff::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Every key is optional; missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `desk` or `paper`.
    pub preset: String,
    pub n_frames: usize,
    pub ws: Option<usize>,
    pub dim_va: Option<usize>,
    pub dim_au: Option<usize>,
    pub dim_fe: Option<usize>,
    pub dim_mfcc: Option<usize>,
    pub dim_afr: Option<usize>,
    pub d_model: Option<usize>,
    pub d_latent: Option<usize>,
    pub d_cond: Option<usize>,

    pub seed: u64,
    pub train_clips: usize,
    pub val_clips: usize,
    pub test_clips: usize,

    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// First cosine cycle in epochs; defaults to the stage's epoch count.
    pub restart_period: Option<f64>,
    pub restart_mult: f64,
    pub inversion_steps: usize,
    pub inversion_lr: f64,
    pub probe_clips: usize,
    pub diffusion_steps: usize,

    pub alpha: usize,
    pub threshold: f64,
    pub l_max: usize,

    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub generated_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        let ev = EvalConfig::default();
        let s2 = Stage2Config::default();
        Self {
            preset: "desk".into(),
            n_frames: 100,
            ws: None,
            dim_va: None,
            dim_au: None,
            dim_fe: None,
            dim_mfcc: None,
            dim_afr: None,
            d_model: None,
            d_latent: None,
            d_cond: None,
            seed: 0,
            train_clips: 32,
            val_clips: 8,
            test_clips: 8,
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            batch_size: 16,
            epochs_stage1: 100,
            epochs_stage2: 100,
            restart_period: None,
            restart_mult: 2.0,
            inversion_steps: s2.inversion_steps,
            inversion_lr: s2.inversion_lr,
            probe_clips: s2.probe_clips,
            diffusion_steps: DiffusionArch::default().steps,
            alpha: 10,
            threshold: ev.threshold,
            l_max: ev.l_max,
            data_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            generated_dir: "generated".into(),
            report_dir: "reports".into(),
        }
    }
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn features(&self) -> Result<FeatureConfig> {
        let mut f = FeatureConfig::preset(&self.preset, self.n_frames)?;
        let overrides = [
            (&mut f.ws, self.ws),
            (&mut f.dim_va, self.dim_va),
            (&mut f.dim_au, self.dim_au),
            (&mut f.dim_fe, self.dim_fe),
            (&mut f.dim_mfcc, self.dim_mfcc),
            (&mut f.dim_afr, self.dim_afr),
            (&mut f.d_model, self.d_model),
            (&mut f.d_latent, self.d_latent),
            (&mut f.d_cond, self.d_cond),
        ];
        for (slot, value) in overrides {
            if let Some(v) = value {
                *slot = v;
            }
        }
        f.validate()?;
        Ok(f)
    }

    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            optimizer: AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() },
            restart_period: self.restart_period.unwrap_or(epochs as f64),
            restart_mult: self.restart_mult,
            seed: self.seed,
        }
    }

    pub fn stage2_config(&self, epochs: usize) -> Stage2Config {
        Stage2Config {
            train: self.train_config(epochs),
            inversion_steps: self.inversion_steps,
            inversion_lr: self.inversion_lr,
            probe_clips: self.probe_clips,
        }
    }

    pub fn diffusion_arch(&self) -> DiffusionArch {
        DiffusionArch { steps: self.diffusion_steps, ..DiffusionArch::default() }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig { threshold: self.threshold, l_max: self.l_max }
    }

    /// Digest of every setting except the output locations.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        for p in [&mut c.data_dir, &mut c.checkpoint_dir, &mut c.generated_dir, &mut c.report_dir] {
            *p = PathBuf::new();
        }
        config_digest(&c)
    }

    /// The provenance block written into every artifact.
    pub fn provenance(&self) -> Value {
        json!({
            "config_digest": self.digest(),
            "seed": self.seed,
            "code_version": reactdiff::CODE_VERSION,
        })
    }
}
