//! Conditional DDIM in the latent reaction space.
//!
//! A speaker's latent windows are summarised by the behaviour-constraint MLP
//! into one group-normalised condition row per window. The noise-prediction
//! network is a token-wise residual MLP with a single self-attention layer
//! over the tokens of a window, conditioned on the timestep and that row.
//! Sampling runs the deterministic DDIM update from Gaussian noise and hands
//! the result to the frozen MMT decoder.

mod net;
pub mod schedule;
pub mod train;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use schedule::{ddim_reverse_window, forward_diffuse, NoiseSchedule};
pub use train::{listener_latent, train_diffusion, Stage2Config, Stage2Outcome};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, SpeakerFeatures};
use crate::mmt::{LatentSequence, Mmt};
use crate::numerics::{derive_seed, derive_seed_str, sinusoidal_table, ParamSet, Rng, Tape, Tensor};
use net::Net;

pub const CHECKPOINT_KIND: &str = "diffusion";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiffusionArch {
    /// Number of diffusion steps `T`.
    pub steps: usize,
    pub blocks: usize,
    /// Hidden width of each residual block as a multiple of `d_latent`.
    pub hidden_mult: usize,
    /// The self-attention layer follows this many residual blocks.
    pub attention_after: usize,
    pub attention_heads: usize,
    /// Groups of the behaviour-constraint group norm.
    pub bc_groups: usize,
}

impl Default for DiffusionArch {
    fn default() -> Self {
        Self { steps: 20, blocks: 4, hidden_mult: 4, attention_after: 2, attention_heads: 4, bc_groups: 8 }
    }
}

impl DiffusionArch {
    pub fn validate(&self, cfg: &FeatureConfig) -> Result<()> {
        if self.steps == 0 || self.blocks == 0 || self.hidden_mult == 0 {
            return Err(Error::Config("steps, blocks and hidden_mult must be at least 1".into()));
        }
        if self.attention_after == 0 || self.attention_after > self.blocks {
            return Err(Error::Config(format!(
                "attention_after={} must lie in 1..={}",
                self.attention_after, self.blocks
            )));
        }
        if self.attention_heads == 0 || !cfg.d_latent.is_multiple_of(self.attention_heads) {
            return Err(Error::Config(format!(
                "attention_heads={} must divide d_latent={}",
                self.attention_heads, cfg.d_latent
            )));
        }
        if self.bc_groups == 0 || !cfg.d_cond.is_multiple_of(self.bc_groups) {
            return Err(Error::Config(format!("bc_groups={} must divide d_cond={}", self.bc_groups, cfg.d_cond)));
        }
        Ok(())
    }
}

/// One generated listener reaction.
#[derive(Debug, Clone, PartialEq)]
pub struct Reaction {
    pub sample: usize,
    pub pred_3dmm: Tensor,
    pub pred_emo: Tensor,
}

/// Behaviour-constraint and denoiser parameters with their schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Diffusion {
    pub features: FeatureConfig,
    pub arch: DiffusionArch,
    pub schedule: NoiseSchedule,
    pub params: ParamSet,
    time_table: Tensor,
}

impl Diffusion {
    pub fn init(features: FeatureConfig, arch: DiffusionArch, seed: u64) -> Result<Self> {
        features.validate()?;
        arch.validate(&features)?;
        let mut rng = Rng::new(derive_seed_str(seed, "diffusion-init"));
        let dl = features.d_latent;
        let dc = features.d_cond;
        let hidden = arch.hidden_mult * dl;
        let mut p = ParamSet::new();
        p.linear("bc.0", features.ws * dl, dc, &mut rng);
        p.linear("bc.1", dc, dc, &mut rng);
        p.linear("time.0", dl, dl, &mut rng);
        p.linear("time.1", dl, dl, &mut rng);
        p.linear("cond", dc, dl, &mut rng);
        for b in 0..arch.blocks {
            p.norm(&format!("blk.{b}.ln"), dl);
            p.linear(&format!("blk.{b}.0"), dl, hidden, &mut rng);
            p.linear(&format!("blk.{b}.1"), hidden, dl, &mut rng);
        }
        p.norm("attn.ln", dl);
        for proj in ["q", "k", "v", "o"] {
            p.linear(&format!("attn.{proj}"), dl, dl, &mut rng);
        }
        p.norm("out.ln", dl);
        p.linear("out", dl, dl, &mut rng);
        Self::from_params(features, arch, p)
    }

    fn from_params(features: FeatureConfig, arch: DiffusionArch, params: ParamSet) -> Result<Self> {
        let schedule = NoiseSchedule::linear(arch.steps)?;
        let time_table = sinusoidal_table(arch.steps + 1, features.d_latent);
        Ok(Self { features, arch, schedule, params, time_table })
    }

    pub(crate) fn net<'a, 't>(&'a self, tape: &'t Tape, trainable: bool) -> Net<'a, 't> {
        Net { arch: &self.arch, p: self.params.bind(tape, trainable), time_table: &self.time_table }
    }

    /// Condition rows `[n_windows, d_cond]` from a speaker latent.
    pub fn behaviour_constraint(&self, x0: &LatentSequence) -> Result<Tensor> {
        let tape = Tape::new();
        let net = self.net(&tape, false);
        Ok(net.behaviour_constraint(tape.constant(flatten_windows(x0)?))?.value())
    }

    /// Noise estimate for one window `[ws, d_latent]` at step `t`.
    pub fn predict_eps(&self, x_t: &Tensor, t: usize, z_row: &Tensor) -> Result<Tensor> {
        if t == 0 || t > self.arch.steps {
            return Err(Error::Config(format!("timestep {t} outside 1..={}", self.arch.steps)));
        }
        let tape = Tape::new();
        let net = self.net(&tape, false);
        let z = tape.constant(z_row.reshape(&[1, z_row.numel()])?);
        Ok(net.predict_eps(tape.constant(x_t.clone()), t, z)?.value())
    }

    /// Deterministic reverse process for every window of `x_T`
    /// `[n_windows, ws, d_latent]` under condition rows `z_bc`.
    pub fn ddim_reverse(&self, x_t: &Tensor, z_bc: &Tensor) -> Result<Tensor> {
        let s = x_t.shape();
        if s.len() != 3 || z_bc.rank() != 2 || z_bc.shape()[0] != s[0] {
            return Err(Error::Config(format!(
                "x_T {:?} and z_bc {:?} disagree on windows",
                s,
                z_bc.shape()
            )));
        }
        let (nw, ws, d) = (s[0], s[1], s[2]);
        let frames = x_t.reshape(&[nw * ws, d])?;
        let mut out = Vec::with_capacity(nw);
        for w in 0..nw {
            let z = z_bc.slice_rows(w, 1)?;
            let xw = frames.slice_rows(w * ws, ws)?;
            out.push(ddim_reverse_window(&self.schedule, &xw, |x, t| self.predict_eps(x, t, &z))?);
        }
        let refs: Vec<&Tensor> = out.iter().collect();
        Ok(Tensor::concat_rows(&refs)?.reshape(&[nw, ws, d])?)
    }

    /// `alpha` reactions for one speaker, each from its own seeded noise.
    pub fn sample_reactions(
        &self,
        mmt: &Mmt,
        speaker: &SpeakerFeatures,
        clip_id: &str,
        alpha: usize,
        seed: u64,
    ) -> Result<Vec<Reaction>> {
        if alpha == 0 {
            return Err(Error::Config("alpha must be at least 1".into()));
        }
        let x0 = mmt.encode(speaker, clip_id)?;
        let z_bc = self.behaviour_constraint(&x0)?;
        let clip_seed = derive_seed_str(seed, clip_id);
        (0..alpha)
            .into_par_iter()
            .map(|a| {
                let mut rng = Rng::new(derive_seed(clip_seed, a as u64));
                let shape = x0.x0.shape().to_vec();
                let x_t = Tensor::new(shape, rng.normal_vec(x0.x0.numel()))?;
                let latent = LatentSequence { x0: self.ddim_reverse(&x_t, &z_bc)?, clip_id: clip_id.into() };
                let (pred_3dmm, pred_emo) = mmt.decode(&latent)?;
                Ok(Reaction { sample: a, pred_3dmm, pred_emo })
            })
            .collect()
    }

    pub fn save(&self, path: &Path, mmt_digest: &str) -> Result<()> {
        self.save_with(path, mmt_digest, &serde_json::Value::Null)
    }

    /// Saves with the keys of `extra` added to the checkpoint header.
    pub fn save_with(&self, path: &Path, mmt_digest: &str, extra: &serde_json::Value) -> Result<()> {
        let mut meta = json!({
            "features": self.features,
            "arch": self.arch,
            "mmt_digest": mmt_digest,
            "config_digest": crate::features::dataset::config_digest(&(self.features, self.arch)),
        });
        checkpoint::merge_meta(&mut meta, extra);
        checkpoint::save(path, CHECKPOINT_KIND, meta, &self.params)
    }

    /// Loads a checkpoint for `features`; also returns the digest of the MMT
    /// parameters it was trained against.
    pub fn load(path: &Path, features: &FeatureConfig) -> Result<(Self, String)> {
        let (meta, params) = checkpoint::load(path, CHECKPOINT_KIND)?;
        checkpoint::ensure_compatible(&meta, "features", features)?;
        let arch: DiffusionArch = serde_json::from_value(meta["arch"].clone())
            .map_err(|e| Error::Compatibility { field: "arch".into(), detail: e.to_string() })?;
        let expected = Self::init(*features, arch, 0)?;
        for (name, t) in expected.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                other => {
                    return Err(Error::Compatibility {
                        field: name.to_string(),
                        detail: format!("shape {:?}, expected {:?}", other.map(|p| p.shape().to_vec()), t.shape()),
                    })
                }
            }
        }
        let mmt_digest = meta["mmt_digest"].as_str().unwrap_or_default().to_string();
        Ok((Self::from_params(*features, arch, params)?, mmt_digest))
    }
}

/// `[n_windows, ws * d_latent]` view of a latent sequence.
pub fn flatten_windows(x0: &LatentSequence) -> Result<Tensor> {
    Ok(x0.x0.reshape(&[x0.n_windows(), x0.ws() * x0.d_latent()])?)
}

/// Mean absolute error between a noise estimate and the true noise.
pub fn eps_l1(eps_hat: &Tensor, eps: &Tensor) -> Result<f64> {
    let d = eps_hat.sub(eps)?;
    Ok(d.data().iter().map(|v| v.abs()).sum::<f64>() / d.numel() as f64)
}

/// Gradient check of the noise-prediction loss, through the behaviour
/// constraint, at tiny widths.
pub fn loss_gradcheck(seed: u64) -> Result<crate::numerics::gradcheck::GradReport> {
    let cfg = crate::mmt::tiny_config();
    let arch = tiny_arch();
    let model = Diffusion::init(cfg, arch, seed)?;
    let mut rng = Rng::new(derive_seed_str(seed, "gradcheck"));
    let nw = cfg.n_windows();
    let speaker = Tensor::new(vec![nw, cfg.ws * cfg.d_latent], rng.normal_vec(nw * cfg.ws * cfg.d_latent))?;
    let x0 = Tensor::new(vec![cfg.ws, cfg.d_latent], rng.normal_vec(cfg.ws * cfg.d_latent))?;
    let eps = Tensor::new(vec![cfg.ws, cfg.d_latent], rng.normal_vec(cfg.ws * cfg.d_latent))?;
    let t = 3;
    let x_t = forward_diffuse(&model.schedule, &x0, t, &eps)?;
    let params = model.params.clone();
    let report = crate::numerics::gradcheck::check_gradients(
        model.params.tensors(),
        |tape, vars| {
            let net = Net { arch: &arch, p: params.bind_vars(vars)?, time_table: &model.time_table };
            let z = net.behaviour_constraint(tape.constant(speaker.clone()))?;
            let pred = net.predict_eps(tape.constant(x_t.clone()), t, z.slice_rows(1, 1)?)?;
            pred.l1(tape.constant(eps.clone()))
        },
        1e-5,
    )?;
    Ok(report)
}

pub fn tiny_arch() -> DiffusionArch {
    DiffusionArch { steps: 5, blocks: 2, hidden_mult: 2, attention_after: 1, attention_heads: 2, bc_groups: 2 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::synth_clip;
    use crate::mmt::MmtArch;

    fn desk() -> (Mmt, Diffusion, crate::features::Clip) {
        let cfg = FeatureConfig::desk(100);
        let mmt = Mmt::init(cfg, MmtArch::default(), 1).unwrap();
        let diff = Diffusion::init(cfg, DiffusionArch::default(), 2).unwrap();
        (mmt, diff, synth_clip(&cfg, 3, "c").unwrap())
    }

    #[test]
    fn behaviour_constraint_rows() {
        let (mmt, diff, clip) = desk();
        let x0 = mmt.encode(&clip.speaker, "c").unwrap();
        let z = diff.behaviour_constraint(&x0).unwrap();
        assert_eq!(z.shape(), &[2, 64]);
        let w0 = x0.window(0);
        let dup = Tensor::concat_rows(&[&w0, &w0]).unwrap();
        let twin = LatentSequence::from_frames(&dup, 50, "d").unwrap();
        let z = diff.behaviour_constraint(&twin).unwrap();
        assert_eq!(z.row(0), z.row(1));
        for r in 0..2 {
            let m = z.row(r).iter().sum::<f64>() / 64.0;
            assert!(m.abs() < 1e-10);
        }
    }

    #[test]
    fn paper_condition_width() {
        let cfg = FeatureConfig::paper(100);
        let arch = DiffusionArch { blocks: 1, attention_after: 1, ..DiffusionArch::default() };
        let diff = Diffusion::init(cfg, arch, 0).unwrap();
        let x0 = LatentSequence::from_frames(&Tensor::full(&[100, 128], 0.1), 50, "p").unwrap();
        assert_eq!(diff.behaviour_constraint(&x0).unwrap().shape(), &[2, 1024]);
    }

    #[test]
    fn predict_eps_contract() {
        let (_, diff, _) = desk();
        let mut rng = Rng::new(5);
        let x = Tensor::new(vec![50, 16], rng.normal_vec(800)).unwrap();
        let z = Tensor::new(vec![64], rng.normal_vec(64)).unwrap();
        let a = diff.predict_eps(&x, 4, &z).unwrap();
        assert_eq!(a.shape(), &[50, 16]);
        assert_eq!(a, diff.predict_eps(&x, 4, &z).unwrap());
        assert!(diff.predict_eps(&x, 0, &z).is_err());
        assert!(diff.predict_eps(&x, 21, &z).is_err());
    }

    #[test]
    fn zero_predictor_loss_is_folded_normal_mean() {
        let mut rng = Rng::new(6);
        let eps = Tensor::new(vec![100_000], rng.normal_vec(100_000)).unwrap();
        let l = eps_l1(&Tensor::zeros(&[100_000]), &eps).unwrap();
        assert!((l - (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.01, "{l}");
        assert_eq!(eps_l1(&eps, &eps).unwrap(), 0.0);
    }

    #[test]
    fn sampling_is_seeded() {
        let (mmt, diff, clip) = desk();
        let a = diff.sample_reactions(&mmt, &clip.speaker, "c", 2, 7).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].pred_3dmm.shape(), &[100, 58]);
        assert_eq!(a[0].pred_emo.shape(), &[100, 25]);
        assert_ne!(a[0].pred_emo, a[1].pred_emo);
        assert_eq!(a, diff.sample_reactions(&mmt, &clip.speaker, "c", 2, 7).unwrap());
        assert!(diff.sample_reactions(&mmt, &clip.speaker, "c", 0, 7).is_err());
    }

    #[test]
    fn full_loss_gradient() {
        let report = loss_gradcheck(2).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let cfg = crate::mmt::tiny_config();
        let d = Diffusion::init(cfg, tiny_arch(), 1).unwrap();
        d.save(&path, "abc").unwrap();
        let (back, digest) = Diffusion::load(&path, &cfg).unwrap();
        assert_eq!(digest, "abc");
        assert_eq!(back.params.names(), d.params.names());
        assert!(matches!(
            Diffusion::load(&path, &FeatureConfig { d_cond: 4, ..cfg }),
            Err(Error::Compatibility { .. })
        ));
    }
}
