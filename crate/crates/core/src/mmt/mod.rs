//! Multi-modality transformer.
//!
//! The encoder fuses the three facial streams and the two acoustic streams
//! with per-frame intra-cross attention, aligns the fused visual and
//! acoustic sequences with bidirectional inter-cross attention, and maps
//! every frame to the latent reaction space, which is then cut into windows
//! of `ws` frames. The decoder is a pre-norm transformer over the whole
//! sequence with two heads: unconstrained 3DMM coefficients, and emotions
//! squashed into their label ranges.

pub(crate) mod net;
pub mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use net::{token_attention, W_3DMM, W_EMO};
pub use train::{train_mmt, TrainConfig};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, SpeakerFeatures, DIM_3DMM, DIM_EMO};
use crate::numerics::{derive_seed_str, ParamSet, Rng, Tape, Tensor};
use net::{Net, SpeakerVars};

pub const CHECKPOINT_KIND: &str = "mmt";

/// Attention widths and decoder depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MmtArch {
    pub intra_heads: usize,
    pub inter_heads: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    /// Feed-forward width as a multiple of `d_latent`.
    pub ffn_mult: usize,
}

impl Default for MmtArch {
    fn default() -> Self {
        Self { intra_heads: 4, inter_heads: 4, decoder_layers: 4, decoder_heads: 4, ffn_mult: 4 }
    }
}

impl MmtArch {
    pub fn validate(&self, cfg: &FeatureConfig) -> Result<()> {
        let checks = [
            ("intra_heads", self.intra_heads, cfg.d_model),
            ("inter_heads", self.inter_heads, cfg.d_model),
            ("decoder_heads", self.decoder_heads, cfg.d_latent),
        ];
        for (name, heads, width) in checks {
            if heads == 0 || width % heads != 0 {
                return Err(Error::Config(format!("{name}={heads} must divide width {width}")));
            }
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be at least 1".into()));
        }
        Ok(())
    }
}

/// Encoder output: windowed latents `[N / ws, ws, d_latent]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub x0: Tensor,
    pub clip_id: String,
}

impl LatentSequence {
    /// Wraps per-frame latents `[N, d_latent]` into windows of `ws`.
    pub fn from_frames(frames: &Tensor, ws: usize, clip_id: impl Into<String>) -> Result<Self> {
        let (n, d) = frames.dims2("latent_sequence")?;
        if ws == 0 || n % ws != 0 {
            return Err(Error::Config(format!("{n} frames are not a whole number of {ws}-frame windows")));
        }
        Ok(Self { x0: frames.reshape(&[n / ws, ws, d])?.ensure_finite("latent_sequence")?, clip_id: clip_id.into() })
    }

    pub fn n_windows(&self) -> usize {
        self.x0.shape()[0]
    }

    pub fn ws(&self) -> usize {
        self.x0.shape()[1]
    }

    pub fn d_latent(&self) -> usize {
        self.x0.shape()[2]
    }

    /// Latents flattened back to `[N, d_latent]`.
    pub fn frames(&self) -> Tensor {
        let s = self.x0.shape();
        self.x0.reshape(&[s[0] * s[1], s[2]]).expect("rank-3 latent")
    }

    /// Window `w` as `[ws, d_latent]`.
    pub fn window(&self, w: usize) -> Tensor {
        let (ws, d) = (self.ws(), self.d_latent());
        self.frames().slice_rows(w * ws, ws).expect("window in range").reshape(&[ws, d]).expect("2-d")
    }
}

/// Multi-modality transformer parameters plus the shapes they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Mmt {
    pub features: FeatureConfig,
    pub arch: MmtArch,
    pub params: ParamSet,
}

impl Mmt {
    pub fn init(features: FeatureConfig, arch: MmtArch, seed: u64) -> Result<Self> {
        features.validate()?;
        arch.validate(&features)?;
        let mut rng = Rng::new(derive_seed_str(seed, "mmt-init"));
        let d = features.d_model;
        let dl = features.d_latent;
        let mut p = ParamSet::new();
        p.linear("in.va", features.dim_va, d, &mut rng);
        p.linear("in.au", features.dim_au, d, &mut rng);
        p.linear("in.fe", features.dim_fe, d, &mut rng);
        p.linear("in.mfcc", features.dim_mfcc, d, &mut rng);
        p.linear("in.afr", features.dim_afr, d, &mut rng);
        for block in ["facial", "acoustic", "v2a", "a2v"] {
            for proj in ["q", "k", "v", "o"] {
                p.linear(&format!("{block}.{proj}"), d, d, &mut rng);
            }
            p.norm(&format!("{block}.ln"), d);
        }
        p.linear("latent.0", 2 * d, d, &mut rng);
        p.linear("latent.1", d, dl, &mut rng);
        for l in 0..arch.decoder_layers {
            for proj in ["q", "k", "v", "o"] {
                p.linear(&format!("dec.{l}.{proj}"), dl, dl, &mut rng);
            }
            p.norm(&format!("dec.{l}.ln1"), dl);
            p.linear(&format!("dec.{l}.ff0"), dl, arch.ffn_mult * dl, &mut rng);
            p.linear(&format!("dec.{l}.ff1"), arch.ffn_mult * dl, dl, &mut rng);
            p.norm(&format!("dec.{l}.ln2"), dl);
        }
        p.linear("head3dmm.0", dl, d, &mut rng);
        p.linear("head3dmm.1", d, DIM_3DMM, &mut rng);
        p.linear("heademo.0", dl, d, &mut rng);
        p.linear("heademo.1", d, DIM_EMO, &mut rng);
        Ok(Self { features, arch, params: p })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn net<'a, 't>(&'a self, tape: &'t Tape) -> Net<'a, 't> {
        Net { arch: &self.arch, p: self.params.bind(tape, false) }
    }

    fn check_speaker(&self, s: &SpeakerFeatures) -> Result<()> {
        let c = &self.features;
        let streams = [
            ("va", &s.va, c.dim_va),
            ("au", &s.au, c.dim_au),
            ("fe", &s.fe, c.dim_fe),
            ("mfcc", &s.mfcc, c.dim_mfcc),
            ("afr", &s.afr, c.dim_afr),
        ];
        let n = s.va.shape().first().copied().unwrap_or(0);
        for (name, t, width) in streams {
            if t.rank() != 2 || t.shape()[0] != n || t.shape()[1] != width {
                return Err(crate::numerics::NumericsError::Shape {
                    op: "mmt_input",
                    detail: format!("{name} has shape {:?}, expected [{n}, {width}]", t.shape()),
                }
                .into());
            }
        }
        Ok(())
    }

    /// Facial intra-cross attention, `[N, d_model]`.
    pub fn intra_facial(&self, va: &Tensor, au: &Tensor, fe: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let net = self.net(&tape);
        let out = net.facial(tape.constant(va.clone()), tape.constant(au.clone()), tape.constant(fe.clone()))?;
        Ok(out.value())
    }

    /// Acoustic intra-cross attention, `[N, d_model]`.
    pub fn intra_acoustic(&self, mfcc: &Tensor, afr: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let net = self.net(&tape);
        Ok(net.acoustic(tape.constant(mfcc.clone()), tape.constant(afr.clone()))?.value())
    }

    /// Bidirectional sequence-level cross attention, `[N, 2 * d_model]`.
    pub fn inter_cross(&self, f_v: &Tensor, f_a: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let net = self.net(&tape);
        Ok(net.inter(tape.constant(f_v.clone()), tape.constant(f_a.clone()))?.value())
    }

    pub fn encode(&self, speaker: &SpeakerFeatures, clip_id: &str) -> Result<LatentSequence> {
        self.check_speaker(speaker)?;
        let n = speaker.va.shape()[0];
        if !n.is_multiple_of(self.features.ws) {
            return Err(Error::Config(format!("{n} frames are not a multiple of ws={}", self.features.ws)));
        }
        let tape = Tape::new();
        let net = self.net(&tape);
        let frames = net.encode(&SpeakerVars::constant(&tape, speaker))?.value();
        LatentSequence::from_frames(&frames, self.features.ws, clip_id)
    }

    /// Decodes per-frame latents `[N, d_latent]`.
    pub fn decode_frames(&self, frames: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let net = self.net(&tape);
        let (p3, pe) = net.decode(tape.constant(frames.clone()))?;
        Ok((p3.value(), pe.value()))
    }

    /// Listener `([N, 58], [N, 25])` predictions.
    pub fn decode(&self, x0: &LatentSequence) -> Result<(Tensor, Tensor)> {
        if x0.d_latent() != self.features.d_latent {
            return Err(Error::Config(format!(
                "latent width {} does not match d_latent={}",
                x0.d_latent(),
                self.features.d_latent
            )));
        }
        self.decode_frames(&x0.frames())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with(path, &serde_json::Value::Null)
    }

    /// Saves with the keys of `extra` added to the checkpoint header.
    pub fn save_with(&self, path: &Path, extra: &serde_json::Value) -> Result<()> {
        let mut meta = self.meta();
        checkpoint::merge_meta(&mut meta, extra);
        checkpoint::save(path, CHECKPOINT_KIND, meta, &self.params)
    }

    fn meta(&self) -> serde_json::Value {
        json!({ "features": self.features, "arch": self.arch, "config_digest": crate::features::dataset::config_digest(&(self.features, self.arch)) })
    }

    /// Loads a checkpoint, checking it was built for `features`.
    pub fn load(path: &Path, features: &FeatureConfig) -> Result<Self> {
        let (meta, params) = checkpoint::load(path, CHECKPOINT_KIND)?;
        checkpoint::ensure_compatible(&meta, "features", features)?;
        let arch: MmtArch = serde_json::from_value(meta["arch"].clone())
            .map_err(|e| Error::Compatibility { field: "arch".into(), detail: e.to_string() })?;
        let expected = Self::init(*features, arch, 0)?;
        for (name, t) in expected.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Compatibility {
                        field: name.to_string(),
                        detail: format!("shape {:?}, expected {:?}", p.shape(), t.shape()),
                    })
                }
                None => {
                    return Err(Error::Compatibility { field: name.to_string(), detail: "missing".into() })
                }
            }
        }
        Ok(Self { features: *features, arch, params })
    }
}

/// Reconstruction loss of listener predictions against ground truth.
pub fn loss_mmt(pred_3dmm: &Tensor, pred_emo: &Tensor, gt_3dmm: &Tensor, gt_emo: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let c = |t: &Tensor| tape.constant(t.clone());
    let l = net::loss(c(pred_3dmm), c(pred_emo), c(gt_3dmm), c(gt_emo))?;
    Ok(l.value().data()[0])
}

/// Gradient check of the full reconstruction loss at tiny widths.
pub fn loss_gradcheck(seed: u64) -> Result<crate::numerics::gradcheck::GradReport> {
    let cfg = tiny_config();
    let arch = tiny_arch();
    let model = Mmt::init(cfg, arch, seed)?;
    let clip = crate::features::synth_clip(&cfg, seed, "gradcheck")?;
    let params = model.params.clone();
    let report = crate::numerics::gradcheck::check_gradients(
        model.params.tensors(),
        |tape, vars| {
            let net = Net { arch: &arch, p: params.bind_vars(vars)? };
            let x = net.encode(&SpeakerVars::constant(tape, &clip.speaker))?;
            let (p3, pe) = net.decode(x)?;
            net::loss(p3, pe, tape.constant(clip.listener_3dmm.clone()), tape.constant(clip.listener_emo.clone()))
        },
        1e-5,
    )?;
    Ok(report)
}

/// `N = 4`, `ws = 2`, every width at most 8.
pub fn tiny_config() -> FeatureConfig {
    FeatureConfig {
        n_frames: 4,
        ws: 2,
        dim_va: 3,
        dim_au: 5,
        dim_fe: 4,
        dim_mfcc: 3,
        dim_afr: 6,
        d_model: 8,
        d_latent: 4,
        d_cond: 8,
        fps: 25,
    }
}

pub fn tiny_arch() -> MmtArch {
    MmtArch { intra_heads: 2, inter_heads: 2, decoder_layers: 2, decoder_heads: 2, ffn_mult: 2 }
}
