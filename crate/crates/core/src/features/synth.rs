//! Synthetic dyadic clips with the shapes of the real extractor outputs.
//!
//! Each clip draws a handful of sinusoidal "behaviour components" for the
//! speaker. Every speaker channel is a fixed linear mix of those components
//! plus white noise, so all modalities are correlated views of one state.
//! The listener responds to a lagged moving average of the speaker state
//! through fixed nonlinear maps, plus a perturbation drawn from a separate
//! per-listener seed: the mapping is learnable but not one-to-one.
//!
//! The mixing matrices ("world") depend only on the feature widths, so every
//! clip generated for a config shares the same speaker-to-listener law.

use std::f64::consts::PI;

use serde_json::json;
use sha2::{Digest, Sha256};

use super::config::{FeatureConfig, DIM_3DMM, DIM_EMO, EMO_AU, EMO_FE, EMO_VA};
use super::container::Container;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed_str, sigmoid, Rng, Tensor};

/// Behaviour components per speaker.
pub const COMPONENTS: usize = 5;
/// Speaker feature noise standard deviation.
pub const NOISE_STD: f64 = 0.05;
/// Listener latent width between the speaker state and the label maps.
const LISTENER_DIM: usize = 8;
/// Delay, in frames, between speaker behaviour and listener response.
pub const LISTENER_LAG: usize = 2;
/// Length of the moving average the listener responds to.
pub const LISTENER_WINDOW: usize = 6;
const PERTURBATION_AMPLITUDE: f64 = 0.3;
const FREQ_RANGE_HZ: (f64, f64) = (0.04, 0.4);
const WORLD_SEED: u64 = 0x5EAC_7D1F_F2024;

/// Speaker visual and acoustic streams, each `[N, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerFeatures {
    pub va: Tensor,
    pub au: Tensor,
    pub fe: Tensor,
    pub mfcc: Tensor,
    pub afr: Tensor,
}

/// One dyadic sample: speaker features and listener ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub id: String,
    pub speaker: SpeakerFeatures,
    /// `[N, 58]`
    pub listener_3dmm: Tensor,
    /// `[N, 25]` laid out as VA(2) | AU(15) | FE(8).
    pub listener_emo: Tensor,
}

const FIELD_NAMES: [&str; 7] = [
    "speaker.va",
    "speaker.au",
    "speaker.fe",
    "speaker.mfcc",
    "speaker.afr",
    "listener.3dmm",
    "listener.emo",
];

impl Clip {
    pub fn n_frames(&self) -> usize {
        self.listener_emo.shape()[0]
    }

    fn tensors(&self) -> [&Tensor; 7] {
        [
            &self.speaker.va,
            &self.speaker.au,
            &self.speaker.fe,
            &self.speaker.mfcc,
            &self.speaker.afr,
            &self.listener_3dmm,
            &self.listener_emo,
        ]
    }

    /// Checks shape agreement and the emotion range invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_frames();
        for (name, t) in FIELD_NAMES.iter().zip(self.tensors()) {
            if t.rank() != 2 || t.shape()[0] != n {
                return Err(Error::Data(format!(
                    "clip {}: {name} has shape {:?}, expected {n} frames",
                    self.id,
                    t.shape()
                )));
            }
        }
        if self.listener_3dmm.shape()[1] != DIM_3DMM || self.listener_emo.shape()[1] != DIM_EMO {
            return Err(Error::Data(format!("clip {}: listener label widths", self.id)));
        }
        check_emotion_ranges(&self.listener_emo)
            .map_err(|m| Error::Data(format!("clip {}: {m}", self.id)))
    }

    /// Emotion labels of the speaker, read off the speaker's own facial
    /// streams with the same squashing the listener labels use: the first two
    /// VA channels through tanh, AU channels thresholded at 0, FE channels
    /// through a sigmoid. Channels wrap when a stream is narrower than the
    /// label block.
    pub fn speaker_emo(&self) -> Tensor {
        let n = self.n_frames();
        let (va, au, fe) = (&self.speaker.va, &self.speaker.au, &self.speaker.fe);
        let (dva, dau, dfe) = (va.shape()[1], au.shape()[1], fe.shape()[1]);
        let mut out = vec![0.0; n * DIM_EMO];
        for t in 0..n {
            let row = &mut out[t * DIM_EMO..(t + 1) * DIM_EMO];
            for (k, c) in EMO_VA.enumerate() {
                row[c] = va.row(t)[k % dva].tanh();
            }
            for (k, c) in EMO_AU.enumerate() {
                row[c] = if au.row(t)[k % dau] > 0.0 { 1.0 } else { 0.0 };
            }
            for (k, c) in EMO_FE.enumerate() {
                row[c] = sigmoid(fe.row(t)[k % dfe]);
            }
        }
        Tensor::from_parts(vec![n, DIM_EMO], out)
    }

    /// SHA-256 over the id and the exact `f64` bits of every field.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.id.as_bytes());
        for (name, t) in FIELD_NAMES.iter().zip(self.tensors()) {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("clip", json!({ "id": self.id }));
        for (name, t) in FIELD_NAMES.iter().zip(self.tensors()) {
            c.push(*name, t.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "clip" {
            return Err(Error::format(0, format!("expected a clip container, found `{}`", c.kind)));
        }
        let id = c.meta["id"]
            .as_str()
            .ok_or_else(|| Error::format(0, "clip header has no `id`"))?
            .to_string();
        let clip = Self {
            id,
            speaker: SpeakerFeatures {
                va: c.require("speaker.va")?,
                au: c.require("speaker.au")?,
                fe: c.require("speaker.fe")?,
                mfcc: c.require("speaker.mfcc")?,
                afr: c.require("speaker.afr")?,
            },
            listener_3dmm: c.require("listener.3dmm")?,
            listener_emo: c.require("listener.emo")?,
        };
        Ok(clip)
    }
}

pub fn write_clip(clip: &Clip, path: &std::path::Path) -> Result<()> {
    clip.to_container().write(path)
}

pub fn read_clip(path: &std::path::Path) -> Result<Clip> {
    Clip::from_container(&Container::read(path)?)
}

/// Checks VA in [-1, 1], AU in {0, 1} and FE in [0, 1].
pub fn check_emotion_ranges(emo: &Tensor) -> std::result::Result<(), String> {
    let n = emo.shape()[0];
    for t in 0..n {
        let row = emo.row(t);
        if let Some(v) = row[EMO_VA].iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(format!("VA value {v} outside [-1, 1] at frame {t}"));
        }
        if let Some(v) = row[EMO_AU].iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(format!("AU value {v} is not binary at frame {t}"));
        }
        if let Some(v) = row[EMO_FE].iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(format!("FE value {v} outside [0, 1] at frame {t}"));
        }
    }
    Ok(())
}

/// Fixed maps shared by every clip of a config.
struct World {
    speaker_mix: [Vec<f64>; 5],
    behaviour_to_listener: Vec<f64>,
    to_3dmm: Vec<f64>,
    to_va: Vec<f64>,
    to_au: Vec<f64>,
    au_bias: Vec<f64>,
    to_fe: Vec<f64>,
}

impl World {
    fn new(cfg: &FeatureConfig) -> Self {
        let label = format!(
            "world/{}/{}/{}/{}/{}",
            cfg.dim_va, cfg.dim_au, cfg.dim_fe, cfg.dim_mfcc, cfg.dim_afr
        );
        let mut rng = Rng::new(derive_seed_str(WORLD_SEED, &label));
        let mix_scale = 1.0 / (COMPONENTS as f64).sqrt();
        let mut gaussian = |n: usize, s: f64| -> Vec<f64> { (0..n).map(|_| rng.normal() * s).collect() };
        let speaker_mix = [
            gaussian(cfg.dim_va * COMPONENTS, mix_scale),
            gaussian(cfg.dim_au * COMPONENTS, mix_scale),
            gaussian(cfg.dim_fe * COMPONENTS, mix_scale),
            gaussian(cfg.dim_mfcc * COMPONENTS, mix_scale),
            gaussian(cfg.dim_afr * COMPONENTS, mix_scale),
        ];
        let lat_scale = 1.0 / (LISTENER_DIM as f64).sqrt();
        Self {
            speaker_mix,
            behaviour_to_listener: gaussian(LISTENER_DIM * COMPONENTS, 1.5 * mix_scale),
            to_3dmm: gaussian(DIM_3DMM * LISTENER_DIM, lat_scale),
            to_va: gaussian(EMO_VA.len() * LISTENER_DIM, 1.5 * lat_scale),
            to_au: gaussian(EMO_AU.len() * LISTENER_DIM, 1.5 * lat_scale),
            au_bias: gaussian(EMO_AU.len(), 0.3),
            to_fe: gaussian(EMO_FE.len() * LISTENER_DIM, 1.5 * lat_scale),
        }
    }
}

/// One sinusoid of a speaker's behaviour.
#[derive(Debug, Clone, Copy)]
struct Component {
    freq_hz: f64,
    phase: f64,
    amplitude: f64,
}

impl Component {
    fn at(&self, frame: f64, fps: f64) -> f64 {
        self.amplitude * (2.0 * PI * self.freq_hz * frame / fps + self.phase).sin()
    }
}

fn mat_vec(m: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        out[r] = m[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// Generates one clip; identical `(cfg, seed)` give bit-identical clips.
pub fn synth_clip(cfg: &FeatureConfig, seed: u64, id: impl Into<String>) -> Result<Clip> {
    cfg.validate()?;
    let world = World::new(cfg);
    let n = cfg.n_frames;
    let fps = cfg.fps as f64;

    let mut rng = Rng::new(derive_seed_str(seed, "speaker"));
    let components: Vec<Component> = (0..COMPONENTS)
        .map(|_| Component {
            freq_hz: rng.uniform_range(FREQ_RANGE_HZ.0, FREQ_RANGE_HZ.1),
            phase: rng.uniform_range(0.0, 2.0 * PI),
            amplitude: rng.uniform_range(0.5, 1.2),
        })
        .collect();
    let state = |frame: f64| -> [f64; COMPONENTS] {
        let mut s = [0.0; COMPONENTS];
        for (v, c) in s.iter_mut().zip(&components) {
            *v = c.at(frame, fps);
        }
        s
    };

    let dims = [cfg.dim_va, cfg.dim_au, cfg.dim_fe, cfg.dim_mfcc, cfg.dim_afr];
    let mut streams: Vec<Vec<f64>> = dims.iter().map(|&d| vec![0.0; n * d]).collect();
    for t in 0..n {
        let s = state(t as f64);
        for (m, &d) in dims.iter().enumerate() {
            let row = &mut streams[m][t * d..(t + 1) * d];
            mat_vec(&world.speaker_mix[m], d, COMPONENTS, &s, row);
            for v in row.iter_mut() {
                *v += NOISE_STD * rng.normal();
            }
        }
    }

    let mut lrng = Rng::new(derive_seed_str(seed, "listener"));
    let perturbation: Vec<Component> = (0..LISTENER_DIM)
        .map(|_| Component {
            freq_hz: lrng.uniform_range(FREQ_RANGE_HZ.0, 0.3),
            phase: lrng.uniform_range(0.0, 2.0 * PI),
            amplitude: PERTURBATION_AMPLITUDE,
        })
        .collect();

    let mut out_3dmm = vec![0.0; n * DIM_3DMM];
    let mut out_emo = vec![0.0; n * DIM_EMO];
    let mut pre = [0.0; LISTENER_DIM];
    let mut va = [0.0; 2];
    let mut au = [0.0; 15];
    let mut fe = [0.0; 8];
    for t in 0..n {
        let mut avg = [0.0; COMPONENTS];
        for tau in 0..LISTENER_WINDOW {
            let s = state(t as f64 - (LISTENER_LAG + tau) as f64);
            for (a, v) in avg.iter_mut().zip(s) {
                *a += v / LISTENER_WINDOW as f64;
            }
        }
        mat_vec(&world.behaviour_to_listener, LISTENER_DIM, COMPONENTS, &avg, &mut pre);
        let h: Vec<f64> = pre
            .iter()
            .zip(&perturbation)
            .map(|(p, c)| p.tanh() + c.at(t as f64, fps))
            .collect();
        mat_vec(&world.to_3dmm, DIM_3DMM, LISTENER_DIM, &h, &mut out_3dmm[t * DIM_3DMM..(t + 1) * DIM_3DMM]);
        mat_vec(&world.to_va, 2, LISTENER_DIM, &h, &mut va);
        mat_vec(&world.to_au, 15, LISTENER_DIM, &h, &mut au);
        mat_vec(&world.to_fe, 8, LISTENER_DIM, &h, &mut fe);
        let row = &mut out_emo[t * DIM_EMO..(t + 1) * DIM_EMO];
        for (k, c) in EMO_VA.enumerate() {
            row[c] = va[k].tanh();
        }
        for (k, c) in EMO_AU.enumerate() {
            row[c] = if au[k] + world.au_bias[k] > 0.0 { 1.0 } else { 0.0 };
        }
        for (k, c) in EMO_FE.enumerate() {
            row[c] = sigmoid(fe[k]);
        }
    }

    let mut it = streams.into_iter().zip(dims).map(|(data, d)| Tensor::from_parts(vec![n, d], data));
    let mut next = || it.next().expect("five streams");
    Ok(Clip {
        id: id.into(),
        speaker: SpeakerFeatures { va: next(), au: next(), fe: next(), mfcc: next(), afr: next() },
        listener_3dmm: Tensor::from_parts(vec![n, DIM_3DMM], out_3dmm),
        listener_emo: Tensor::from_parts(vec![n, DIM_EMO], out_emo),
    })
}
