//! Evaluation of multiple appropriate reactions: sequence kernels, the
//! appropriate-set construction, the seven reaction scores and the naive
//! baselines.

mod baselines;
mod kernels;
mod report;
mod scores;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::Clip;
use crate::numerics::Tensor;

pub use baselines::{baseline_reactions, Baseline};
pub use kernels::{ccc, channel_ccc, column, dtw, fid, tlcc_lag, GaussianStats};
pub use report::{evaluate, ClipRow, EvalConfig, MetricsReport};
pub use scores::{fr_corr, fr_dist, fr_div, fr_dvs, fr_rea, fr_syn, fr_var, Score, REA_JITTER};

pub const DEFAULT_THRESHOLD: f64 = 0.75;
pub const DEFAULT_L_MAX: usize = 50;

/// Everything scored for one speaker clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactionSet {
    pub clip_id: String,
    /// `alpha` generated emotion sequences, each `[N, D]`.
    pub generated: Vec<Tensor>,
    /// The speaker's own emotion sequence `[N, D]`.
    pub speaker: Tensor,
    /// Appropriate real listener emotion sequences.
    pub appropriate: Vec<Tensor>,
}

impl ReactionSet {
    pub fn new(clip_id: impl Into<String>, generated: Vec<Tensor>, speaker: Tensor, appropriate: Vec<Tensor>) -> Result<Self> {
        let set = Self { clip_id: clip_id.into(), generated, speaker, appropriate };
        set.validate()?;
        Ok(set)
    }

    pub fn alpha(&self) -> usize {
        self.generated.len()
    }

    pub fn n_frames(&self) -> usize {
        self.speaker.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.generated.is_empty() {
            return Err(Error::Data(format!("{}: no generated sequences", self.clip_id)));
        }
        if self.appropriate.is_empty() {
            return Err(Error::Data(format!("{}: empty appropriate set", self.clip_id)));
        }
        let shape = self.speaker.shape();
        if shape.len() != 2 || shape[0] < 2 {
            return Err(Error::Data(format!("{}: speaker sequence has shape {shape:?}", self.clip_id)));
        }
        for (what, seqs) in [("generated", &self.generated), ("appropriate", &self.appropriate)] {
            if let Some(bad) = seqs.iter().find(|s| s.shape() != shape) {
                return Err(Error::Data(format!(
                    "{}: {what} sequence has shape {:?}, expected {shape:?}",
                    self.clip_id,
                    bad.shape()
                )));
            }
        }
        Ok(())
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("similarity threshold {threshold} outside [-1, 1]")));
    }
    Ok(())
}

/// For each speaker, the indices whose listeners count as appropriate:
/// every `j` with mean per-channel speaker CCC `sim(i, j) >= threshold`,
/// plus `i` itself.
pub fn appropriate_indices(speakers: &[Tensor], threshold: f64) -> Result<Vec<Vec<usize>>> {
    check_threshold(threshold)?;
    let n = speakers.len();
    let sims: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| if i == j { Ok(1.0) } else { channel_ccc(&speakers[i], &speakers[j]) }).collect())
        .collect::<Result<_>>()?;
    Ok((0..n)
        .map(|i| (0..n).filter(|&j| j == i || sims[i][j] >= threshold).collect())
        .collect())
}

/// Appropriate listener sequences for every clip, keyed by position.
pub fn appropriate_set(clips: &[Clip], threshold: f64) -> Result<Vec<Vec<Tensor>>> {
    if clips.is_empty() {
        return Err(Error::Data("appropriate_set: no clips".into()));
    }
    let speakers: Vec<Tensor> = clips.iter().map(Clip::speaker_emo).collect();
    Ok(appropriate_indices(&speakers, threshold)?
        .into_iter()
        .map(|idx| idx.into_iter().map(|j| clips[j].listener_emo.clone()).collect())
        .collect())
}

/// Pairs generated sequences with the clips they were produced for.
pub fn reaction_sets(clips: &[Clip], generated: Vec<Vec<Tensor>>, threshold: f64) -> Result<Vec<ReactionSet>> {
    if clips.len() != generated.len() {
        return Err(Error::Data(format!("{} clips but {} generated groups", clips.len(), generated.len())));
    }
    let appropriate = appropriate_set(clips, threshold)?;
    clips
        .iter()
        .zip(generated)
        .zip(appropriate)
        .map(|((clip, gen), app)| ReactionSet::new(clip.id.clone(), gen, clip.speaker_emo(), app))
        .collect()
}
