//! The seven reaction scores over a collection of [`ReactionSet`]s.
//!
//! Per-sample terms are summed in sorted order, so every score is exactly
//! invariant to the order of the generated samples.

use rayon::prelude::*;

use super::kernels::{channel_ccc, dtw, fid, tlcc_lag, GaussianStats};
use super::ReactionSet;
use crate::error::{Error, Result};
use crate::numerics::{sym_eigen, Tensor};

/// Diagonal jitter used when a pooled covariance is rank deficient.
pub const REA_JITTER: f64 = 1e-6;

/// A score together with an optional warning about how it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub value: f64,
    pub warning: Option<String>,
}

pub(crate) fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

fn mean_over_clips(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Checks the shared sample count and frame shape.
pub(crate) fn check_sets(sets: &[ReactionSet]) -> Result<()> {
    let first = sets.first().ok_or_else(|| Error::Data("no reaction sets".into()))?;
    for s in sets {
        s.validate()?;
        if s.alpha() != first.alpha() || s.speaker.shape() != first.speaker.shape() {
            return Err(Error::Data(format!(
                "{}: alpha {} with shape {:?} differs from {}: alpha {} with shape {:?}",
                s.clip_id,
                s.alpha(),
                s.speaker.shape(),
                first.clip_id,
                first.alpha(),
                first.speaker.shape()
            )));
        }
    }
    Ok(())
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64
}

fn channel_variance(seq: &Tensor) -> f64 {
    let (n, d) = (seq.shape()[0], seq.shape()[1]);
    let mut total = 0.0;
    for c in 0..d {
        let (mut mean, mut m2) = (0.0, 0.0);
        for t in 0..n {
            let x = seq.data()[t * d + c];
            let delta = x - mean;
            mean += delta / (t + 1) as f64;
            m2 += delta * (x - mean);
        }
        total += m2 / n as f64;
    }
    total / d as f64
}

fn channel_mean(seq: &Tensor) -> Vec<f64> {
    (0..seq.shape()[0]).map(|t| seq.row(t).iter().sum::<f64>() / seq.shape()[1] as f64).collect()
}

pub(crate) fn clip_corr(set: &ReactionSet) -> Result<f64> {
    let per = set
        .generated
        .iter()
        .map(|g| {
            set.appropriate
                .iter()
                .map(|y| channel_ccc(g, y))
                .try_fold(f64::NEG_INFINITY, |m, r| r.map(|r| m.max(r)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sorted_sum(per))
}

pub(crate) fn clip_dist(set: &ReactionSet) -> Result<f64> {
    let per = set
        .generated
        .iter()
        .map(|g| set.appropriate.iter().map(|y| dtw(g, y)).try_fold(f64::INFINITY, |m, r| r.map(|r| m.min(r))))
        .collect::<Result<Vec<_>>>()?;
    Ok(sorted_sum(per))
}

pub(crate) fn clip_div(set: &ReactionSet) -> f64 {
    let a = set.alpha();
    if a < 2 {
        return 0.0;
    }
    let mut pairs = Vec::with_capacity(a * (a - 1) / 2);
    for i in 0..a {
        for j in i + 1..a {
            pairs.push(mse(&set.generated[i], &set.generated[j]));
        }
    }
    let n = pairs.len() as f64;
    sorted_sum(pairs) / n
}

pub(crate) fn clip_var(set: &ReactionSet) -> f64 {
    sorted_sum(set.generated.iter().map(channel_variance).collect()) / set.alpha() as f64
}

pub(crate) fn clip_syn(set: &ReactionSet, l_max: usize) -> Result<f64> {
    let speaker = channel_mean(&set.speaker);
    let lags = set
        .generated
        .iter()
        .map(|g| tlcc_lag(&channel_mean(g), &speaker, l_max).map(|l| l as f64))
        .collect::<Result<Vec<_>>>()?;
    Ok(sorted_sum(lags) / set.alpha() as f64)
}

fn per_clip<F>(sets: &[ReactionSet], f: F) -> Result<f64>
where
    F: Fn(&ReactionSet) -> Result<f64> + Sync + Send,
{
    check_sets(sets)?;
    let v = sets.par_iter().map(f).collect::<Result<Vec<_>>>()?;
    Ok(mean_over_clips(&v))
}

/// Best channel-mean CCC against the appropriate set, summed over samples
/// and averaged over clips.
pub fn fr_corr(sets: &[ReactionSet]) -> Result<f64> {
    per_clip(sets, clip_corr)
}

/// Smallest DTW distance to the appropriate set, summed over samples and
/// averaged over clips.
pub fn fr_dist(sets: &[ReactionSet]) -> Result<f64> {
    per_clip(sets, clip_dist)
}

/// Mean pairwise squared difference among the samples of each clip.
pub fn fr_div(sets: &[ReactionSet]) -> Result<f64> {
    per_clip(sets, |s| Ok(clip_div(s)))
}

/// Mean per-channel variance across frames of every generated sequence.
pub fn fr_var(sets: &[ReactionSet]) -> Result<f64> {
    per_clip(sets, |s| Ok(clip_var(s)))
}

/// Mean squared difference between same-index samples of different clips.
pub fn fr_dvs(sets: &[ReactionSet]) -> Result<Score> {
    check_sets(sets)?;
    let c = sets.len();
    if c < 2 {
        return Ok(Score { value: 0.0, warning: Some("FRDvs needs at least two clips; reported as 0".into()) });
    }
    let alpha = sets[0].alpha();
    let per_index: Vec<f64> = (0..alpha)
        .into_par_iter()
        .map(|i| {
            let mut total = 0.0;
            for n in 0..c {
                for m in n + 1..c {
                    total += mse(&sets[n].generated[i], &sets[m].generated[i]);
                }
            }
            total / (c * (c - 1) / 2) as f64
        })
        .collect();
    Ok(Score { value: sorted_sum(per_index) / alpha as f64, warning: None })
}

fn pooled_stats<'a>(seqs: impl Iterator<Item = &'a Tensor>, what: &str, warnings: &mut Vec<String>) -> Result<GaussianStats> {
    let mut rows: Vec<&[f64]> = seqs.flat_map(|s| (0..s.shape()[0]).map(move |t| s.row(t))).collect();
    rows.sort_by(|a, b| a.iter().zip(*b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    let d = rows.first().map_or(0, |r| r.len());
    if rows.len() <= d {
        warnings.push(format!("FRRea: only {} {what} frames for a {d}-dimensional covariance", rows.len()));
    }
    let stats = GaussianStats::fit(&rows)?;
    let eig = sym_eigen(&stats.cov)?;
    let top = eig.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let low = eig.values.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if low <= 1e-12 * top.max(1.0) {
        warnings.push(format!("FRRea: {what} covariance is rank deficient; added {REA_JITTER:e} to its diagonal"));
        return Ok(stats.jittered(REA_JITTER));
    }
    Ok(stats)
}

/// Fréchet distance between Gaussian fits of all generated frames and all
/// appropriate real frames. A proxy computed on emotion channels.
pub fn fr_rea(sets: &[ReactionSet]) -> Result<Score> {
    check_sets(sets)?;
    let mut warnings = Vec::new();
    let generated = pooled_stats(sets.iter().flat_map(|s| s.generated.iter()), "generated", &mut warnings)?;
    let real = pooled_stats(sets.iter().flat_map(|s| s.appropriate.iter()), "real", &mut warnings)?;
    let value = fid(&generated, &real)?;
    Ok(Score { value, warning: (!warnings.is_empty()).then(|| warnings.join("; ")) })
}

/// Mean absolute peak-correlation lag between each sample and the speaker.
pub fn fr_syn(sets: &[ReactionSet], l_max: usize) -> Result<f64> {
    per_clip(sets, |s| clip_syn(s, l_max))
}
