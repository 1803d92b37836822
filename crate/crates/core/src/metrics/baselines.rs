//! Naive reference generators.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Clip;
use crate::numerics::{derive_seed_str, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    /// Independent uniform[0, 1) values for every frame and channel.
    #[serde(rename = "b_random")]
    Random,
    /// Copies of the speaker's own emotion sequence.
    #[serde(rename = "b_mime")]
    Mime,
    /// Frame-wise mean of the training listeners.
    #[serde(rename = "b_meanseq")]
    MeanSeq,
    /// Global mean training frame, tiled.
    #[serde(rename = "b_meanfr")]
    MeanFr,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::Random, Baseline::Mime, Baseline::MeanSeq, Baseline::MeanFr];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Random => "b_random",
            Baseline::Mime => "b_mime",
            Baseline::MeanSeq => "b_meanseq",
            Baseline::MeanFr => "b_meanfr",
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline {s:?}; expected b_random, b_mime, b_meanseq or b_meanfr")))
    }
}

fn mean_sequence(train: &[Clip], n: usize, d: usize) -> Result<Tensor> {
    let mut acc = vec![0.0; n * d];
    for clip in train {
        if clip.listener_emo.shape() != [n, d] {
            return Err(Error::Data(format!(
                "training clip {} has {:?} frames, test clips have [{n}, {d}]",
                clip.id,
                clip.listener_emo.shape()
            )));
        }
        acc.iter_mut().zip(clip.listener_emo.data()).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= train.len() as f64);
    Ok(Tensor::new(vec![n, d], acc)?)
}

fn mean_frame(train: &[Clip], d: usize) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; d];
    let mut frames = 0usize;
    for clip in train {
        if clip.listener_emo.last_dim() != d {
            return Err(Error::Data(format!("training clip {} has emotion width {}, expected {d}", clip.id, clip.listener_emo.last_dim())));
        }
        for t in 0..clip.n_frames() {
            acc.iter_mut().zip(clip.listener_emo.row(t)).for_each(|(a, v)| *a += v);
        }
        frames += clip.n_frames();
    }
    acc.iter_mut().for_each(|a| *a /= frames as f64);
    Ok(acc)
}

/// `alpha` reactions per test clip from a naive generator.
pub fn baseline_reactions(kind: Baseline, train: &[Clip], test: &[Clip], alpha: usize, seed: u64) -> Result<Vec<Vec<Tensor>>> {
    if alpha == 0 {
        return Err(Error::Config("alpha must be at least 1".into()));
    }
    let first = test.first().ok_or_else(|| Error::Data("no test clips".into()))?;
    let (n, d) = (first.n_frames(), first.listener_emo.last_dim());
    if matches!(kind, Baseline::MeanSeq | Baseline::MeanFr) && train.is_empty() {
        return Err(Error::Data(format!("{kind} needs training clips")));
    }
    match kind {
        Baseline::Random => Ok(test
            .iter()
            .map(|clip| {
                let mut rng = Rng::new(derive_seed_str(derive_seed_str(seed, "b_random"), &clip.id));
                let (n, d) = (clip.n_frames(), clip.listener_emo.last_dim());
                (0..alpha).map(|_| Tensor::new(vec![n, d], rng.uniform_vec(n * d)).expect("finite")).collect()
            })
            .collect()),
        Baseline::Mime => Ok(test.iter().map(|clip| vec![clip.speaker_emo(); alpha]).collect()),
        Baseline::MeanSeq => {
            let seq = mean_sequence(train, n, d)?;
            Ok(vec![vec![seq; alpha]; test.len()])
        }
        Baseline::MeanFr => {
            let frame = mean_frame(train, d)?;
            let tiled: Vec<f64> = (0..n).flat_map(|_| frame.iter().copied()).collect();
            let seq = Tensor::new(vec![n, d], tiled)?;
            Ok(vec![vec![seq; alpha]; test.len()])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{synth_dataset, FeatureConfig, Split};
    use crate::metrics::{fr_corr, fr_div, fr_dvs, fr_var, reaction_sets};

    #[test]
    fn names_roundtrip() {
        for b in Baseline::ALL {
            assert_eq!(b.name().parse::<Baseline>().unwrap(), b);
            assert_eq!(serde_json::to_string(&b).unwrap(), format!("\"{}\"", b.name()));
        }
        assert!("b_gauss".parse::<Baseline>().is_err());
    }

    #[test]
    fn degenerate_baselines_score_zero() {
        let cfg = FeatureConfig::desk(50);
        let train = synth_dataset(&cfg, 4, 1, Split::Train).unwrap();
        let test = synth_dataset(&cfg, 3, 1, Split::Test).unwrap();
        let mime = baseline_reactions(Baseline::Mime, &train.clips, &test.clips, 4, 0).unwrap();
        let sets = reaction_sets(&test.clips, mime, 0.75).unwrap();
        assert_eq!(fr_div(&sets).unwrap(), 0.0);
        let fr = baseline_reactions(Baseline::MeanFr, &train.clips, &test.clips, 4, 0).unwrap();
        let sets = reaction_sets(&test.clips, fr, 0.75).unwrap();
        assert_eq!(fr_corr(&sets).unwrap(), 0.0);
        assert_eq!(fr_div(&sets).unwrap(), 0.0);
        assert_eq!(fr_var(&sets).unwrap(), 0.0);
        assert_eq!(fr_dvs(&sets).unwrap().value, 0.0);
        let seq = baseline_reactions(Baseline::MeanSeq, &train.clips, &test.clips, 2, 0).unwrap();
        let sets = reaction_sets(&test.clips, seq, 0.75).unwrap();
        assert_eq!(fr_div(&sets).unwrap(), 0.0);
        assert_eq!(fr_dvs(&sets).unwrap().value, 0.0);
    }

    #[test]
    fn random_is_seeded_and_needs_alpha() {
        let cfg = FeatureConfig::desk(50);
        let test = synth_dataset(&cfg, 2, 1, Split::Test).unwrap();
        let a = baseline_reactions(Baseline::Random, &[], &test.clips, 3, 7).unwrap();
        assert_eq!(a, baseline_reactions(Baseline::Random, &[], &test.clips, 3, 7).unwrap());
        assert_ne!(a, baseline_reactions(Baseline::Random, &[], &test.clips, 3, 8).unwrap());
        assert!(a.iter().flatten().flat_map(|t| t.data()).all(|v| (0.0..1.0).contains(v)));
        assert!(baseline_reactions(Baseline::Random, &[], &test.clips, 0, 7).is_err());
        assert!(baseline_reactions(Baseline::MeanFr, &[], &test.clips, 1, 7).is_err());
    }
}
