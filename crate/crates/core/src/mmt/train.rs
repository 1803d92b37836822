//! Stage-1 training: reconstruction of listener labels from speaker features.

use serde::{Deserialize, Serialize};

use super::net::{self, Net, SpeakerVars};
use super::{Mmt, MmtArch};
use crate::error::{Error, Result};
use crate::features::{Clip, FeatureConfig};
use crate::numerics::{derive_seed_str, AdamWConfig, AdamWState, CosineWarmRestarts, Rng, Tape};

/// Optimizer and schedule settings shared by both training stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Length of the first cosine cycle, in epochs.
    pub restart_period: f64,
    /// Growth factor of successive cycles.
    pub restart_mult: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            restart_period: 100.0,
            restart_mult: 2.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> CosineWarmRestarts {
        CosineWarmRestarts {
            base_lr: self.optimizer.lr,
            min_lr: 0.0,
            period: self.restart_period,
            mult: self.restart_mult,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.restart_period > 0.0) || self.restart_mult < 1.0 {
            return Err(Error::Config("restart_period must be positive and restart_mult at least 1".into()));
        }
        Ok(())
    }
}

/// Batches of clip indices for every epoch, shuffled from `seed`.
pub(crate) fn epoch_batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Initializes a model from `cfg.seed` and fits it on `clips`. Returns the
/// model and the mean training loss of every epoch.
pub fn train_mmt(
    features: FeatureConfig,
    arch: MmtArch,
    clips: &[Clip],
    cfg: &TrainConfig,
) -> Result<(Mmt, Vec<f64>)> {
    let mut model = Mmt::init(features, arch, cfg.seed)?;
    let trace = fit(&mut model, clips, cfg)?;
    Ok((model, trace))
}

/// Continues training `model` in place.
pub fn fit(model: &mut Mmt, clips: &[Clip], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if clips.is_empty() {
        return Err(Error::Config("the training split is empty".into()));
    }
    cfg.validate()?;
    let schedule = cfg.schedule();
    let mut opt = AdamWState::new(cfg.optimizer, model.params.tensors());
    let mut rng = Rng::new(derive_seed_str(cfg.seed, "mmt-batches"));
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(clips.len(), cfg.batch_size, &mut rng);
        let n_batches = batches.len();
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let tape = Tape::new();
            let net = Net { arch: &model.arch, p: model.params.bind(&tape, true) };
            let mut loss: Option<crate::numerics::Var<'_>> = None;
            for &i in batch {
                let clip = &clips[i];
                let x = net.encode(&SpeakerVars::constant(&tape, &clip.speaker))?;
                let (p3, pe) = net.decode(x)?;
                let l = net::loss(
                    p3,
                    pe,
                    tape.constant(clip.listener_3dmm.clone()),
                    tape.constant(clip.listener_emo.clone()),
                )?;
                loss = Some(match loss {
                    None => l,
                    Some(acc) => acc.add(l)?,
                });
            }
            let loss = loss.expect("non-empty batch").scale(1.0 / batch.len() as f64)?;
            total += loss.value().data()[0];
            let grads = net.p.grads(&tape.backward(loss)?);
            let lr = schedule.lr_at(epoch as f64 + b as f64 / n_batches as f64);
            opt.step(model.params.tensors_mut(), &grads, lr)?;
        }
        trace.push(total / n_batches as f64);
    }
    Ok(trace)
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn smooth(trace: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    (0..trace.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            trace[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// True when `trace` never increases.
pub fn is_non_increasing(trace: &[f64]) -> bool {
    trace.windows(2).all(|p| p[1] <= p[0])
}
