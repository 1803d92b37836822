//! Stage-2 training of the behaviour constraint and the noise predictor
//! against a frozen MMT.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{flatten_windows, forward_diffuse, Diffusion, DiffusionArch};
use crate::error::{Error, Result};
use crate::features::Clip;
use crate::mmt::net::{loss as mmt_loss, Net as MmtNet};
use crate::mmt::train::epoch_batches;
use crate::mmt::{LatentSequence, Mmt, TrainConfig};
use crate::numerics::{derive_seed, derive_seed_str, AdamWConfig, AdamWState, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub train: TrainConfig,
    /// Optimisation steps that fit a latent to each listener's labels.
    pub inversion_steps: usize,
    pub inversion_lr: f64,
    /// Clips whose fixed-noise loss is tracked after every epoch.
    pub probe_clips: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self { train: TrainConfig::default(), inversion_steps: 100, inversion_lr: 0.05, probe_clips: 8 }
    }
}

pub struct Stage2Outcome {
    pub model: Diffusion,
    /// Noise-prediction loss on a fixed probe set (every timestep, fixed
    /// noise) after each epoch.
    pub probe_trace: Vec<f64>,
    /// Mean sampled training loss of each epoch.
    pub train_trace: Vec<f64>,
}

/// The listener's reaction in latent space: starting from the speaker-side
/// encoding, gradient descent on the frozen decoder's reconstruction loss
/// against the listener labels.
pub fn listener_latent(mmt: &Mmt, clip: &Clip, steps: usize, lr: f64) -> Result<LatentSequence> {
    let mut x = vec![mmt.encode(&clip.speaker, &clip.id)?.frames()];
    let mut opt = AdamWState::new(AdamWConfig { lr, weight_decay: 0.0, ..AdamWConfig::default() }, &x);
    for _ in 0..steps {
        let tape = Tape::new();
        let net = MmtNet { arch: &mmt.arch, p: mmt.params.bind(&tape, false) };
        let xv = tape.param(x[0].clone());
        let (p3, pe) = net.decode(xv)?;
        let loss = mmt_loss(
            p3,
            pe,
            tape.constant(clip.listener_3dmm.clone()),
            tape.constant(clip.listener_emo.clone()),
        )?;
        let g = tape.backward(loss)?.get(xv);
        opt.step(&mut x, &[g], lr)?;
    }
    LatentSequence::from_frames(&x[0], mmt.features.ws, clip.id.clone())
}

struct Pair {
    /// Speaker windows flattened to `[n_windows, ws * d_latent]`.
    speaker: Tensor,
    /// Listener latent windows, each `[ws, d_latent]`.
    listener: Vec<Tensor>,
}

fn window_loss<'t>(
    net: &super::net::Net<'_, 't>,
    z: Var<'t>,
    w: usize,
    x_t: &Tensor,
    t: usize,
    eps: &Tensor,
) -> Result<Var<'t>> {
    let tape = z.tape();
    let pred = net.predict_eps(tape.constant(x_t.clone()), t, z.slice_rows(w, 1)?)?;
    Ok(pred.l1(tape.constant(eps.clone()))?)
}

/// Trains a fresh behaviour constraint and denoiser on `clips`, keeping
/// `mmt` untouched.
pub fn train_diffusion(mmt: &Mmt, arch: DiffusionArch, clips: &[Clip], cfg: &Stage2Config) -> Result<Stage2Outcome> {
    if clips.is_empty() {
        return Err(Error::Config("the training split is empty".into()));
    }
    cfg.train.validate()?;
    let mut model = Diffusion::init(mmt.features, arch, cfg.train.seed)?;
    let pairs = clips
        .par_iter()
        .map(|clip| {
            let speaker = flatten_windows(&mmt.encode(&clip.speaker, &clip.id)?)?;
            let lat = listener_latent(mmt, clip, cfg.inversion_steps, cfg.inversion_lr)?;
            let listener = (0..lat.n_windows()).map(|w| lat.window(w)).collect();
            Ok(Pair { speaker, listener })
        })
        .collect::<Result<Vec<_>>>()?;

    let steps = model.arch.steps;
    let mut probe_rng = Rng::new(derive_seed_str(cfg.train.seed, "stage2-probe"));
    let probe: Vec<(usize, usize, usize, Tensor, Tensor)> = pairs
        .iter()
        .enumerate()
        .take(cfg.probe_clips.max(1))
        .flat_map(|(c, p)| {
            let mut items = Vec::new();
            for (w, x0) in p.listener.iter().enumerate() {
                for t in 1..=steps {
                    let eps = Tensor::new(x0.shape().to_vec(), probe_rng.normal_vec(x0.numel())).expect("finite");
                    let x_t = forward_diffuse(&model.schedule, x0, t, &eps).expect("matching shapes");
                    items.push((c, w, t, x_t, eps));
                }
            }
            items
        })
        .collect();
    let probe_loss = |model: &Diffusion| -> Result<f64> {
        let losses = probe
            .par_iter()
            .map(|(c, w, t, x_t, eps)| {
                let tape = Tape::new();
                let net = model.net(&tape, false);
                let z = net.behaviour_constraint(tape.constant(pairs[*c].speaker.clone()))?;
                Ok(window_loss(&net, z, *w, x_t, *t, eps)?.value().data()[0])
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    };

    let schedule = cfg.train.schedule();
    let mut opt = AdamWState::new(cfg.train.optimizer, model.params.tensors());
    let mut rng = Rng::new(derive_seed_str(cfg.train.seed, "stage2-batches"));
    let mut probe_trace = Vec::with_capacity(cfg.train.epochs);
    let mut train_trace = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        let batches = epoch_batches(pairs.len(), cfg.train.batch_size, &mut rng);
        let n_batches = batches.len();
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let mut step_rng = Rng::new(derive_seed(rng.next_u64(), b as u64));
            let tape = Tape::new();
            let net = model.net(&tape, true);
            let mut terms = Vec::new();
            for &i in batch {
                let pair = &pairs[i];
                let z = net.behaviour_constraint(tape.constant(pair.speaker.clone()))?;
                for (w, x0) in pair.listener.iter().enumerate() {
                    let t = step_rng.int_range(1, steps);
                    let eps = Tensor::new(x0.shape().to_vec(), step_rng.normal_vec(x0.numel()))?;
                    let x_t = forward_diffuse(&model.schedule, x0, t, &eps)?;
                    terms.push(window_loss(&net, z, w, &x_t, t, &eps)?);
                }
            }
            let mut loss = terms[0];
            for term in &terms[1..] {
                loss = loss.add(*term)?;
            }
            let loss = loss.scale(1.0 / terms.len() as f64)?;
            total += loss.value().data()[0];
            let grads = net.p.grads(&tape.backward(loss)?);
            let lr = schedule.lr_at(epoch as f64 + b as f64 / n_batches as f64);
            opt.step(model.params.tensors_mut(), &grads, lr)?;
        }
        train_trace.push(total / n_batches as f64);
        probe_trace.push(probe_loss(&model)?);
    }
    Ok(Stage2Outcome { model, probe_trace, train_trace })
}
