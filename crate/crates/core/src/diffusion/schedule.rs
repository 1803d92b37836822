use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Start and end of the conventional 1000-step linear schedule.
pub const BETA_START_1000: f64 = 1e-4;
pub const BETA_END_1000: f64 = 0.02;
/// Upper bound on any single step's beta, keeping every alpha-bar positive.
pub const BETA_MAX: f64 = 0.999;

/// Linear beta schedule rescaled to `T` steps, with cumulative products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    /// `betas[t]` for `t = 1..=T`; `betas[0] = 0`.
    pub betas: Vec<f64>,
    /// `alpha_bar[t]` for `t = 0..=T`; `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let scale = 1000.0 / steps as f64;
        let (lo, hi) = (BETA_START_1000 * scale, BETA_END_1000 * scale);
        let mut betas = vec![0.0; steps + 1];
        for (t, b) in betas.iter_mut().enumerate().skip(1) {
            let frac = if steps == 1 { 0.0 } else { (t - 1) as f64 / (steps - 1) as f64 };
            *b = (lo + (hi - lo) * frac).min(BETA_MAX);
        }
        Self::from_betas(betas)
    }

    /// Schedule from explicit betas (`betas[0]` ignored).
    pub fn from_betas(mut betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        betas[0] = 0.0;
        if betas[1..].iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        let mut alpha_bar = vec![1.0; betas.len()];
        for t in 1..betas.len() {
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - betas[t]);
        }
        Ok(Self { steps: betas.len() - 1, betas, alpha_bar })
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::Config(format!("timestep {t} outside 0..={}", self.steps)));
        }
        Ok(())
    }
}

/// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn forward_diffuse(schedule: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps, "forward_diffuse", |x, e| a * x + b * e)?)
}

/// Deterministic (eta = 0) reverse pass over one window: from `x_T` down to
/// `x_0`, calling `eps_hat(x_t, t)` once per step.
pub fn ddim_reverse_window<F>(schedule: &NoiseSchedule, x_t: &Tensor, mut eps_hat: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let mut x = x_t.clone();
    for t in (1..=schedule.steps).rev() {
        let e = eps_hat(&x, t)?;
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t - 1);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        x = x.zip_map(&e, "ddim_step", |xv, ev| {
            let x0 = (xv - sb * ev) / sa;
            pa * x0 + pb * ev
        })?;
    }
    Ok(x.ensure_finite("ddim_reverse")?)
}
