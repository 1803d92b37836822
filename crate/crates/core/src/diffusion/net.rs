//! Behaviour-constraint MLP and noise-prediction network on a tape.

use super::DiffusionArch;
use crate::mmt::net::{linear, norm};
use crate::numerics::tape::attention;
use crate::numerics::{Bound, NumericsError, Tensor, Var};

type NResult<T> = Result<T, NumericsError>;

pub(crate) const GN_EPS: f64 = 1e-5;

pub(crate) struct Net<'a, 't> {
    pub arch: &'a DiffusionArch,
    pub p: Bound<'t>,
    /// Sinusoidal time table `[T + 1, d_latent]`.
    pub time_table: &'a Tensor,
}

impl<'a, 't> Net<'a, 't> {
    fn lin(&self, name: &str, x: Var<'t>) -> NResult<Var<'t>> {
        linear(&self.p, name, x)
    }

    /// Flattened windows `[n_windows, ws * d_latent]` to `[n_windows, d_cond]`.
    pub fn behaviour_constraint(&self, windows: Var<'t>) -> NResult<Var<'t>> {
        let h = self.lin("bc.0", windows)?.tanh()?;
        self.lin("bc.1", h)?.group_norm(self.arch.bc_groups, GN_EPS)
    }

    /// Noise estimate for one window `x_t` `[ws, d_latent]` given a
    /// condition row `[1, d_cond]`.
    pub fn predict_eps(&self, x_t: Var<'t>, t: usize, z: Var<'t>) -> NResult<Var<'t>> {
        let tape = x_t.tape();
        let d = x_t.shape()[1];
        let row = self.time_table.slice_rows(t, 1)?;
        let temb = self.lin("time.1", self.lin("time.0", tape.constant(row))?.tanh()?)?;
        let cemb = self.lin("cond", z)?;
        let mut h = x_t.add_row(temb)?.add_row(cemb)?;
        for b in 0..self.arch.blocks {
            let y = norm(&self.p, &format!("blk.{b}.ln"), h)?;
            let y = self.lin(&format!("blk.{b}.1"), self.lin(&format!("blk.{b}.0"), y)?.tanh()?)?;
            h = h.add(y)?;
            if b + 1 == self.arch.attention_after {
                let y = norm(&self.p, "attn.ln", h)?;
                let q = self.lin("attn.q", y)?;
                let k = self.lin("attn.k", y)?;
                let v = self.lin("attn.v", y)?;
                h = h.add(self.lin("attn.o", attention(q, k, v, self.arch.attention_heads)?)?)?;
            }
        }
        let out = self.lin("out", norm(&self.p, "out.ln", h)?)?;
        debug_assert_eq!(out.shape()[1], d);
        Ok(out)
    }
}
