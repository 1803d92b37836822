//! MMT forward graph on an autodiff tape.

use super::MmtArch;
use crate::features::SpeakerFeatures;
use crate::numerics::tape::attention;
use crate::numerics::{sinusoidal_table, Bound, NumericsError, Tape, Tensor, Var};

type NResult<T> = Result<T, NumericsError>;

pub(crate) const LN_EPS: f64 = 1e-5;
/// Weights of the 3DMM and emotion terms of the reconstruction loss.
pub const W_3DMM: f64 = 10.0;
pub const W_EMO: f64 = 10.0;

pub(crate) fn linear<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> NResult<Var<'t>> {
    x.matmul(p.get(&format!("{name}.w"))?)?.add_row(p.get(&format!("{name}.b"))?)
}

pub(crate) fn norm<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> NResult<Var<'t>> {
    x.layer_norm(p.get(&format!("{name}.gamma"))?, p.get(&format!("{name}.beta"))?, LN_EPS)
}

/// `[d, heads]` with a 1 where feature column `c` belongs to head `c / (d / heads)`.
fn head_indicator(d: usize, heads: usize) -> Tensor {
    let dh = d / heads;
    let mut data = vec![0.0; d * heads];
    for c in 0..d {
        data[c * heads + c / dh] = 1.0;
    }
    Tensor::new(vec![d, heads], data).expect("finite")
}

/// Multi-head attention of each row of `q` over the matching rows of a small
/// set of tokens: for frame `t` the keys are `keys[j].row(t)`. Returns the
/// attention-weighted sum of `values[j]`, shape of `q`.
pub fn token_attention<'t>(q: Var<'t>, keys: &[Var<'t>], values: &[Var<'t>], heads: usize) -> NResult<Var<'t>> {
    let qs = q.shape();
    if keys.is_empty() || keys.len() != values.len() || qs.len() != 2 {
        return Err(NumericsError::Config(format!(
            "token attention needs matching non-empty key/value sets, got {} keys and {} values",
            keys.len(),
            values.len()
        )));
    }
    let d = qs[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(NumericsError::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let tape = q.tape();
    let ind = head_indicator(d, heads);
    let ind_t = tape.constant(ind.transpose()?);
    let ind = tape.constant(ind);
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let scores = keys
        .iter()
        .map(|k| q.mul(*k)?.matmul(ind)?.scale(scale))
        .collect::<NResult<Vec<_>>>()?;
    let weights = Var::stack_last(&scores)?.softmax()?;
    let mut out: Option<Var<'t>> = None;
    for (j, v) in values.iter().enumerate() {
        let term = weights.select_last(j)?.matmul(ind_t)?.mul(*v)?;
        out = Some(match out {
            None => term,
            Some(acc) => acc.add(term)?,
        });
    }
    Ok(out.expect("at least one token"))
}

pub(crate) struct SpeakerVars<'t> {
    pub va: Var<'t>,
    pub au: Var<'t>,
    pub fe: Var<'t>,
    pub mfcc: Var<'t>,
    pub afr: Var<'t>,
}

impl<'t> SpeakerVars<'t> {
    pub fn constant(tape: &'t Tape, s: &SpeakerFeatures) -> Self {
        Self {
            va: tape.constant(s.va.clone()),
            au: tape.constant(s.au.clone()),
            fe: tape.constant(s.fe.clone()),
            mfcc: tape.constant(s.mfcc.clone()),
            afr: tape.constant(s.afr.clone()),
        }
    }
}

pub(crate) struct Net<'a, 't> {
    pub arch: &'a MmtArch,
    pub p: Bound<'t>,
}

impl<'a, 't> Net<'a, 't> {
    fn lin(&self, name: &str, x: Var<'t>) -> NResult<Var<'t>> {
        linear(&self.p, name, x)
    }

    fn intra(&self, block: &str, query: Var<'t>, tokens: &[Var<'t>]) -> NResult<Var<'t>> {
        let q = self.lin(&format!("{block}.q"), query)?;
        let ks = tokens
            .iter()
            .map(|t| self.lin(&format!("{block}.k"), *t))
            .collect::<NResult<Vec<_>>>()?;
        let vs = tokens
            .iter()
            .map(|t| self.lin(&format!("{block}.v"), *t))
            .collect::<NResult<Vec<_>>>()?;
        let att = token_attention(q, &ks, &vs, self.arch.intra_heads)?;
        let out = self.lin(&format!("{block}.o"), att)?;
        norm(&self.p, &format!("{block}.ln"), query.add(out)?)
    }

    pub fn facial(&self, va: Var<'t>, au: Var<'t>, fe: Var<'t>) -> NResult<Var<'t>> {
        let va_e = self.lin("in.va", va)?;
        let au_e = self.lin("in.au", au)?;
        let fe_e = self.lin("in.fe", fe)?;
        self.intra("facial", au_e, &[va_e, fe_e])
    }

    pub fn acoustic(&self, mfcc: Var<'t>, afr: Var<'t>) -> NResult<Var<'t>> {
        let mfcc_e = self.lin("in.mfcc", mfcc)?;
        let afr_e = self.lin("in.afr", afr)?;
        self.intra("acoustic", mfcc_e, &[afr_e])
    }

    fn cross(&self, block: &str, queries: Var<'t>, keys: Var<'t>) -> NResult<Var<'t>> {
        let q = self.lin(&format!("{block}.q"), queries)?;
        let k = self.lin(&format!("{block}.k"), keys)?;
        let v = self.lin(&format!("{block}.v"), keys)?;
        let att = attention(q, k, v, self.arch.inter_heads)?;
        let out = self.lin(&format!("{block}.o"), att)?;
        norm(&self.p, &format!("{block}.ln"), queries.add(out)?)
    }

    pub fn inter(&self, f_v: Var<'t>, f_a: Var<'t>) -> NResult<Var<'t>> {
        let v = self.cross("v2a", f_v, f_a)?;
        let a = self.cross("a2v", f_a, f_v)?;
        Var::concat_cols(&[v, a])
    }

    /// Per-frame latent `[N, d_latent]`.
    pub fn latent(&self, fused: Var<'t>) -> NResult<Var<'t>> {
        let h = self.lin("latent.0", fused)?.tanh()?;
        self.lin("latent.1", h)
    }

    pub fn encode(&self, s: &SpeakerVars<'t>) -> NResult<Var<'t>> {
        let f_v = self.facial(s.va, s.au, s.fe)?;
        let f_a = self.acoustic(s.mfcc, s.afr)?;
        self.latent(self.inter(f_v, f_a)?)
    }

    /// Per-frame latent `[N, d_latent]` to `([N, 58], [N, 25])`.
    pub fn decode(&self, x: Var<'t>) -> NResult<(Var<'t>, Var<'t>)> {
        let shape = x.shape();
        let pos = x.tape().constant(sinusoidal_table(shape[0], shape[1]));
        let mut h = x.add(pos)?;
        for l in 0..self.arch.decoder_layers {
            let a = norm(&self.p, &format!("dec.{l}.ln1"), h)?;
            let q = self.lin(&format!("dec.{l}.q"), a)?;
            let k = self.lin(&format!("dec.{l}.k"), a)?;
            let v = self.lin(&format!("dec.{l}.v"), a)?;
            let att = attention(q, k, v, self.arch.decoder_heads)?;
            h = h.add(self.lin(&format!("dec.{l}.o"), att)?)?;
            let b = norm(&self.p, &format!("dec.{l}.ln2"), h)?;
            let f = self.lin(&format!("dec.{l}.ff0"), b)?.tanh()?;
            h = h.add(self.lin(&format!("dec.{l}.ff1"), f)?)?;
        }
        let p3 = self.lin("head3dmm.1", self.lin("head3dmm.0", h)?.tanh()?)?;
        let e = self.lin("heademo.1", self.lin("heademo.0", h)?.tanh()?)?;
        let emo = Var::concat_cols(&[e.slice_cols(0, 2)?.tanh()?, e.slice_cols(2, 23)?.sigmoid()?])?;
        Ok((p3, emo))
    }
}

/// `10 * sum_t MSE_t + 10 * sum_t L1_t` with channel-mean per-frame terms.
pub(crate) fn loss<'t>(p3: Var<'t>, pe: Var<'t>, g3: Var<'t>, ge: Var<'t>) -> NResult<Var<'t>> {
    let n = p3.shape()[0] as f64;
    let a = p3.mse(g3)?.scale(W_3DMM * n)?;
    let b = pe.l1(ge)?.scale(W_EMO * n)?;
    a.add(b)
}
