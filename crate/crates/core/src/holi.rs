//! Guided holistic interaction: full pixel–word attention whose map is
//! averaged with the row/column location prior before aggregating words.

use crate::attention;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::params::ParameterStore;
use crate::tape::{LogitSite, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct HolisticMasks {
    /// `H×W×T`, softmax over words at every pixel.
    pub mask_holi: Var,
    /// `H×W×T` map actually used to aggregate words. Equals `mask_holi` when
    /// unguided.
    pub mask_roho: Var,
}

#[derive(Debug, Clone, Copy)]
pub enum Guidance {
    /// Plain cross-attention: aggregate with `mask_holi` alone.
    None,
    /// Average `mask_holi` with this `H×W×T` prior.
    Prior(Var),
}

#[derive(Debug, Clone, Copy)]
pub struct HolisticProjection {
    pub v_g: Var,
    pub g_k: Var,
    pub g_v: Var,
}

#[derive(Debug, Clone)]
pub struct Holi {
    visual: Linear,
    g_k: Linear,
    g_v: Linear,
    /// Rescale `mask_roho` to sum to one over words at every pixel.
    pub renormalize: bool,
}

impl Holi {
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        channels: usize,
        word_dim: usize,
        renormalize: bool,
    ) -> Result<Self> {
        let c = channels;
        Ok(Self {
            visual: Linear::register(store, format!("{prefix}.visual"), c, c)?,
            g_k: Linear::register(store, format!("{prefix}.word_gk"), word_dim, c)?,
            g_v: Linear::register(store, format!("{prefix}.word_gv"), word_dim, c)?,
            renormalize,
        })
    }

    pub fn project(&self, cx: &mut Ctx, v: Var, l: Var) -> Result<HolisticProjection> {
        if cx.tape.shape(l).first() == Some(&0) {
            return Err(Error::EmptyExpression);
        }
        Ok(HolisticProjection {
            v_g: self.visual.forward(cx, v)?,
            g_k: self.g_k.forward(cx, l)?,
            g_v: self.g_v.forward(cx, l)?,
        })
    }

    pub fn forward(
        &self,
        cx: &mut Ctx,
        v: Var,
        l: Var,
        guidance: Guidance,
    ) -> Result<(Var, HolisticMasks)> {
        let p = self.project(cx, v, l)?;
        guided_attend(&mut cx.tape, p.v_g, p.g_k, p.g_v, guidance, self.renormalize)
    }
}

/// `v_g_all = (mask_roho · g_v) ⊙ v_g` with `mask_roho = (prior + mask_holi)/2`.
pub fn guided_attend(
    tape: &mut Tape,
    v_g: Var,
    g_k: Var,
    g_v: Var,
    guidance: Guidance,
    renormalize: bool,
) -> Result<(Var, HolisticMasks)> {
    let s = tape.shape(v_g).to_vec();
    if s.len() != 3 {
        return Err(Error::dimension(format!("holistic feature must be H×W×C, got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let t = tape.shape(g_k)[0];
    let flat = tape.reshape(v_g, &[h * w, c])?;
    let scores = attention::scores(tape, flat, g_k, LogitSite::Holi)?;
    let mask_holi = tape.reshape(scores.weights, &[h, w, t])?;

    let mask_roho = match guidance {
        Guidance::None => mask_holi,
        Guidance::Prior(prior) => {
            if tape.shape(prior) != [h, w, t] {
                return Err(Error::dimension(format!(
                    "location prior {:?} does not match pixel-word logits {:?}",
                    tape.shape(prior),
                    [h, w, t]
                )));
            }
            let total = tape.add(prior, mask_holi)?;
            let mean = tape.scale(total, 0.5);
            if renormalize {
                let z = tape.sum_axes(mean, &[2])?;
                tape.div(mean, z)?
            } else {
                mean
            }
        }
    };

    let weights = tape.reshape(mask_roho, &[h * w, t])?;
    let words = tape.matmul(weights, g_v)?;
    let words = tape.reshape(words, &[h, w, c])?;
    let out = tape.mul(words, v_g)?;
    Ok((out, HolisticMasks { mask_holi, mask_roho }))
}
