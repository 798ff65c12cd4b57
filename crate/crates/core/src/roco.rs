//! Row-and-column interaction: the visual map is pooled onto its two axes,
//! each axis attends to the expression independently, and the two axis-wise
//! attention maps factor into a per-word spatial location prior.

use crate::attention;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::params::ParameterStore;
use crate::tape::{LogitSite, PoolAxis, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct AxisFeatures {
    /// `H×C`, one feature per row.
    pub v_h: Var,
    /// `W×C`, one feature per column.
    pub v_w: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct WordProjections {
    pub h_k: Var,
    pub h_v: Var,
    pub w_k: Var,
    pub w_v: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LocationPrior {
    /// `H×W×T`; each word's slice is a distribution over positions.
    pub mask_roco: Var,
    /// `H×T`, softmax over rows per word.
    pub e_h: Var,
    /// `W×T`, softmax over columns per word.
    pub e_w: Var,
}

/// Everything the row/column branch produces before the parts are combined.
#[derive(Debug, Clone, Copy)]
pub struct RocoParts {
    pub axes: AxisFeatures,
    pub v_h_att: Var,
    pub v_w_att: Var,
    pub prior: LocationPrior,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct Roco {
    row: Linear,
    col: Linear,
    h_k: Linear,
    h_v: Linear,
    w_k: Linear,
    w_v: Linear,
}

impl Roco {
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        channels: usize,
        word_dim: usize,
    ) -> Result<Self> {
        let c = channels;
        Ok(Self {
            row: Linear::register(store, format!("{prefix}.row"), c, c)?,
            col: Linear::register(store, format!("{prefix}.col"), c, c)?,
            h_k: Linear::register(store, format!("{prefix}.word_hk"), word_dim, c)?,
            h_v: Linear::register(store, format!("{prefix}.word_hv"), word_dim, c)?,
            w_k: Linear::register(store, format!("{prefix}.word_wk"), word_dim, c)?,
            w_v: Linear::register(store, format!("{prefix}.word_wv"), word_dim, c)?,
        })
    }

    /// Mean-pools `V` along each axis, then affine + GeLU per axis.
    pub fn aggregate_axes(&self, cx: &mut Ctx, v: Var) -> Result<AxisFeatures> {
        let s = cx.tape.shape(v);
        if s.len() != 3 || s[0] == 0 || s[1] == 0 {
            return Err(Error::dimension(format!("RoCo input must be H×W×C, got {s:?}")));
        }
        let pooled_h = cx.tape.mean_pool(v, PoolAxis::Width)?;
        let pooled_w = cx.tape.mean_pool(v, PoolAxis::Height)?;
        let v_h = self.row.forward(cx, pooled_h)?;
        let v_h = cx.tape.gelu(v_h);
        let v_w = self.col.forward(cx, pooled_w)?;
        let v_w = cx.tape.gelu(v_w);
        Ok(AxisFeatures { v_h, v_w })
    }

    pub fn project_words(&self, cx: &mut Ctx, l: Var) -> Result<WordProjections> {
        if cx.tape.shape(l).first() == Some(&0) {
            return Err(Error::EmptyExpression);
        }
        Ok(WordProjections {
            h_k: self.h_k.forward(cx, l)?,
            h_v: self.h_v.forward(cx, l)?,
            w_k: self.w_k.forward(cx, l)?,
            w_v: self.w_v.forward(cx, l)?,
        })
    }

    /// Axis attention plus the location prior, without combining the parts.
    pub fn interact_parts(&self, cx: &mut Ctx, v: Var, l: Var) -> Result<RocoParts> {
        let s = cx.tape.shape(l);
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::EmptyExpression);
        }
        let (height, width) = {
            let sv = cx.tape.shape(v);
            if sv.len() != 3 {
                return Err(Error::dimension(format!("RoCo input must be H×W×C, got {sv:?}")));
            }
            (sv[0], sv[1])
        };
        let axes = self.aggregate_axes(cx, v)?;
        let words = self.project_words(cx, l)?;

        // One H×T (resp. W×T) logit matrix per axis serves both the attention
        // over words and the spatial softmax of the prior.
        let tape = &mut cx.tape;
        let row = attention::scores(tape, axes.v_h, words.h_k, LogitSite::Roco)?;
        let row_ctx = tape.matmul(row.weights, words.h_v)?;
        let v_h_att = tape.mul(row_ctx, axes.v_h)?;
        let col = attention::scores(tape, axes.v_w, words.w_k, LogitSite::Roco)?;
        let col_ctx = tape.matmul(col.weights, words.w_v)?;
        let v_w_att = tape.mul(col_ctx, axes.v_w)?;

        let e_h = tape.softmax(row.logits, 0)?;
        let e_w = tape.softmax(col.logits, 0)?;
        let mask_roco = location_prior(tape, e_h, e_w)?;

        Ok(RocoParts {
            axes,
            v_h_att,
            v_w_att,
            prior: LocationPrior { mask_roco, e_h, e_w },
            height,
            width,
        })
    }

    /// Returns `B(v_h) + B(v_w) + B(v_h^att) + B(v_w^att)` and the prior.
    pub fn interact(&self, cx: &mut Ctx, v: Var, l: Var) -> Result<(Var, LocationPrior)> {
        let parts = self.interact_parts(cx, v, l)?;
        let all = sum_expanded(&mut cx.tape, &parts)?;
        Ok((all, parts.prior))
    }
}

/// Per-word outer product of the axis distributions, normalized over H×W.
pub fn location_prior(tape: &mut Tape, e_h: Var, e_w: Var) -> Result<Var> {
    let (sh, sw) = (tape.shape(e_h).to_vec(), tape.shape(e_w).to_vec());
    if sh.len() != 2 || sw.len() != 2 || sh[1] != sw[1] {
        return Err(Error::dimension(format!(
            "axis maps {sh:?} and {sw:?} must share the word extent"
        )));
    }
    let (h, w, t) = (sh[0], sw[0], sh[1]);
    let col = tape.reshape(e_h, &[h, 1, t])?;
    let row = tape.reshape(e_w, &[1, w, t])?;
    let outer = tape.mul(col, row)?;
    let z = tape.sum_axes(outer, &[0, 1])?;
    tape.div(outer, z)
}

/// Bilinear expansion of `H×C` row features to `H×W×C`.
pub fn expand_rows(tape: &mut Tape, v_h: Var, width: usize) -> Result<Var> {
    let s = tape.shape(v_h).to_vec();
    let col = tape.reshape(v_h, &[s[0], 1, s[1]])?;
    tape.bilinear_resize(col, (s[0], width))
}

/// Bilinear expansion of `W×C` column features to `H×W×C`.
pub fn expand_cols(tape: &mut Tape, v_w: Var, height: usize) -> Result<Var> {
    let s = tape.shape(v_w).to_vec();
    let row = tape.reshape(v_w, &[1, s[0], s[1]])?;
    tape.bilinear_resize(row, (height, s[0]))
}

/// The default combination: all four expanded parts summed.
pub fn sum_expanded(tape: &mut Tape, p: &RocoParts) -> Result<Var> {
    let a = expand_rows(tape, p.axes.v_h, p.width)?;
    let b = expand_cols(tape, p.axes.v_w, p.height)?;
    let c = expand_rows(tape, p.v_h_att, p.width)?;
    let d = expand_cols(tape, p.v_w_att, p.height)?;
    let ab = tape.add(a, b)?;
    let abc = tape.add(ab, c)?;
    tape.add(abc, d)
}
