//! Single-head scaled dot-product attention and the multiplicative gate used
//! by both axis branches of the row/column module.

use crate::error::{Error, Result};
use crate::tape::{LogitSite, Tape, Var};

/// Pre- and post-softmax attention maps for one query set.
#[derive(Debug, Clone, Copy)]
pub struct AttentionScores {
    /// `q×k`, already multiplied by `scale`.
    pub logits: Var,
    /// Softmax of `logits` over the key axis.
    pub weights: Var,
    pub scale: f64,
}

/// Computes `softmax(Q Kᵀ / sqrt(d))`, charging `q·k` logits to `site`.
pub fn scores(tape: &mut Tape, q: Var, k: Var, site: LogitSite) -> Result<AttentionScores> {
    let (sq, sk) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::dimension(format!(
            "attention query {sq:?} and keys {sk:?} must share the feature extent"
        )));
    }
    let scale = 1.0 / (sq[1] as f64).sqrt();
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    let logits = tape.scale(raw, scale);
    tape.count_logits(site, sq[0] * sk[0]);
    let weights = tape.softmax(logits, 1)?;
    Ok(AttentionScores {
        logits,
        weights,
        scale,
    })
}

/// `softmax(Q Kᵀ / sqrt(d)) V`.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, site: LogitSite) -> Result<Var> {
    check_kv(tape, k, v)?;
    let s = scores(tape, q, k, site)?;
    tape.matmul(s.weights, v)
}

/// `attend(v, word_k, word_v) ⊙ v`.
pub fn gated_cross_attend(
    tape: &mut Tape,
    v: Var,
    word_k: Var,
    word_v: Var,
    site: LogitSite,
) -> Result<Var> {
    let (sv, swv) = (tape.shape(v), tape.shape(word_v));
    if sv.len() != 2 || swv.len() != 2 || sv[1] != swv[1] {
        return Err(Error::dimension(format!(
            "gated attention needs matching channels, got visual {sv:?} and values {swv:?}"
        )));
    }
    let att = attend(tape, v, word_k, word_v, site)?;
    tape.mul(att, v)
}

fn check_kv(tape: &Tape, k: Var, v: Var) -> Result<()> {
    let (sk, sv) = (tape.shape(k), tape.shape(v));
    if sk.len() != 2 || sv.len() != 2 || sk[0] != sv[0] {
        return Err(Error::dimension(format!(
            "keys {sk:?} and values {sv:?} must share the key extent"
        )));
    }
    Ok(())
}
