//! Coarse-to-fine decoder over the per-stage fused features, the sigmoid
//! segmentation head, and the pixel-averaged BCE loss.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::params::ParameterStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which stage feature is concatenated at each decoder level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecoderWiring {
    /// `Y_i = proj([up(Y_{i+1}), F_i])`: every stage, including the finest,
    /// enters the decoder.
    #[default]
    ConsumeFinest,
    /// `Y_i = up(proj([Y_{i+1}, F_{i+1}]))`: the finest stage is never read.
    Literal,
}

impl fmt::Display for DecoderWiring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ConsumeFinest => "consume_finest",
            Self::Literal => "literal",
        })
    }
}

impl FromStr for DecoderWiring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "consume_finest" => Ok(Self::ConsumeFinest),
            "literal" => Ok(Self::Literal),
            _ => Err(Error::config(format!("unknown decoder wiring `{s}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    projs: Vec<Linear>,
    head: Linear,
    pub wiring: DecoderWiring,
    pub output: (usize, usize),
}

impl Decoder {
    /// `stages` fused maps of `channels` each; the score map is resampled to
    /// `output`.
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        stages: usize,
        channels: usize,
        wiring: DecoderWiring,
        output: (usize, usize),
    ) -> Result<Self> {
        if stages == 0 {
            return Err(Error::config("decoder needs at least one stage"));
        }
        let projs = (0..stages - 1)
            .map(|i| Linear::register(store, format!("{prefix}.proj{i}"), 2 * channels, channels))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::register(store, format!("{prefix}.head"), channels, 1)?;
        Ok(Self {
            projs,
            head,
            wiring,
            output,
        })
    }

    pub fn stages(&self) -> usize {
        self.projs.len() + 1
    }

    /// `features[0]` is the finest stage; each next stage halves H and W.
    /// Returns the `H₀×W₀` score map in (0, 1).
    pub fn decode(&self, cx: &mut Ctx, features: &[Var]) -> Result<Var> {
        let top = self.fuse_levels(cx, features)?;
        let logits = self.head.forward(cx, top)?;
        let probs = cx.tape.sigmoid(logits);
        let up = cx.tape.bilinear_resize(probs, self.output)?;
        cx.tape.reshape(up, &[self.output.0, self.output.1])
    }

    /// The finest decoder feature `Y_1`.
    pub fn fuse_levels(&self, cx: &mut Ctx, features: &[Var]) -> Result<Var> {
        check_pyramid(&cx.tape, features, self.stages())?;
        let n = features.len();
        let mut y = features[n - 1];
        for i in (0..n - 1).rev() {
            let proj = &self.projs[i];
            y = match self.wiring {
                DecoderWiring::ConsumeFinest => {
                    let s = cx.tape.shape(features[i]).to_vec();
                    let up = cx.tape.bilinear_resize(y, (s[0], s[1]))?;
                    let cat = cx.tape.concat(up, features[i])?;
                    let p = proj.forward(cx, cat)?;
                    cx.tape.relu(p)
                }
                DecoderWiring::Literal => {
                    let s = cx.tape.shape(features[i]).to_vec();
                    let cat = cx.tape.concat(y, features[i + 1])?;
                    let p = proj.forward(cx, cat)?;
                    let p = cx.tape.relu(p);
                    cx.tape.bilinear_resize(p, (s[0], s[1]))?
                }
            };
        }
        Ok(y)
    }
}

fn check_pyramid(tape: &Tape, features: &[Var], expected: usize) -> Result<()> {
    if features.len() != expected {
        return Err(Error::dimension(format!(
            "decoder built for {expected} stages, got {}",
            features.len()
        )));
    }
    for pair in features.windows(2) {
        let (fine, coarse) = (tape.shape(pair[0]), tape.shape(pair[1]));
        if fine.len() != 3
            || coarse.len() != 3
            || fine[0] != 2 * coarse[0]
            || fine[1] != 2 * coarse[1]
            || fine[2] != coarse[2]
        {
            return Err(Error::dimension(format!(
                "inconsistent pyramid: {fine:?} above {coarse:?}"
            )));
        }
    }
    Ok(())
}

/// Mean binary cross-entropy of a score map against a 0/1 mask.
pub fn bce_loss(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::dimension("bce predictions must lie in [0, 1]"));
    }
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = tape.bce(p, truth)?;
    Ok(tape.value(l).item())
}
