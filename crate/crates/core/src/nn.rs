//! Forward context and the small layer vocabulary shared by every module.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Init, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One forward pass: a fresh tape, read-only parameters, and the dropout
/// source (absent in eval mode).
pub struct Ctx<'a> {
    pub tape: Tape,
    pub store: &'a ParameterStore,
    dropout: Option<Dropout>,
}

#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Self {
        Self {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Inverted-dropout mask: each entry is 0 with probability `p`, else
    /// `1/(1-p)`.
    pub fn mask(&mut self, shape: &[usize]) -> Tensor {
        let keep = 1.0 / (1.0 - self.p);
        let p = self.p;
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| if rng.gen::<f64>() < p { 0.0 } else { keep })
    }
}

impl<'a> Ctx<'a> {
    pub fn eval(store: &'a ParameterStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            dropout: None,
        }
    }

    pub fn train(store: &'a ParameterStore, dropout: Dropout) -> Self {
        Self {
            tape: Tape::new(),
            store,
            dropout: Some(dropout),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.tape.param(self.store, name)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Identity in eval mode.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        match &mut self.dropout {
            Some(d) if d.p > 0.0 => {
                let mask = d.mask(self.tape.shape(x));
                let m = self.tape.constant(mask);
                self.tape.mul(x, m)
            }
            _ => Ok(x),
        }
    }
}

/// Per-position affine map over the last axis (a 1×1 convolution).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn register(
        store: &mut ParameterStore,
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        Self::register_with(store, name, c_in, c_out, Init::FanIn(c_in))
    }

    pub fn register_zeroed(
        store: &mut ParameterStore,
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        Self::register_with(store, name, c_in, c_out, Init::Zeros)
    }

    fn register_with(
        store: &mut ParameterStore,
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        init: Init,
    ) -> Result<Self> {
        let name = name.into();
        store.register(&format!("{name}.weight"), &[c_in, c_out], init)?;
        store.register(&format!("{name}.bias"), &[c_out], init)?;
        Ok(Self { name, c_in, c_out })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        linear(cx, x, &self.name)
    }
}

/// `y = x W + b` at every position, with `W`, `b` looked up as
/// `{name}.weight` / `{name}.bias`.
pub fn linear(cx: &mut Ctx, x: Var, name: &str) -> Result<Var> {
    let w = cx.param(&format!("{name}.weight"))?;
    let b = cx.param(&format!("{name}.bias"))?;
    let c_in = cx.tape.shape(w)[0];
    if cx.tape.shape(x).last() != Some(&c_in) {
        return Err(Error::dimension(format!(
            "linear `{name}` expects last extent {c_in}, got {:?}",
            cx.tape.shape(x)
        )));
    }
    cx.tape.affine(x, w, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_parameter_is_config_error() {
        let store = ParameterStore::new(0);
        let mut cx = Ctx::eval(&store);
        let x = cx.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(linear(&mut cx, x, "missing"), Err(Error::Config(_))));
    }

    #[test]
    fn identity_weights_pass_through() {
        let mut store = ParameterStore::new(0);
        let lin = Linear::register_zeroed(&mut store, "id", 3, 3).unwrap();
        store.set("id.weight", Tensor::eye(3)).unwrap();
        let mut cx = Ctx::eval(&store);
        let input = Tensor::from_fn(&[2, 2, 3], |i| i as f64 * 0.5 - 1.0);
        let x = cx.constant(input.clone());
        let y = lin.forward(&mut cx, x).unwrap();
        assert_eq!(cx.tape.value(y), &input);
    }

    #[test]
    fn zero_weights_emit_bias() {
        let mut store = ParameterStore::new(0);
        let lin = Linear::register_zeroed(&mut store, "b", 2, 3).unwrap();
        store
            .set("b.bias", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        let mut cx = Ctx::eval(&store);
        let x = cx.constant(Tensor::from_fn(&[4, 2], |i| i as f64));
        let y = lin.forward(&mut cx, x).unwrap();
        for row in cx.tape.value(y).data().chunks(3) {
            assert_eq!(row, &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let store = ParameterStore::new(0);
        let mut cx = Ctx::eval(&store);
        let x = cx.constant(Tensor::ones(&[5]));
        assert_eq!(cx.dropout(x).unwrap(), x);
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerNorm {
    pub name: String,
}

impl LayerNorm {
    pub fn register(store: &mut ParameterStore, name: impl Into<String>, channels: usize) -> Result<Self> {
        let name = name.into();
        store.register(&format!("{name}.gain"), &[channels], Init::Constant(1.0))?;
        store.register(&format!("{name}.bias"), &[channels], Init::Zeros)?;
        Ok(Self { name })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let g = cx.param(&format!("{}.gain", self.name))?;
        let b = cx.param(&format!("{}.bias", self.name))?;
        cx.tape.layer_norm(x, g, b)
    }
}
