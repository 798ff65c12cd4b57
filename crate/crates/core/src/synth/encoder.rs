//! Toy visual pyramid encoder with 8-D coordinate features, and the word
//! lookup table.

use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear};
use crate::params::{Init, ParameterStore};
use crate::attention::attend;
use crate::tape::{LogitSite, Var};
use crate::tensor::Tensor;

/// Per-cell `[x_min, y_min, x_max, y_max, x_ctr, y_ctr, 1/W, 1/H]`, positions
/// normalized to `[-1, 1]`.
pub fn coord_features(height: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros(&[height, width, 8]);
    let (hf, wf) = (height as f64, width as f64);
    for y in 0..height {
        for x in 0..width {
            let x_min = 2.0 * x as f64 / wf - 1.0;
            let x_max = 2.0 * (x + 1) as f64 / wf - 1.0;
            let y_min = 2.0 * y as f64 / hf - 1.0;
            let y_max = 2.0 * (y + 1) as f64 / hf - 1.0;
            let cell = [
                x_min,
                y_min,
                x_max,
                y_max,
                (x_min + x_max) / 2.0,
                (y_min + y_max) / 2.0,
                1.0 / wf,
                1.0 / hf,
            ];
            let base = (y * width + x) * 8;
            t.data_mut()[base..base + 8].copy_from_slice(&cell);
        }
    }
    t
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// Stage outputs before the coordinate mix, finest first.
    pub raw: Vec<Var>,
    /// Fused `V_i`, finest first.
    pub fused: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct PyramidEncoder {
    patch: Vec<Linear>,
    mix: Vec<Linear>,
    norm: Vec<LayerNorm>,
    fuse: Vec<Linear>,
    channels: usize,
}

impl PyramidEncoder {
    /// Stage 0 has stride 4; each further stage doubles the stride.
    pub fn register(store: &mut ParameterStore, prefix: &str, stages: usize, channels: usize) -> Result<Self> {
        if stages == 0 || channels == 0 {
            return Err(Error::config("encoder needs at least one stage and one channel"));
        }
        let mut patch = Vec::new();
        let mut mix = Vec::new();
        let mut norm = Vec::new();
        let mut fuse = Vec::new();
        for i in 0..stages {
            let c_in = if i == 0 { 4 * 4 * 3 } else { 4 * channels };
            patch.push(Linear::register(store, format!("{prefix}.patch{i}"), c_in, channels)?);
            mix.push(Linear::register(store, format!("{prefix}.mix{i}"), channels, channels)?);
            norm.push(LayerNorm::register(store, format!("{prefix}.norm{i}"), channels)?);
            fuse.push(Linear::register(store, format!("{prefix}.fuse{i}"), channels + 8, channels)?);
        }
        Ok(Self {
            patch,
            mix,
            norm,
            fuse,
            channels,
        })
    }

    pub fn stages(&self) -> usize {
        self.patch.len()
    }

    /// Image extents must be divisible by this.
    pub fn granularity(&self) -> usize {
        4 << (self.stages() - 1)
    }

    /// `(H_i, W_i)` of every stage for an `height×width` image.
    pub fn stage_extents(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        (0..self.stages())
            .map(|i| (height >> (2 + i), width >> (2 + i)))
            .collect()
    }

    pub fn encode(&self, cx: &mut Ctx, image: &Tensor) -> Result<FeaturePyramid> {
        let s = image.shape();
        let g = self.granularity();
        if s.len() != 3 || s[2] != 3 || s[0] % g != 0 || s[1] % g != 0 || s[0] == 0 || s[1] == 0 {
            return Err(Error::dimension(format!(
                "image must be H×W×3 with H, W positive multiples of {g}, got {s:?}"
            )));
        }
        let centered = image.map(|v| v - 0.5);
        let mut x = cx.constant(centered);
        let mut raw = Vec::new();
        let mut fused = Vec::new();
        for i in 0..self.stages() {
            let patches = cx.tape.space_to_depth(x, if i == 0 { 4 } else { 2 })?;
            let p = self.patch[i].forward(cx, patches)?;
            let p = cx.tape.gelu(p);
            let m = self.mix[i].forward(cx, p)?;
            let m = cx.tape.gelu(m);
            let r = cx.tape.add(p, m)?;
            let r = self.norm[i].forward(cx, r)?;
            let sh = cx.tape.shape(r).to_vec();
            debug_assert_eq!(sh[2], self.channels);
            let coords = cx.constant(coord_features(sh[0], sh[1]));
            let cat = cx.tape.concat(r, coords)?;
            fused.push(self.fuse[i].forward(cx, cat)?);
            raw.push(r);
            x = r;
        }
        Ok(FeaturePyramid { raw, fused })
    }
}

/// Trainable lookup table plus a learned per-slot offset. Padding slots
/// embed to zero.
#[derive(Debug, Clone)]
pub struct WordEmbedding {
    table: String,
    position: String,
    vocab: usize,
    max_len: usize,
    dim: usize,
}

impl WordEmbedding {
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        vocab: usize,
        max_len: usize,
        dim: usize,
    ) -> Result<Self> {
        let table = format!("{prefix}.table");
        let position = format!("{prefix}.position");
        store.register(&table, &[vocab, dim], Init::FanIn(1))?;
        store.register(&position, &[max_len, dim], Init::Constant(0.0))?;
        Ok(Self {
            table,
            position,
            vocab,
            max_len,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// `max_len × dim` embedding of `tokens`, zero rows after the last token.
    pub fn embed(&self, cx: &mut Ctx, tokens: &[usize]) -> Result<Var> {
        if tokens.len() > self.max_len {
            return Err(Error::config(format!(
                "expression has {} tokens, limit is {}",
                tokens.len(),
                self.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::config(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab
            )));
        }
        let ids: Vec<Option<usize>> = (0..self.max_len).map(|i| tokens.get(i).copied()).collect();
        let slots: Vec<Option<usize>> = (0..self.max_len)
            .map(|i| (i < tokens.len()).then_some(i))
            .collect();
        let table = cx.param(&self.table)?;
        let words = cx.tape.gather_rows(table, &ids)?;
        let position = cx.param(&self.position)?;
        let offsets = cx.tape.gather_rows(position, &slots)?;
        cx.tape.add(words, offsets)
    }
}


/// Contextualizes word features with residual self-attention + MLP layers,
/// so each word carries information about the rest of the expression.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    layers: Vec<TextLayer>,
    norm: Option<LayerNorm>,
}

#[derive(Debug, Clone)]
struct TextLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    inner: Linear,
    outer: Linear,
}

impl TextEncoder {
    pub fn register(store: &mut ParameterStore, prefix: &str, layers: usize, dim: usize) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| {
                let p = format!("{prefix}.layer{i}");
                Ok(TextLayer {
                    q: Linear::register(store, format!("{p}.q"), dim, dim)?,
                    k: Linear::register(store, format!("{p}.k"), dim, dim)?,
                    v: Linear::register(store, format!("{p}.v"), dim, dim)?,
                    out: Linear::register(store, format!("{p}.out"), dim, dim)?,
                    inner: Linear::register(store, format!("{p}.inner"), dim, 2 * dim)?,
                    outer: Linear::register(store, format!("{p}.outer"), 2 * dim, dim)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = if layers.is_empty() {
            None
        } else {
            Some(LayerNorm::register(store, format!("{prefix}.norm"), dim)?)
        };
        Ok(Self { layers, norm })
    }

    /// `T×d → T×d`; the identity when built with zero layers.
    pub fn encode(&self, cx: &mut Ctx, words: Var) -> Result<Var> {
        let mut x = words;
        for layer in &self.layers {
            let q = layer.q.forward(cx, x)?;
            let k = layer.k.forward(cx, x)?;
            let v = layer.v.forward(cx, x)?;
            let a = attend(&mut cx.tape, q, k, v, LogitSite::Other)?;
            let a = layer.out.forward(cx, a)?;
            x = cx.tape.add(x, a)?;
            let h = layer.inner.forward(cx, x)?;
            let h = cx.tape.gelu(h);
            let h = layer.outer.forward(cx, h)?;
            x = cx.tape.add(x, h)?;
        }
        match &self.norm {
            Some(norm) => norm.forward(cx, x),
            None => Ok(x),
        }
    }
}
