//! The full network: pyramid encoder, word embedding, one interaction block
//! per stage, and the decoder.

use crate::decoder::{Decoder, DecoderWiring};
use crate::error::{Error, Result};
use crate::fusion::{compose_block, BlockSpec, StageBlock, StageOutput};
use crate::metrics::BinaryMask;
use crate::nn::Ctx;
use crate::params::ParameterStore;
use crate::synth::{PyramidEncoder, TextEncoder, WordEmbedding, MAX_TOKENS, VOCAB};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image: (usize, usize),
    pub stages: usize,
    pub channels: usize,
    pub word_dim: usize,
    /// Self-attention layers applied to the word features.
    pub text_layers: usize,
    pub ffn_hidden: usize,
    pub vocab: usize,
    pub max_tokens: usize,
    pub block: BlockSpec,
    pub wiring: DecoderWiring,
    /// Drop padding slots before the interaction blocks so that attention
    /// over words only sees real tokens.
    pub mask_padding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image: (64, 64),
            stages: 4,
            channels: 32,
            word_dim: 32,
            text_layers: 0,
            ffn_hidden: 64,
            vocab: VOCAB.len(),
            max_tokens: MAX_TOKENS,
            block: BlockSpec::full(),
            wiring: DecoderWiring::ConsumeFinest,
            mask_padding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.channels == 0 || self.word_dim == 0 || self.ffn_hidden == 0 {
            return Err(Error::config("stages, channels, word_dim and ffn_hidden must be positive"));
        }
        if self.vocab == 0 || self.max_tokens == 0 {
            return Err(Error::config("vocabulary and token limit must be positive"));
        }
        let g = 4usize
            .checked_shl(self.stages as u32 - 1)
            .filter(|&g| g > 0)
            .ok_or_else(|| Error::config("too many stages"))?;
        let (h, w) = self.image;
        if h == 0 || w == 0 || h % g != 0 || w % g != 0 {
            return Err(Error::config(format!(
                "image {h}×{w} must be a positive multiple of {g} for {} stages",
                self.stages
            )));
        }
        if !(0.0..1.0).contains(&self.block.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `H₀×W₀` foreground probabilities.
    pub scores: Var,
    pub stages: Vec<StageOutput>,
    /// Word features: `T×d_l` with padding masked, else `T_max×d_l`.
    pub words: Var,
}

#[derive(Debug, Clone)]
pub struct Cprn {
    pub config: ModelConfig,
    encoder: PyramidEncoder,
    words: WordEmbedding,
    text: TextEncoder,
    blocks: Vec<StageBlock>,
    decoder: Decoder,
}

impl Cprn {
    /// Registers every parameter in a fresh store seeded with `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<(Self, ParameterStore)> {
        let mut store = ParameterStore::new(seed);
        let model = Self::register(config, &mut store)?;
        Ok((model, store))
    }

    pub fn register(config: ModelConfig, store: &mut ParameterStore) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let encoder = PyramidEncoder::register(store, "encoder", config.stages, c)?;
        let words = WordEmbedding::register(store, "words", config.vocab, config.max_tokens, config.word_dim)?;
        let text = TextEncoder::register(store, "text", config.text_layers, config.word_dim)?;
        let blocks = encoder
            .stage_extents(config.image.0, config.image.1)
            .into_iter()
            .enumerate()
            .map(|(i, (h, w))| {
                compose_block(
                    store,
                    &format!("stage{i}"),
                    config.block,
                    (h, w, c),
                    config.word_dim,
                    config.ffn_hidden,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = Decoder::register(store, "decoder", config.stages, c, config.wiring, config.image)?;
        Ok(Self {
            config,
            encoder,
            words,
            text,
            blocks,
            decoder,
        })
    }

    pub fn blocks(&self) -> &[StageBlock] {
        &self.blocks
    }

    pub fn forward(&self, cx: &mut Ctx, image: &Tensor, tokens: &[usize]) -> Result<ForwardOutput> {
        if tokens.is_empty() {
            return Err(Error::EmptyExpression);
        }
        let (h, w) = self.config.image;
        if image.shape() != [h, w, 3] {
            return Err(Error::dimension(format!(
                "model built for {h}×{w}×3 images, got {:?}",
                image.shape()
            )));
        }
        let mut l = self.words.embed(cx, tokens)?;
        if self.config.mask_padding {
            let rows: Vec<Option<usize>> = (0..tokens.len()).map(Some).collect();
            l = cx.tape.gather_rows(l, &rows)?;
        }
        let l = self.text.encode(cx, l)?;
        let pyramid = self.encoder.encode(cx, image)?;
        let stages = self
            .blocks
            .iter()
            .zip(&pyramid.fused)
            .map(|(block, &v)| block.forward(cx, v, l))
            .collect::<Result<Vec<_>>>()?;
        let features: Vec<Var> = stages.iter().map(|s| s.f).collect();
        let scores = self.decoder.decode(cx, &features)?;
        Ok(ForwardOutput { scores, stages, words: l })
    }

    /// Forward plus mean BCE against `truth`; returns `(loss, scores)`.
    pub fn loss(&self, cx: &mut Ctx, image: &Tensor, tokens: &[usize], truth: &BinaryMask) -> Result<(Var, Var)> {
        let out = self.forward(cx, image, tokens)?;
        let loss = cx.tape.bce(out.scores, &truth.to_tensor())?;
        Ok((loss, out.scores))
    }

    /// Eval-mode score map.
    pub fn predict(&self, store: &ParameterStore, image: &Tensor, tokens: &[usize]) -> Result<Tensor> {
        let mut cx = Ctx::eval(store);
        let out = self.forward(&mut cx, image, tokens)?;
        Ok(cx.tape.value(out.scores).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{FusionKind, Variant};

    fn tiny(variant: Variant, fusion: FusionKind) -> ModelConfig {
        ModelConfig {
            image: (8, 8),
            stages: 2,
            channels: 4,
            word_dim: 4,
            ffn_hidden: 8,
            block: BlockSpec {
                variant,
                fusion,
                ..BlockSpec::full()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn every_composition_produces_a_probability_map() {
        let image = Tensor::from_fn(&[8, 8, 3], |i| (i % 7) as f64 / 7.0);
        for variant in Variant::ALL {
            for fusion in FusionKind::ALL {
                let (m, store) = Cprn::build(tiny(variant, fusion), 1).unwrap();
                let s = m.predict(&store, &image, &[0, 3, 7]).unwrap();
                assert_eq!(s.shape(), &[8, 8]);
                assert!(s.data().iter().all(|&p| p > 0.0 && p < 1.0), "{variant} {fusion}");
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (m, store) = Cprn::build(tiny(Variant::ParallelGuided, FusionKind::Eq5), 1).unwrap();
        let image = Tensor::zeros(&[8, 8, 3]);
        assert!(matches!(m.predict(&store, &image, &[]), Err(Error::EmptyExpression)));
        assert!(m.predict(&store, &Tensor::zeros(&[16, 16, 3]), &[1]).is_err());
        let bad = ModelConfig {
            image: (12, 12),
            ..tiny(Variant::ParallelGuided, FusionKind::Eq5)
        };
        assert!(Cprn::build(bad, 0).is_err());
    }
}
