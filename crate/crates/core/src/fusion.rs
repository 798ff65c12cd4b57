//! Pathway merging, the alternative row/column combination functions, and
//! the block compositions compared in the ablation harness.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::holi::{Guidance, Holi};
use crate::nn::{Ctx, Linear};
use crate::params::{Init, ParameterStore};
use crate::roco::{expand_cols, expand_rows, sum_expanded, Roco, RocoParts};
use crate::tape::Var;
use crate::tensor::Tensor;

/// How the row/column parts are combined into an `H×W×C` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionKind {
    /// `B(v_h) + B(v_w) + B(v_h^att) + B(v_w^att)`.
    Eq5,
    /// `B(v_h^att) ⊙ B(v_w^att) + V`.
    F1,
    /// `B(v_h^att) ⊙ B(v_w^att) ⊙ V`.
    F2,
    /// `C(B(v_h + v_h^att), B(v_w + v_w^att))`.
    F3,
    /// `C(C(B(v_h), B(v_h^att)), C(B(v_w), B(v_w^att)))`.
    F4,
}

impl FusionKind {
    pub const ALL: [FusionKind; 5] = [Self::F1, Self::F2, Self::F3, Self::F4, Self::Eq5];
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Eq5 => "eq5",
            Self::F1 => "f1",
            Self::F2 => "f2",
            Self::F3 => "f3",
            Self::F4 => "f4",
        })
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eq5" => Ok(Self::Eq5),
            "f1" => Ok(Self::F1),
            "f2" => Ok(Self::F2),
            "f3" => Ok(Self::F3),
            "f4" => Ok(Self::F4),
            _ => Err(Error::config(format!("unknown fusion kind `{s}`"))),
        }
    }
}

/// Block composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Plain pixel–word cross-attention only.
    HoliStar,
    /// Row/column branch only.
    RocoOnly,
    /// Row/column output feeds the plain holistic branch.
    Serial,
    /// Both branches side by side, holistic branch unguided.
    ParallelStar,
    /// Both branches, holistic attention guided by the location prior.
    ParallelGuided,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Self::HoliStar,
        Self::RocoOnly,
        Self::Serial,
        Self::ParallelStar,
        Self::ParallelGuided,
    ];

    fn uses_roco(self) -> bool {
        !matches!(self, Self::HoliStar)
    }

    fn uses_holi(self) -> bool {
        !matches!(self, Self::RocoOnly)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::HoliStar => "holi_star",
            Self::RocoOnly => "roco_only",
            Self::Serial => "serial",
            Self::ParallelStar => "parallel_star",
            Self::ParallelGuided => "parallel_guided",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::config(format!("unknown block variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSpec {
    pub variant: Variant,
    pub ffn: bool,
    pub ape: bool,
    pub fusion: FusionKind,
    pub renormalize_roho: bool,
    pub dropout: f64,
}

impl BlockSpec {
    /// The full network: guided parallel branches, FFN merge, position embedding.
    pub fn full() -> Self {
        Self {
            variant: Variant::ParallelGuided,
            ffn: true,
            ape: true,
            fusion: FusionKind::Eq5,
            renormalize_roho: false,
            dropout: 0.1,
        }
    }
}

/// Output of one stage block.
#[derive(Debug, Clone, Copy)]
pub struct StageOutput {
    /// `H×W×C`, same extents as the stage input.
    pub f: Var,
    pub mask_roco: Option<Var>,
    pub mask_holi: Option<Var>,
    pub mask_roho: Option<Var>,
}

/// Projection + ReLU on both pathways, optional FFN, residual onto `V`.
#[derive(Debug, Clone)]
pub struct Merge {
    proj_hw: Linear,
    proj_g: Linear,
    ffn: Option<(Linear, Linear)>,
}

impl Merge {
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        channels: usize,
        ffn_hidden: Option<usize>,
    ) -> Result<Self> {
        let c = channels;
        let ffn = match ffn_hidden {
            Some(hidden) => Some((
                Linear::register(store, format!("{prefix}.ffn_in"), c, hidden)?,
                // Zeroed so the block starts as the identity on V.
                Linear::register_zeroed(store, format!("{prefix}.ffn_out"), hidden, c)?,
            )),
            None => None,
        };
        Ok(Self {
            proj_hw: Linear::register(store, format!("{prefix}.proj_hw"), c, c)?,
            proj_g: Linear::register(store, format!("{prefix}.proj_g"), c, c)?,
            ffn,
        })
    }

    /// `F = V + FFN(ReLU(proj(v_hw_all)) + ReLU(proj(v_g_all)))`.
    pub fn forward(&self, cx: &mut Ctx, v_hw_all: Var, v_g_all: Var, v: Var) -> Result<Var> {
        let shape = cx.tape.shape(v).to_vec();
        for x in [v_hw_all, v_g_all] {
            if cx.tape.shape(x) != shape.as_slice() {
                return Err(Error::dimension(format!(
                    "merge inputs must match V {shape:?}, got {:?}",
                    cx.tape.shape(x)
                )));
            }
        }
        let f_hw = self.proj_hw.forward(cx, v_hw_all)?;
        let f_hw = cx.tape.relu(f_hw);
        let f_g = self.proj_g.forward(cx, v_g_all)?;
        let f_g = cx.tape.relu(f_g);
        let mut joint = cx.tape.add(f_hw, f_g)?;
        if let Some((inner, outer)) = &self.ffn {
            let h = inner.forward(cx, joint)?;
            let h = cx.tape.relu(h);
            let h = cx.dropout(h)?;
            joint = outer.forward(cx, h)?;
        }
        cx.tape.add(v, joint)
    }
}

/// Extra projections needed by the concatenating combinations.
#[derive(Debug, Clone)]
enum FusionParams {
    None,
    F3(Linear),
    F4 { rows: Linear, cols: Linear, out: Linear },
}

impl FusionParams {
    fn register(store: &mut ParameterStore, prefix: &str, kind: FusionKind, c: usize) -> Result<Self> {
        Ok(match kind {
            FusionKind::F3 => Self::F3(Linear::register(store, format!("{prefix}.f3"), 2 * c, c)?),
            FusionKind::F4 => Self::F4 {
                rows: Linear::register(store, format!("{prefix}.f4_rows"), 2 * c, c)?,
                cols: Linear::register(store, format!("{prefix}.f4_cols"), 2 * c, c)?,
                out: Linear::register(store, format!("{prefix}.f4_out"), 2 * c, c)?,
            },
            _ => Self::None,
        })
    }
}

/// Combines row/column parts into an `H×W×C` map according to `kind`.
fn fuse(cx: &mut Ctx, kind: FusionKind, params: &FusionParams, p: &RocoParts, v: Var) -> Result<Var> {
    let tape = &mut cx.tape;
    let (h, w) = (p.height, p.width);
    match kind {
        FusionKind::Eq5 => sum_expanded(tape, p),
        FusionKind::F1 | FusionKind::F2 => {
            let rows = expand_rows(tape, p.v_h_att, w)?;
            let cols = expand_cols(tape, p.v_w_att, h)?;
            let grid = tape.mul(rows, cols)?;
            if kind == FusionKind::F1 {
                tape.add(grid, v)
            } else {
                tape.mul(grid, v)
            }
        }
        FusionKind::F3 => {
            let FusionParams::F3(proj) = params else {
                return Err(Error::config("f3 projection not registered"));
            };
            let rows = tape.add(p.axes.v_h, p.v_h_att)?;
            let rows = expand_rows(tape, rows, w)?;
            let cols = tape.add(p.axes.v_w, p.v_w_att)?;
            let cols = expand_cols(tape, cols, h)?;
            let cat = tape.concat(rows, cols)?;
            proj.forward(cx, cat)
        }
        FusionKind::F4 => {
            let FusionParams::F4 { rows, cols, out } = params else {
                return Err(Error::config("f4 projections not registered"));
            };
            let a = expand_rows(tape, p.axes.v_h, w)?;
            let b = expand_rows(tape, p.v_h_att, w)?;
            let ab = tape.concat(a, b)?;
            let c = expand_cols(tape, p.axes.v_w, h)?;
            let d = expand_cols(tape, p.v_w_att, h)?;
            let cd = cx.tape.concat(c, d)?;
            let r = rows.forward(cx, ab)?;
            let k = cols.forward(cx, cd)?;
            let cat = cx.tape.concat(r, k)?;
            out.forward(cx, cat)
        }
    }
}

/// Combines row/column parts using the block's configured fusion kind.
pub fn fuse_variant(
    cx: &mut Ctx,
    block: &StageBlock,
    parts: &RocoParts,
    v: Var,
) -> Result<Var> {
    fuse(cx, block.spec.fusion, &block.fusion, parts, v)
}

/// A configured stage: parameters plus wiring for one composition.
#[derive(Debug, Clone)]
pub struct StageBlock {
    pub spec: BlockSpec,
    pub prefix: String,
    pub extents: (usize, usize, usize),
    roco: Option<Roco>,
    holi: Option<Holi>,
    merge: Merge,
    fusion: FusionParams,
    ape: Option<String>,
}

/// Registers the parameters for `spec` at a stage of extents `H×W×C` and
/// returns the stage function.
pub fn compose_block(
    store: &mut ParameterStore,
    prefix: &str,
    spec: BlockSpec,
    extents: (usize, usize, usize),
    word_dim: usize,
    ffn_hidden: usize,
) -> Result<StageBlock> {
    let (h, w, c) = extents;
    if !(0.0..1.0).contains(&spec.dropout) {
        return Err(Error::config(format!("dropout {} outside [0, 1)", spec.dropout)));
    }
    let roco = if spec.variant.uses_roco() {
        Some(Roco::register(store, &format!("{prefix}.roco"), c, word_dim)?)
    } else {
        None
    };
    let holi = if spec.variant.uses_holi() {
        Some(Holi::register(
            store,
            &format!("{prefix}.holi"),
            c,
            word_dim,
            spec.renormalize_roho,
        )?)
    } else {
        None
    };
    let fusion = if spec.variant.uses_roco() {
        FusionParams::register(store, prefix, spec.fusion, c)?
    } else {
        FusionParams::None
    };
    let merge = Merge::register(store, &format!("{prefix}.merge"), c, spec.ffn.then_some(ffn_hidden))?;
    let ape = if spec.ape {
        let name = format!("{prefix}.ape");
        store.register(&name, &[h, w, c], Init::Zeros)?;
        Some(name)
    } else {
        None
    };
    Ok(StageBlock {
        spec,
        prefix: prefix.to_string(),
        extents,
        roco,
        holi,
        merge,
        fusion,
        ape,
    })
}

impl StageBlock {
    pub fn roco(&self) -> Option<&Roco> {
        self.roco.as_ref()
    }

    pub fn holi(&self) -> Option<&Holi> {
        self.holi.as_ref()
    }

    pub fn merge(&self) -> &Merge {
        &self.merge
    }

    /// Adds the learned position embedding when enabled.
    pub fn with_position(&self, cx: &mut Ctx, v: Var) -> Result<Var> {
        match &self.ape {
            Some(name) => {
                let ape = cx.param(name)?;
                cx.tape.add(v, ape)
            }
            None => Ok(v),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, v: Var, l: Var) -> Result<StageOutput> {
        let (h, w, c) = self.extents;
        if cx.tape.shape(v) != [h, w, c] {
            return Err(Error::dimension(format!(
                "stage `{}` built for {:?}, got {:?}",
                self.prefix,
                [h, w, c],
                cx.tape.shape(v)
            )));
        }
        let v = self.with_position(cx, v)?;
        let mut out = StageOutput {
            f: v,
            mask_roco: None,
            mask_holi: None,
            mask_roho: None,
        };

        let roco = match &self.roco {
            Some(r) => {
                let parts = r.interact_parts(cx, v, l)?;
                let all = fuse(cx, self.spec.fusion, &self.fusion, &parts, v)?;
                out.mask_roco = Some(parts.prior.mask_roco);
                Some((all, parts.prior.mask_roco))
            }
            None => None,
        };

        let (v_hw_all, v_g_all) = match (self.spec.variant, roco, &self.holi) {
            (Variant::RocoOnly, Some((all, _)), _) => (all, self.zeros(cx)),
            (Variant::HoliStar, _, Some(holi)) => {
                let (g, masks) = holi.forward(cx, v, l, Guidance::None)?;
                out.mask_holi = Some(masks.mask_holi);
                (self.zeros(cx), g)
            }
            (Variant::Serial, Some((all, _)), Some(holi)) => {
                let (g, masks) = holi.forward(cx, all, l, Guidance::None)?;
                out.mask_holi = Some(masks.mask_holi);
                (self.zeros(cx), g)
            }
            (Variant::ParallelStar, Some((all, _)), Some(holi)) => {
                let (g, masks) = holi.forward(cx, v, l, Guidance::None)?;
                out.mask_holi = Some(masks.mask_holi);
                (all, g)
            }
            (Variant::ParallelGuided, Some((all, prior)), Some(holi)) => {
                let (g, masks) = holi.forward(cx, v, l, Guidance::Prior(prior))?;
                out.mask_holi = Some(masks.mask_holi);
                out.mask_roho = Some(masks.mask_roho);
                (all, g)
            }
            _ => unreachable!("branches are registered according to the variant"),
        };
        out.f = self.merge.forward(cx, v_hw_all, v_g_all, v)?;
        Ok(out)
    }

    fn zeros(&self, cx: &mut Ctx) -> Var {
        let (h, w, c) = self.extents;
        cx.constant(Tensor::zeros(&[h, w, c]))
    }
}
