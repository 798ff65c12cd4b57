//! Synthetic referring-segmentation benchmark: coloured shapes on a dark
//! canvas, each paired with an expression that picks out exactly one shape.

mod encoder;
mod grammar;
mod io;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

pub use encoder::{coord_features, FeaturePyramid, PyramidEncoder, TextEncoder, WordEmbedding};
pub use grammar::{resolve, token_id, vocabulary, VOCAB};
pub use io::{load_dataset, read_pgm, read_ppm, save_dataset, write_pgm, write_ppm, DATASET_VERSION};

/// Mask-area ratio below which a referent counts as small.
pub const SMALL_MASK_RATIO: f64 = 0.03;
/// Token count above which an expression counts as complex.
pub const COMPLEX_TOKEN_LENGTH: usize = 18;
pub const MAX_TOKENS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Self::Red, Self::Green, Self::Blue, Self::Yellow];

    fn rgb(self) -> [f64; 3] {
        match self {
            Self::Red => [0.9, 0.15, 0.15],
            Self::Green => [0.15, 0.8, 0.2],
            Self::Blue => [0.2, 0.3, 0.95],
            Self::Yellow => [0.95, 0.9, 0.15],
        }
    }
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [Self::Circle, Self::Square, Self::Triangle];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Large,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub shape: ShapeKind,
    pub color: Color,
    pub size: SizeClass,
    /// Pixel-space centre `(x, y)`.
    pub center: (f64, f64),
    /// Circle radius, square half-side, triangle half-height.
    pub extent: f64,
}

impl Object {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.center.0, py - self.center.1);
        let r = self.extent;
        match self.shape {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            // Apex up, base on `cy + r`, base width `2r`.
            ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }

    pub fn rasterize(&self, height: usize, width: usize) -> BinaryMask {
        let bits = (0..height * width)
            .map(|i| {
                let (y, x) = (i / width, i % width);
                self.contains(x as f64 + 0.5, y as f64 + 0.5)
            })
            .collect();
        BinaryMask {
            height,
            width,
            bits,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `H₀×W₀×3`, values on the 8-bit grid `k/255`.
    pub image: Tensor,
    pub objects: Vec<Object>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn masks(&self) -> Vec<BinaryMask> {
        self.objects
            .iter()
            .map(|o| o.rasterize(self.height(), self.width()))
            .collect()
    }

    /// Whether no two object masks share a pixel.
    pub fn disjoint(&self) -> bool {
        let masks = self.masks();
        (0..self.height() * self.width()).all(|p| masks.iter().filter(|m| m.bits[p]).count() <= 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub scene: Scene,
    pub tokens: Vec<usize>,
    pub referent: usize,
    pub mask: BinaryMask,
    pub mask_ratio: f64,
}

impl Sample {
    pub fn token_length(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_small(&self) -> bool {
        self.mask_ratio < SMALL_MASK_RATIO
    }

    pub fn is_complex(&self) -> bool {
        self.token_length() > COMPLEX_TOKEN_LENGTH
    }

    pub fn text(&self) -> String {
        self.tokens
            .iter()
            .map(|&t| VOCAB[t])
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Evaluation subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    All,
    SmallScale,
    ComplexLanguage,
}

impl Split {
    pub const ALL: [Split; 3] = [Self::All, Self::SmallScale, Self::ComplexLanguage];

    pub fn contains(self, s: &Sample) -> bool {
        match self {
            Self::All => true,
            Self::SmallScale => s.is_small(),
            Self::ComplexLanguage => s.is_complex(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::SmallScale => "small_scale",
            Self::ComplexLanguage => "complex_language",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::config(format!("unknown split `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub objects: usize,
    /// Fraction of samples whose referent is small (mask ratio < 0.03).
    pub small_fraction: f64,
    /// Fraction of samples with a two-relation expression (> 18 tokens).
    pub complex_fraction: f64,
    /// Among the rest: fraction with one spatial relation.
    pub relation_fraction: f64,
    /// Among the rest: fraction using an ordinal.
    pub ordinal_fraction: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            objects: 3,
            small_fraction: 0.2,
            complex_fraction: 0.1,
            relation_fraction: 0.2,
            ordinal_fraction: 0.1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::config("canvas must be at least 16×16"));
        }
        if !(2..=5).contains(&self.objects) {
            return Err(Error::config("scenes hold between 2 and 5 objects"));
        }
        for (name, f) in [
            ("small_fraction", self.small_fraction),
            ("complex_fraction", self.complex_fraction),
            ("relation_fraction", self.relation_fraction),
            ("ordinal_fraction", self.ordinal_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.relation_fraction + self.ordinal_fraction > 1.0 {
            return Err(Error::config("relation_fraction + ordinal_fraction exceeds 1"));
        }
        Ok(())
    }

    fn extent_range(&self, size: SizeClass, shape: ShapeKind) -> (f64, f64) {
        // Scaled to the canvas; small masks stay below 3% of the image and
        // large ones above it for every shape.
        let side = self.height.min(self.width) as f64 / 64.0;
        match (size, shape) {
            (SizeClass::Small, ShapeKind::Triangle) => (3.5 * side, 5.0 * side),
            (SizeClass::Small, _) => (3.0 * side, 4.2 * side),
            (SizeClass::Large, ShapeKind::Triangle) => (11.0 * side, 14.0 * side),
            (SizeClass::Large, _) => (9.0 * side, 13.0 * side),
        }
    }
}

/// What kind of expression a sample is asked to carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Form {
    Attribute,
    Relation,
    Ordinal,
    Complex,
}

/// Deterministic dataset of `count` samples. Each sample draws from its own
/// stream of the seeded generator, so samples are independent of `count`.
pub fn generate(seed: u64, count: usize, cfg: &GeneratorConfig) -> Result<Vec<Sample>> {
    generate_range(seed, 0..count, cfg)
}

/// Samples with ids in `ids`; disjoint ranges give disjoint splits.
pub fn generate_range(seed: u64, ids: std::ops::Range<usize>, cfg: &GeneratorConfig) -> Result<Vec<Sample>> {
    if ids.is_empty() {
        return Err(Error::config("count must be at least 1"));
    }
    cfg.validate()?;
    ids.map(|id| generate_one(seed, id, cfg)).collect()
}

pub fn generate_one(seed: u64, id: usize, cfg: &GeneratorConfig) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);

    let small = rng.gen_bool(cfg.small_fraction);
    let form = if rng.gen_bool(cfg.complex_fraction) {
        Form::Complex
    } else {
        let u: f64 = rng.gen();
        if u < cfg.relation_fraction {
            Form::Relation
        } else if u < cfg.relation_fraction + cfg.ordinal_fraction {
            Form::Ordinal
        } else {
            Form::Attribute
        }
    };

    for _ in 0..10_000 {
        let Some(objects) = place_objects(&mut rng, cfg, small) else {
            continue;
        };
        let referent = 0;
        let tokens = match form {
            Form::Complex => grammar::complex(&objects, referent, &mut rng),
            Form::Relation => grammar::relational(&objects, referent, &mut rng)
                .or_else(|| grammar::attribute(&objects, referent)),
            Form::Ordinal => grammar::ordinal(&objects, referent, &mut rng)
                .or_else(|| grammar::attribute(&objects, referent)),
            Form::Attribute => grammar::attribute(&objects, referent),
        };
        let Some(tokens) = tokens else { continue };
        debug_assert_eq!(resolve(&tokens, &objects).ok(), Some(vec![referent]));

        // Shuffle draw order so the referent index carries no information.
        let mut order: Vec<usize> = (0..objects.len()).collect();
        order.shuffle(&mut rng);
        let objects: Vec<Object> = order.iter().map(|&i| objects[i].clone()).collect();
        let referent = order.iter().position(|&i| i == referent).unwrap();

        let image = render(&objects, cfg, &mut rng);
        let scene = Scene { image, objects };
        let mask = scene.objects[referent].rasterize(cfg.height, cfg.width);
        let mask_ratio = mask.area_ratio();
        return Ok(Sample {
            id,
            scene,
            tokens,
            referent,
            mask,
            mask_ratio,
        });
    }
    Err(Error::config(format!(
        "could not build sample {id} under the generator constraints"
    )))
}

/// Object 0 is the referent; at least two objects share a shape.
/// Mirrors the scene left to right and swaps `left`/`right` in the
/// expression, so the same object stays the referent.
pub fn flip_horizontal(sample: &Sample) -> Sample {
    let (h, w) = (sample.scene.height(), sample.scene.width());
    let src = sample.scene.image.data();
    let mut image = Tensor::zeros(&[h, w, 3]);
    for y in 0..h {
        for x in 0..w {
            let (to, from) = ((y * w + x) * 3, (y * w + w - 1 - x) * 3);
            image.data_mut()[to..to + 3].copy_from_slice(&src[from..from + 3]);
        }
    }
    let objects = sample
        .scene
        .objects
        .iter()
        .map(|o| Object {
            center: (w as f64 - o.center.0, o.center.1),
            ..o.clone()
        })
        .collect();
    let mask_bits = (0..h * w)
        .map(|p| sample.mask.bits[(p / w) * w + w - 1 - p % w])
        .collect();
    let (left, right) = (token_id("left"), token_id("right"));
    let tokens = sample
        .tokens
        .iter()
        .map(|&t| match Some(t) {
            x if x == left => right.unwrap_or(t),
            x if x == right => left.unwrap_or(t),
            _ => t,
        })
        .collect();
    Sample {
        id: sample.id,
        scene: Scene { image, objects },
        tokens,
        referent: sample.referent,
        mask: BinaryMask {
            height: h,
            width: w,
            bits: mask_bits,
        },
        mask_ratio: sample.mask_ratio,
    }
}

/// Inclusive `(min, max)` shifts along `(y, x)` that keep every object
/// pixel inside the canvas.
pub fn shift_range(sample: &Sample) -> ((isize, isize), (isize, isize)) {
    let (h, w) = (sample.scene.height(), sample.scene.width());
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    for m in sample.scene.masks() {
        for (p, _) in m.bits.iter().enumerate().filter(|(_, &b)| b) {
            let (y, x) = (p / w, p % w);
            y0 = y0.min(y);
            y1 = y1.max(y);
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
    }
    if y0 > y1 {
        return ((0, 0), (0, 0));
    }
    (
        (-(y0 as isize), (h - 1 - y1) as isize),
        (-(x0 as isize), (w - 1 - x1) as isize),
    )
}

/// Rolls the canvas by `(dy, dx)` pixels. Positions and relations are
/// unchanged as long as the shift lies within [`shift_range`].
pub fn translate(sample: &Sample, dy: isize, dx: isize) -> Result<Sample> {
    let ((ylo, yhi), (xlo, xhi)) = shift_range(sample);
    if dy < ylo || dy > yhi || dx < xlo || dx > xhi {
        return Err(Error::config(format!("shift ({dy}, {dx}) pushes an object off the canvas")));
    }
    let (h, w) = (sample.scene.height(), sample.scene.width());
    let from = |y: usize, x: usize| {
        let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
        let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
        sy * w + sx
    };
    let src = sample.scene.image.data();
    let mut image = Tensor::zeros(&[h, w, 3]);
    let mut bits = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (to, f) = (y * w + x, from(y, x));
            image.data_mut()[to * 3..to * 3 + 3].copy_from_slice(&src[f * 3..f * 3 + 3]);
            bits[to] = sample.mask.bits[f];
        }
    }
    let objects = sample
        .scene
        .objects
        .iter()
        .map(|o| Object {
            center: (o.center.0 + dx as f64, o.center.1 + dy as f64),
            ..o.clone()
        })
        .collect();
    Ok(Sample {
        id: sample.id,
        scene: Scene { image, objects },
        tokens: sample.tokens.clone(),
        referent: sample.referent,
        mask: BinaryMask {
            height: h,
            width: w,
            bits,
        },
        mask_ratio: sample.mask_ratio,
    })
}

/// Random flip plus an in-range shift.
pub fn augment(sample: &Sample, rng: &mut impl Rng) -> Sample {
    let flipped = if rng.gen_bool(0.5) { flip_horizontal(sample) } else { sample.clone() };
    let ((ylo, yhi), (xlo, xhi)) = shift_range(&flipped);
    let (dy, dx) = (rng.gen_range(ylo..=yhi), rng.gen_range(xlo..=xhi));
    translate(&flipped, dy, dx).expect("shift drawn from the admissible range")
}

fn place_objects(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, small_referent: bool) -> Option<Vec<Object>> {
    let shared = *ShapeKind::ALL.choose(rng).unwrap();
    let mut shapes: Vec<ShapeKind> = vec![shared, shared];
    while shapes.len() < cfg.objects {
        shapes.push(*ShapeKind::ALL.choose(rng).unwrap());
    }
    shapes.shuffle(rng);

    let mut objects: Vec<Object> = Vec::with_capacity(cfg.objects);
    for (i, &shape) in shapes.iter().enumerate() {
        let size = if i == 0 {
            if small_referent {
                SizeClass::Small
            } else {
                SizeClass::Large
            }
        } else if rng.gen_bool(0.35) {
            SizeClass::Small
        } else {
            SizeClass::Large
        };
        let (lo, hi) = cfg.extent_range(size, shape);
        let extent = rng.gen_range(lo..hi);
        let color = *Color::ALL.choose(rng).unwrap();
        let margin = extent + 1.0;
        let mut placed = None;
        for _ in 0..200 {
            let cx = rng.gen_range(margin..cfg.width as f64 - margin);
            let cy = rng.gen_range(margin..cfg.height as f64 - margin);
            let clear = objects.iter().all(|o| {
                let d = ((o.center.0 - cx).powi(2) + (o.center.1 - cy).powi(2)).sqrt();
                d > bound_radius(o) + bound_radius_of(shape, extent) + 2.0
            });
            if clear {
                placed = Some((cx, cy));
                break;
            }
        }
        objects.push(Object {
            shape,
            color,
            size,
            center: placed?,
            extent,
        });
    }
    Some(objects)
}

fn bound_radius_of(shape: ShapeKind, extent: f64) -> f64 {
    match shape {
        ShapeKind::Circle => extent,
        // Base corners of the triangle sit at (±r, r).
        ShapeKind::Square | ShapeKind::Triangle => extent * std::f64::consts::SQRT_2,
    }
}

fn bound_radius(o: &Object) -> f64 {
    bound_radius_of(o.shape, o.extent)
}

fn render(objects: &[Object], cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = (cfg.height, cfg.width);
    let mut img = Tensor::zeros(&[h, w, 3]);
    let tints: Vec<[f64; 3]> = objects
        .iter()
        .map(|o| {
            let base = o.color.rgb();
            [0, 1, 2].map(|c| (base[c] + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0))
        })
        .collect();
    let masks: Vec<BinaryMask> = objects.iter().map(|o| o.rasterize(h, w)).collect();
    for p in 0..h * w {
        let owner = masks.iter().position(|m| m.bits[p]);
        for c in 0..3 {
            let v = match owner {
                Some(k) => tints[k][c],
                None => 0.1,
            } + rng.gen_range(-0.03..0.03);
            img.data_mut()[p * 3 + c] = quantize(v);
        }
    }
    img
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let cfg = GeneratorConfig::default();
        let a = generate(11, 8, &cfg).unwrap();
        let b = generate(11, 8, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate(12, 8, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_count_rejected() {
        assert!(generate(0, 0, &GeneratorConfig::default()).is_err());
    }

    #[test]
    fn small_and_large_sizes_straddle_the_threshold() {
        let cfg = GeneratorConfig::default();
        let area = (cfg.height * cfg.width) as f64;
        for shape in ShapeKind::ALL {
            for (size, extent) in [
                (SizeClass::Small, cfg.extent_range(SizeClass::Small, shape).1),
                (SizeClass::Large, cfg.extent_range(SizeClass::Large, shape).0),
            ] {
                let o = Object {
                    shape,
                    color: Color::Red,
                    size,
                    center: (32.0, 32.0),
                    extent,
                };
                let ratio = o.rasterize(cfg.height, cfg.width).count() as f64 / area;
                match size {
                    SizeClass::Small => assert!(ratio < SMALL_MASK_RATIO, "{shape:?} {ratio}"),
                    SizeClass::Large => assert!(ratio > SMALL_MASK_RATIO, "{shape:?} {ratio}"),
                }
            }
        }
    }

    #[test]
    fn scenes_share_a_category_and_are_disjoint() {
        let samples = generate(3, 40, &GeneratorConfig::default()).unwrap();
        for s in &samples {
            let shared = ShapeKind::ALL.iter().any(|&k| {
                s.scene.objects.iter().filter(|o| o.shape == k).count() >= 2
            });
            assert!(shared, "sample {}", s.id);
            assert!(s.scene.disjoint(), "sample {}", s.id);
            assert!(s.tokens.len() <= MAX_TOKENS);
        }
    }

    #[test]
    fn split_filters() {
        let samples = generate(5, 60, &GeneratorConfig::default()).unwrap();
        for s in &samples {
            assert_eq!(Split::SmallScale.contains(s), s.mask_ratio < 0.03);
            assert_eq!(Split::ComplexLanguage.contains(s), s.tokens.len() > 18);
        }
    }
}
