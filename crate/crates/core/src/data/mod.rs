//! Synthetic referring-shapes data and the on-disk dataset format.
//!
//! Scenes hold a few flat-colored circles, squares and triangles. Each
//! sample pairs a scene with an expression from a small grammar that picks
//! out exactly one object, and that object's visible pixels as the mask.

mod io;
mod rle;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{load_dataset, read_ppm, write_dataset, write_pgm, write_ppm, IMAGE_DIR, INDEX_FILE};
pub use rle::{rle_decode, rle_encode};

use crate::encoder::VocabTokenizer;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::Mask;
use crate::nn::mix_seed;
use crate::tensor::Elem;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Size {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
        }
    }

    /// 8-bit channel values, so images survive PPM storage exactly.
    pub fn rgb8(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [50, 90, 230],
            Color::Yellow => [230, 210, 40],
            Color::Purple => [160, 60, 200],
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    /// Radius range as a fraction of the canvas side.
    fn radius_range(self) -> (f64, f64) {
        match self {
            Size::Small => (0.11, 0.14),
            Size::Large => (0.19, 0.24),
        }
    }
}

pub const BACKGROUND_RGB8: [u8; 3] = [24, 24, 32];

pub fn rgb8_to_elem(c: [u8; 3]) -> [Elem; 3] {
    c.map(|v| v as Elem / 255.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    /// Pixel coordinates, `x` right and `y` down.
    pub center: (f64, f64),
    pub radius: f64,
}

impl SceneObject {
    /// Whether the pixel whose center is `(px + 0.5, py + 0.5)` is covered.
    pub fn covers(&self, px: usize, py: usize) -> bool {
        let (x, y) = (px as f64 + 0.5 - self.center.0, py as f64 + 0.5 - self.center.1);
        let r = self.radius;
        match self.shape {
            Shape::Circle => x * x + y * y <= r * r,
            Shape::Square => x.abs() <= 0.8 * r && y.abs() <= 0.8 * r,
            Shape::Triangle => {
                // apex up, base corners at +-30 degrees below the center
                let (hx, by) = (r * 0.866, 0.5 * r);
                y <= by && y >= -r && x.abs() <= hx * (y + r) / (by + r)
            }
        }
    }

    pub fn rasterize(&self, canvas: usize) -> Mask {
        let bits = (0..canvas * canvas)
            .map(|i| self.covers(i % canvas, i / canvas))
            .collect();
        Mask {
            height: canvas,
            width: canvas,
            bits,
        }
    }
}

/// A scene, drawn in list order (later objects on top).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas_size: usize,
    pub background: [u8; 3],
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    /// Per-pixel index of the top-most covering object.
    pub fn label_map(&self) -> Vec<Option<usize>> {
        let n = self.canvas_size;
        let mut labels = vec![None; n * n];
        for (k, obj) in self.objects.iter().enumerate() {
            for (i, l) in labels.iter_mut().enumerate() {
                if obj.covers(i % n, i / n) {
                    *l = Some(k);
                }
            }
        }
        labels
    }

    pub fn render(&self) -> Image {
        let n = self.canvas_size;
        let mut img = Image::filled(n, n, rgb8_to_elem(self.background));
        for (i, l) in self.label_map().into_iter().enumerate() {
            if let Some(k) = l {
                img.set_pixel(i / n, i % n, rgb8_to_elem(self.objects[k].color.rgb8()));
            }
        }
        img
    }

    /// Visible pixels of object `k`.
    pub fn visible_mask(&self, k: usize) -> Mask {
        let n = self.canvas_size;
        Mask {
            height: n,
            width: n,
            bits: self.label_map().into_iter().map(|l| l == Some(k)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

/// A parsed referring expression.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expression {
    /// "<color> <shape>"
    ColorShape(Color, Shape),
    /// "<size> <color> <shape>"
    SizeColorShape(Size, Color, Shape),
    /// "<color> <shape> on the <side>"
    OnSide(Color, Shape, Side),
    /// "<shape> above the <color> <shape>"
    Above(Shape, Color, Shape),
}

impl Expression {
    pub fn render(&self) -> String {
        match *self {
            Expression::ColorShape(c, s) => format!("{} {}", c.word(), s.word()),
            Expression::SizeColorShape(z, c, s) => format!("{} {} {}", z.word(), c.word(), s.word()),
            Expression::OnSide(c, s, side) => format!(
                "{} {} on the {}",
                c.word(),
                s.word(),
                if side == Side::Left { "left" } else { "right" }
            ),
            Expression::Above(s, c, anchor) => format!("{} above the {} {}", s.word(), c.word(), anchor.word()),
        }
    }

    pub fn is_spatial(&self) -> bool {
        matches!(self, Expression::OnSide(..) | Expression::Above(..))
    }

    /// Indices of the objects the expression denotes.
    ///
    /// "on the left/right" picks the extreme of at least two matching
    /// objects by center `x`; "above" picks the objects of the given shape
    /// whose center lies strictly above the center of the unique anchor.
    pub fn resolve(&self, scene: &SceneSpec) -> Vec<usize> {
        let objs = &scene.objects;
        let matching = |c: Color, s: Shape| -> Vec<usize> {
            (0..objs.len())
                .filter(|&i| objs[i].color == c && objs[i].shape == s)
                .collect()
        };
        match *self {
            Expression::ColorShape(c, s) => matching(c, s),
            Expression::SizeColorShape(z, c, s) => matching(c, s).into_iter().filter(|&i| objs[i].size == z).collect(),
            Expression::OnSide(c, s, side) => {
                let cands = matching(c, s);
                if cands.len() < 2 {
                    return Vec::new();
                }
                let key = |i: usize| match side {
                    Side::Left => objs[i].center.0,
                    Side::Right => -objs[i].center.0,
                };
                let best = cands.iter().map(|&i| key(i)).fold(f64::INFINITY, f64::min);
                cands.into_iter().filter(|&i| key(i) == best).collect()
            }
            Expression::Above(s, c, anchor_shape) => {
                let anchors = matching(c, anchor_shape);
                if anchors.len() != 1 {
                    return Vec::new();
                }
                let a = anchors[0];
                (0..objs.len())
                    .filter(|&i| i != a && objs[i].shape == s && objs[i].center.1 < objs[a].center.1)
                    .collect()
            }
        }
    }
}

/// Words the grammar can emit, in vocabulary order.
pub fn grammar_words() -> Vec<&'static str> {
    let mut w: Vec<&'static str> = Color::ALL.iter().map(|c| c.word()).collect();
    w.extend(Shape::ALL.iter().map(|s| s.word()));
    w.extend(Size::ALL.iter().map(|s| s.word()));
    w.extend(["on", "the", "left", "right", "above"]);
    w
}

pub const DEFAULT_MAX_TEXT_LEN: usize = 8;

/// Tokenizer over [`grammar_words`] with the default text length.
pub fn default_tokenizer() -> VocabTokenizer {
    VocabTokenizer::new(&grammar_words(), DEFAULT_MAX_TEXT_LEN).expect("grammar vocabulary is valid")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    /// Only "<color> <shape>" and "<size> <color> <shape>".
    AttributesOnly,
    /// All templates, spatial relations included.
    Spatial,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub image: Image,
    pub expression: String,
    pub mask: Mask,
}

/// A sample together with the scene and referent it was generated from.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSample {
    pub sample: SegSample,
    pub scene: SceneSpec,
    pub expression: Expression,
    pub referent: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub canvas_size: usize,
    pub difficulty: Difficulty,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Largest allowed IoU between any two objects' full rasterizations.
    pub overlap_iou_cap: f64,
    /// Scene draws per sample before giving up.
    pub max_attempts: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            canvas_size: 48,
            difficulty: Difficulty::Spatial,
            min_objects: 3,
            max_objects: 4,
            overlap_iou_cap: 0.05,
            max_attempts: 2000,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas_size < 16 {
            return Err(Error::Config(format!("canvas_size {} is below 16", self.canvas_size)));
        }
        if self.min_objects < 3 || self.max_objects < self.min_objects {
            return Err(Error::Config(format!(
                "object count range {}..={} must start at 3 or more",
                self.min_objects, self.max_objects
            )));
        }
        if !(0.0..=1.0).contains(&self.overlap_iou_cap) || self.max_attempts == 0 {
            return Err(Error::Config(
                "overlap cap must lie in [0, 1] and attempts be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Generates samples `0..n` for `seed`.
pub fn generate_dataset(seed: u64, n: usize, config: &GeneratorConfig) -> Result<Vec<SegSample>> {
    Ok(generate_range(seed, 0, n, config)?
        .into_iter()
        .map(|g| g.sample)
        .collect())
}

/// Samples `start..start + n`; each depends only on `(seed, index, config)`.
pub fn generate_range(seed: u64, start: usize, n: usize, config: &GeneratorConfig) -> Result<Vec<GeneratedSample>> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Validation("n_samples must be positive".into()));
    }
    (start..start + n).map(|i| generate_sample(seed, i, config)).collect()
}

pub fn generate_sample(seed: u64, index: usize, config: &GeneratorConfig) -> Result<GeneratedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index as u64));
    for _ in 0..config.max_attempts {
        if let Some((scene, expression, referent)) = draw(&mut rng, config) {
            let mask = scene.visible_mask(referent);
            let sample = SegSample {
                id: format!("{index:06}"),
                image: scene.render(),
                expression: expression.render(),
                mask,
            };
            return Ok(GeneratedSample {
                sample,
                scene,
                expression,
                referent,
            });
        }
    }
    Err(Error::Generation(format!(
        "sample {index}: no valid scene within {} attempts",
        config.max_attempts
    )))
}

#[derive(Clone, Copy)]
enum Template {
    ColorShape,
    SizeColorShape,
    OnSide,
    Above,
}

struct Draft {
    shape: Shape,
    color: Color,
    size: Size,
}

fn any_except(rng: &mut ChaCha8Rng, banned: &[(Color, Shape)]) -> Draft {
    loop {
        let d = Draft {
            shape: *Shape::ALL.choose(rng).unwrap(),
            color: *Color::ALL.choose(rng).unwrap(),
            size: *Size::ALL.choose(rng).unwrap(),
        };
        if !banned.contains(&(d.color, d.shape)) {
            return d;
        }
    }
}

/// One attempt: plan the objects for a template, place them, then check
/// that the expression resolves to the planned referent only.
fn draw(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Option<(SceneSpec, Expression, usize)> {
    let templates: &[Template] = match cfg.difficulty {
        Difficulty::AttributesOnly => &[Template::ColorShape, Template::SizeColorShape],
        Difficulty::Spatial => &[
            Template::ColorShape,
            Template::SizeColorShape,
            Template::OnSide,
            Template::Above,
        ],
    };
    let template = *templates.choose(rng).unwrap();
    let n_objects = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let color = *Color::ALL.choose(rng).unwrap();
    let shape = *Shape::ALL.choose(rng).unwrap();
    let size = *Size::ALL.choose(rng).unwrap();
    let mut drafts = vec![Draft { shape, color, size }];
    let expression = match template {
        Template::ColorShape => Expression::ColorShape(color, shape),
        Template::SizeColorShape => {
            let other = if size == Size::Small { Size::Large } else { Size::Small };
            drafts.push(Draft {
                shape,
                color,
                size: other,
            });
            Expression::SizeColorShape(size, color, shape)
        }
        Template::OnSide => {
            let twins = rng.random_range(1..=2);
            for _ in 0..twins {
                drafts.push(Draft {
                    shape,
                    color,
                    size: *Size::ALL.choose(rng).unwrap(),
                });
            }
            let side = if rng.random_bool(0.5) { Side::Left } else { Side::Right };
            Expression::OnSide(color, shape, side)
        }
        Template::Above => {
            // drafts[0] is the referent; the anchor follows
            let anchor = any_except(rng, &[(color, shape)]);
            let e = Expression::Above(shape, anchor.color, anchor.shape);
            let banned = (anchor.color, anchor.shape);
            drafts.push(anchor);
            if rng.random_bool(0.5) {
                let mut below = any_except(rng, &[banned]);
                below.shape = shape;
                if (below.color, below.shape) != banned {
                    drafts.push(below);
                }
            }
            e
        }
    };
    let referent_key = (color, shape);
    while drafts.len() < n_objects {
        let banned: Vec<(Color, Shape)> = match template {
            Template::Above => vec![(drafts[1].color, drafts[1].shape), (color, shape)],
            _ => vec![referent_key],
        };
        let mut d = any_except(rng, &banned);
        if matches!(template, Template::Above) && d.shape == shape {
            // keep extra same-shape objects from landing above the anchor by chance
            d.shape = *Shape::ALL
                .iter()
                .find(|&&s| s != shape && s != drafts[1].shape)
                .unwrap_or(&d.shape);
            if (d.color, d.shape) == (drafts[1].color, drafts[1].shape) {
                continue;
            }
        }
        drafts.push(d);
    }

    let n = cfg.canvas_size as f64;
    let mut objects = Vec::with_capacity(drafts.len());
    for d in &drafts {
        let (lo, hi) = d.size.radius_range();
        let radius = rng.random_range(lo * n..hi * n);
        let center = (
            rng.random_range(radius..n - radius),
            rng.random_range(radius..n - radius),
        );
        objects.push(SceneObject {
            shape: d.shape,
            color: d.color,
            size: d.size,
            center,
            radius,
        });
    }

    let masks: Vec<Mask> = objects.iter().map(|o| o.rasterize(cfg.canvas_size)).collect();
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            let (inter, union) = masks[i].overlap(&masks[j]).ok()?;
            if inter as f64 > cfg.overlap_iou_cap * union as f64 {
                return None;
            }
        }
    }

    // shuffle draw order so the referent is not always at the bottom
    let mut order: Vec<usize> = (0..objects.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let scene = SceneSpec {
        canvas_size: cfg.canvas_size,
        background: BACKGROUND_RGB8,
        objects: order.iter().map(|&i| objects[i]).collect(),
    };
    let margin = 0.1 * n;
    let referent = match expression {
        Expression::OnSide(..) => {
            let picked = expression.resolve(&scene);
            if picked.len() != 1 {
                return None;
            }
            let p = picked[0];
            let px = scene.objects[p].center.0;
            let clear = scene
                .objects
                .iter()
                .enumerate()
                .filter(|&(i, o)| i != p && (o.color, o.shape) == referent_key)
                .all(|(_, o)| (o.center.0 - px).abs() >= margin);
            if !clear {
                return None;
            }
            p
        }
        _ => order.iter().position(|&i| i == 0).unwrap(),
    };
    if let Expression::Above(_, ac, ash) = expression {
        let a = scene.objects.iter().position(|o| (o.color, o.shape) == (ac, ash))?;
        if scene.objects[referent].center.1 > scene.objects[a].center.1 - margin {
            return None;
        }
        let crowded = scene.objects.iter().enumerate().any(|(i, o)| {
            i != referent
                && i != a
                && o.shape == scene.objects[referent].shape
                && (o.center.1 - scene.objects[a].center.1).abs() < margin
        });
        if crowded {
            return None;
        }
    }
    if expression.resolve(&scene) != [referent] {
        return None;
    }
    // the referent must stay mostly visible
    let visible = scene.visible_mask(referent).count();
    if (visible as f64) < 0.8 * masks[order[referent]].count() as f64 || visible == 0 {
        return None;
    }
    Some((scene, expression, referent))
}
