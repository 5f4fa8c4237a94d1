//! The multimodal encoder: a multiway transformer over text and image tokens
//! with selectable fusion scheme, plus the text-only and late-fusion
//! baselines.
//!
//! Token layout is always `[text CLS, words.., SEP, PAD..] ++ [image CLS,
//! patches..]`. Attention weights are shared between modalities inside a
//! block; each token is routed through the feed-forward expert of its own
//! modality.

mod tokenizer;

use serde::{Deserialize, Serialize};

pub use tokenizer::{TokenizedText, VocabTokenizer, CLS, PAD, SEP, SPECIAL_TOKENS, UNK};

use crate::autodiff::{AttentionMask, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Activation, Builder, LayerNorm, Linear, Mlp, ModuleGroup, ParamId, ParamStore, Session};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FusionMode {
    /// Text tokens only; the image is never seen.
    TextOnly,
    /// Independent text and image towers joined after their final layer.
    LateConcat,
    /// One joint stream; the first `fusion_depth` layers attend across
    /// modalities, later layers attend within each modality.
    Early { fusion_depth: usize },
}

impl FusionMode {
    pub fn label(&self, num_layers: usize) -> String {
        match self {
            FusionMode::TextOnly => "text-only".into(),
            FusionMode::LateConcat => "late-concat".into(),
            FusionMode::Early { fusion_depth } if *fusion_depth == num_layers => "early-full".into(),
            FusionMode::Early { fusion_depth } if 2 * fusion_depth == num_layers => "early-half".into(),
            FusionMode::Early { fusion_depth } => format!("early-{fusion_depth}"),
        }
    }

    /// The representation a mode uses when the configured one does not fit.
    pub fn default_representation(&self) -> Representation {
        match self {
            FusionMode::TextOnly => Representation::TextCls,
            FusionMode::LateConcat => Representation::ConcatCls,
            FusionMode::Early { .. } => Representation::ImageCls,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    TextCls,
    ImageCls,
    ImageAvgPool,
    ConcatCls,
}

impl Representation {
    pub const ALL: [Representation; 4] = [
        Representation::TextCls,
        Representation::ImageCls,
        Representation::ImageAvgPool,
        Representation::ConcatCls,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Representation::TextCls => "text-cls",
            Representation::ImageCls => "image-cls",
            Representation::ImageAvgPool => "image-avgpool",
            Representation::ConcatCls => "concat-cls",
        }
    }

    pub fn is_compatible(&self, mode: &FusionMode) -> bool {
        match mode {
            FusionMode::TextOnly => *self == Representation::TextCls,
            FusionMode::LateConcat => *self == Representation::ConcatCls,
            FusionMode::Early { .. } => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Square input side in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub fusion_mode: FusionMode,
    pub representation: Representation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            embed_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            image_size: 32,
            patch_size: 8,
            vocab_size: crate::data::default_tokenizer().vocab_size(),
            max_text_len: 8,
            fusion_mode: FusionMode::Early { fusion_depth: 4 },
            representation: Representation::ImageCls,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.embed_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return fail("encoder dimensions must be positive".into());
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.max_text_len < 2 {
            return fail("max_text_len must be at least 2".into());
        }
        if self.vocab_size <= SPECIAL_TOKENS.len() {
            return fail(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if let FusionMode::Early { fusion_depth } = self.fusion_mode {
            if fusion_depth > self.num_layers {
                return fail(format!(
                    "fusion_depth {fusion_depth} exceeds num_layers {}",
                    self.num_layers
                ));
            }
        }
        if !self.representation.is_compatible(&self.fusion_mode) {
            return fail(format!(
                "representation {:?} is not available under fusion mode {:?}",
                self.representation, self.fusion_mode
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Width of the vector handed to the projector.
    pub fn representation_dim(&self) -> usize {
        match (self.fusion_mode, self.representation) {
            (FusionMode::Early { .. }, Representation::ConcatCls) => 2 * self.embed_dim,
            _ => self.embed_dim,
        }
    }

    pub fn uses_image(&self) -> bool {
        !matches!(self.fusion_mode, FusionMode::TextOnly)
    }
}

/// Row ranges of each modality inside the encoder's state matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateLayout {
    pub text_len: usize,
    /// Image CLS plus patches; zero when the image is not encoded.
    pub image_len: usize,
}

impl StateLayout {
    pub fn image_cls_row(&self) -> Option<usize> {
        (self.image_len > 0).then_some(self.text_len)
    }

    pub fn total(&self) -> usize {
        self.text_len + self.image_len
    }
}

pub struct EncoderOutput {
    /// `[text_len + image_len, embed_dim]`.
    pub states: Var,
    pub layout: StateLayout,
    /// `[1, representation_dim]`.
    pub representation: Var,
}

/// How attention treats text/image pairs, overriding the fusion schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CrossModal {
    #[default]
    AsConfigured,
    /// Block cross-modal attention in every layer.
    BlockedEverywhere,
}

#[derive(Clone, Debug)]
struct Expert {
    norm: LayerNorm,
    mlp: Mlp,
}

impl Expert {
    fn build(b: &mut Builder<'_>, name: &str, cfg: &EncoderConfig) -> Self {
        b.scope(name, |b| Expert {
            norm: b.layer_norm("norm", cfg.embed_dim),
            mlp: b.mlp("mlp", &[cfg.embed_dim, cfg.ffn_dim, cfg.embed_dim], Activation::Gelu),
        })
    }

    /// `x + mlp(norm(x))`
    fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.norm.forward(s, x)?;
        let h = self.mlp.forward(s, h)?;
        s.tape.add(x, h)
    }
}

/// Pre-norm block: shared attention, then per-modality feed-forward experts.
#[derive(Clone, Debug)]
pub struct MultiwayBlock {
    norm: LayerNorm,
    attn: crate::nn::Attention,
    text_ffn: Option<Expert>,
    image_ffn: Option<Expert>,
}

impl MultiwayBlock {
    fn build(b: &mut Builder<'_>, name: &str, cfg: &EncoderConfig, text: bool, image: bool) -> Self {
        b.scope(name, |b| MultiwayBlock {
            norm: b.layer_norm("norm", cfg.embed_dim),
            attn: b.attention("attn", cfg.embed_dim, cfg.embed_dim, cfg.num_heads),
            text_ffn: text.then(|| Expert::build(b, "text_ffn", cfg)),
            image_ffn: image.then(|| Expert::build(b, "image_ffn", cfg)),
        })
    }

    /// `text_len` rows of `x` are text, the rest image.
    fn forward(&self, s: &mut Session<'_>, x: Var, text_len: usize, mask: &AttentionMask) -> Result<Var> {
        let h = self.norm.forward(s, x)?;
        let a = self.attn.forward(s, h, h, h, Some(mask))?;
        let x = s.tape.add(x, a)?;
        let rows = s.tape.shape(x)[0];
        let mut parts = Vec::with_capacity(2);
        if text_len > 0 {
            let ffn = self.text_ffn.as_ref().expect("block has a text expert");
            let xt = if text_len == rows {
                x
            } else {
                s.tape.slice_rows(x, 0, text_len)?
            };
            parts.push(ffn.forward(s, xt)?);
        }
        if text_len < rows {
            let ffn = self.image_ffn.as_ref().expect("block has an image expert");
            let xi = if text_len == 0 {
                x
            } else {
                s.tape.slice_rows(x, text_len, rows)?
            };
            parts.push(ffn.forward(s, xi)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            s.tape.concat(&parts, 0)
        }
    }
}

#[derive(Clone, Debug)]
struct TextEmbed {
    tokens: ParamId,
    positions: ParamId,
}

#[derive(Clone, Debug)]
struct ImageEmbed {
    patch: Linear,
    cls: ParamId,
    positions: ParamId,
}

#[derive(Clone, Debug)]
enum Towers {
    Joint(Vec<MultiwayBlock>),
    Separate {
        text: Vec<MultiwayBlock>,
        image: Vec<MultiwayBlock>,
    },
}

#[derive(Clone, Debug)]
pub struct MultimodalEncoder {
    config: EncoderConfig,
    text: TextEmbed,
    image: Option<ImageEmbed>,
    towers: Towers,
    text_norm: LayerNorm,
    image_norm: Option<LayerNorm>,
    fusion_head: Option<Linear>,
}

const EMBED_STD: f64 = 0.02;

impl MultimodalEncoder {
    /// Registers the encoder's parameters under `multimodal_encoder.*`.
    pub fn build(store: &mut ParamStore, config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let d = cfg.embed_dim;
        let std = EMBED_STD as crate::Elem;
        let mut b = store.builder(ModuleGroup::MultimodalEncoder, seed);
        let text = b.scope("text_embed", |b| TextEmbed {
            tokens: b.normal("tokens", &[cfg.vocab_size, d], std),
            positions: b.normal("positions", &[cfg.max_text_len, d], std),
        });
        let image = cfg.uses_image().then(|| {
            b.scope("image_embed", |b| ImageEmbed {
                patch: b.linear("patch", cfg.patch_size * cfg.patch_size * 3, d),
                cls: b.normal("cls", &[1, d], std),
                positions: b.normal("positions", &[cfg.num_patches() + 1, d], std),
            })
        });
        let layers = |b: &mut Builder<'_>, prefix: &str, text: bool, image: bool| -> Vec<MultiwayBlock> {
            (0..cfg.num_layers)
                .map(|i| MultiwayBlock::build(b, &format!("{prefix}.{i}"), cfg, text, image))
                .collect()
        };
        let towers = match cfg.fusion_mode {
            FusionMode::TextOnly => Towers::Joint(layers(&mut b, "layers", true, false)),
            FusionMode::Early { .. } => Towers::Joint(layers(&mut b, "layers", true, true)),
            FusionMode::LateConcat => Towers::Separate {
                text: layers(&mut b, "text_layers", true, false),
                image: layers(&mut b, "image_layers", false, true),
            },
        };
        let text_norm = b.layer_norm("text_norm", d);
        let image_norm = cfg.uses_image().then(|| b.layer_norm("image_norm", d));
        let fusion_head = matches!(cfg.fusion_mode, FusionMode::LateConcat).then(|| b.linear("fusion_head", 2 * d, d));
        Ok(Self {
            config: cfg.clone(),
            text,
            image,
            towers,
            text_norm,
            image_norm,
            fusion_head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Token plus position embeddings, `[max_text_len, embed_dim]`.
    pub fn embed_text(&self, s: &mut Session<'_>, tokens: &TokenizedText) -> Result<Var> {
        let cfg = &self.config;
        if tokens.len() != cfg.max_text_len {
            return Err(Error::shape(
                "embed_text",
                format!("{} token ids for max_text_len {}", tokens.len(), cfg.max_text_len),
            ));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Validation(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let table = s.param(self.text.tokens);
        let words = s.tape.select_rows(table, &tokens.ids)?;
        let pos = s.param(self.text.positions);
        s.tape.add(words, pos)
    }

    /// Image CLS followed by one embedding per patch, plus positions:
    /// `[num_patches + 1, embed_dim]`.
    pub fn embed_image(&self, s: &mut Session<'_>, image: &Image) -> Result<Var> {
        let cfg = &self.config;
        let embed = self
            .image
            .as_ref()
            .ok_or_else(|| Error::Config("this encoder has no image input".into()))?;
        if image.height() != cfg.image_size || image.width() != cfg.image_size {
            return Err(Error::shape(
                "embed_image",
                format!(
                    "{}x{} image for image_size {}",
                    image.height(),
                    image.width(),
                    cfg.image_size
                ),
            ));
        }
        let patches = s.tape.constant(image.patches(cfg.patch_size)?);
        let tokens = embed.patch.forward(s, patches)?;
        let cls = s.param(embed.cls);
        let all = s.tape.concat(&[cls, tokens], 0)?;
        let pos = s.param(embed.positions);
        s.tape.add(all, pos)
    }

    pub fn encode(&self, s: &mut Session<'_>, image: &Image, text: &TokenizedText) -> Result<EncoderOutput> {
        self.encode_with(s, image, text, CrossModal::AsConfigured)
    }

    pub fn encode_with(
        &self,
        s: &mut Session<'_>,
        image: &Image,
        text: &TokenizedText,
        cross: CrossModal,
    ) -> Result<EncoderOutput> {
        let text_emb = self.embed_text(s, text)?;
        let image_emb = match self.config.uses_image() {
            true => Some(self.embed_image(s, image)?),
            false => None,
        };
        self.encode_embeddings(s, text_emb, image_emb, &text.attention_mask, cross)
    }

    /// Runs the transformer on already-embedded tokens. `text_valid` marks
    /// non-padding text positions; padding keys are never attended to.
    pub fn encode_embeddings(
        &self,
        s: &mut Session<'_>,
        text_emb: Var,
        image_emb: Option<Var>,
        text_valid: &[bool],
        cross: CrossModal,
    ) -> Result<EncoderOutput> {
        let cfg = &self.config;
        let text_len = s.tape.shape(text_emb)[0];
        if text_valid.len() != text_len {
            return Err(Error::shape(
                "encode",
                format!("{} mask entries for {text_len} text tokens", text_valid.len()),
            ));
        }
        if cfg.uses_image() != image_emb.is_some() {
            return Err(Error::Config(format!(
                "fusion mode {:?} and image input disagree",
                cfg.fusion_mode
            )));
        }
        let image_len = image_emb.map_or(0, |v| s.tape.shape(v)[0]);
        let layout = StateLayout { text_len, image_len };

        let (text_states, image_states) = match &self.towers {
            Towers::Joint(blocks) => {
                let mut x = match image_emb {
                    Some(img) => s.tape.concat(&[text_emb, img], 0)?,
                    None => text_emb,
                };
                let total = layout.total();
                let valid = |k: usize| k >= text_len || text_valid[k];
                let joint = AttentionMask::from_fn(total, total, |_, k| valid(k));
                let split = AttentionMask::from_fn(total, total, |q, k| valid(k) && ((q < text_len) == (k < text_len)));
                let fusion_depth = match (cfg.fusion_mode, cross) {
                    (_, CrossModal::BlockedEverywhere) => 0,
                    (FusionMode::Early { fusion_depth }, _) => fusion_depth,
                    _ => 0,
                };
                for (i, block) in blocks.iter().enumerate() {
                    let mask = if i < fusion_depth { &joint } else { &split };
                    x = block.forward(s, x, text_len, mask)?;
                }
                if image_len > 0 {
                    let t = s.tape.slice_rows(x, 0, text_len)?;
                    let i = s.tape.slice_rows(x, text_len, text_len + image_len)?;
                    (t, Some(i))
                } else {
                    (x, None)
                }
            }
            Towers::Separate { text, image } => {
                let tmask = AttentionMask::from_fn(text_len, text_len, |_, k| text_valid[k]);
                let mut t = text_emb;
                for block in text {
                    t = block.forward(s, t, text_len, &tmask)?;
                }
                let img = image_emb.expect("late fusion has an image input");
                let imask = AttentionMask::from_fn(image_len, image_len, |_, _| true);
                let mut i = img;
                for block in image {
                    i = block.forward(s, i, 0, &imask)?;
                }
                (t, Some(i))
            }
        };

        let t = self.text_norm.forward(s, text_states)?;
        let states = match (image_states, &self.image_norm) {
            (Some(i), Some(norm)) => {
                let i = norm.forward(s, i)?;
                s.tape.concat(&[t, i], 0)?
            }
            _ => t,
        };

        let representation = match &self.fusion_head {
            Some(head) => {
                let both = select_representation(s, states, layout, Representation::ConcatCls)?;
                head.forward(s, both)?
            }
            None => select_representation(s, states, layout, cfg.representation)?,
        };
        Ok(EncoderOutput {
            states,
            layout,
            representation,
        })
    }
}

/// Reads the configured summary vector out of the encoder states, `[1, d]`
/// (`[1, 2d]` for [`Representation::ConcatCls`]).
pub fn select_representation(
    s: &mut Session<'_>,
    states: Var,
    layout: StateLayout,
    representation: Representation,
) -> Result<Var> {
    let need_image = || {
        layout
            .image_cls_row()
            .ok_or_else(|| Error::Config(format!("representation {representation:?} needs image states")))
    };
    match representation {
        Representation::TextCls => s.tape.slice_rows(states, 0, 1),
        Representation::ImageCls => {
            let r = need_image()?;
            s.tape.slice_rows(states, r, r + 1)
        }
        Representation::ImageAvgPool => {
            let r = need_image()?;
            if layout.image_len < 2 {
                return Err(Error::shape("select_representation", "no patch tokens to pool"));
            }
            let patches = s.tape.slice_rows(states, r + 1, layout.total())?;
            s.tape.mean_rows(patches)
        }
        Representation::ConcatCls => {
            let r = need_image()?;
            let t = s.tape.slice_rows(states, 0, 1)?;
            let i = s.tape.slice_rows(states, r, r + 1)?;
            s.tape.concat(&[t, i], 1)
        }
    }
}
