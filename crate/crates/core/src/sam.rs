//! A toy-scale SAM: ViT image encoder and a two-way-attention mask decoder
//! with a single output mask.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Activation, Attention, Builder, LayerNorm, Linear, Mlp, ModuleGroup, ParamId, ParamStore, Session};
use crate::prompt::{CoordinateEncoding, PromptEncoder, SparsePromptEmbeddings};
use crate::tensor::Tensor;

/// Each transposed-convolution stage doubles the grid.
pub const UPSAMPLE_FACTOR: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Width of the ViT trunk.
    pub encoder_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    /// Feature grid and prompt width.
    pub feat_dim: usize,
    pub decoder_blocks: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_dim: usize,
    /// Cross-attention runs at `feat_dim / attention_downsample`.
    pub attention_downsample: usize,
    /// Side of the mask the logits are returned at.
    pub mask_size: usize,
    /// Hidden width of the projector; `None` means the encoder width.
    #[serde(default)]
    pub projector_hidden_dim: Option<usize>,
}

impl Default for SamConfig {
    fn default() -> Self {
        Self {
            image_size: 48,
            patch_size: 4,
            encoder_dim: 32,
            encoder_layers: 1,
            encoder_heads: 2,
            feat_dim: 32,
            decoder_blocks: 2,
            decoder_heads: 2,
            decoder_mlp_dim: 64,
            attention_downsample: 2,
            mask_size: 48,
            projector_hidden_dim: None,
        }
    }
}

impl SamConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let positive = [
            self.image_size,
            self.patch_size,
            self.encoder_dim,
            self.encoder_heads,
            self.feat_dim,
            self.decoder_blocks,
            self.decoder_heads,
            self.decoder_mlp_dim,
            self.attention_downsample,
            self.mask_size,
        ];
        if positive.contains(&0) || self.projector_hidden_dim == Some(0) {
            return fail("sam dimensions must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "sam image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.encoder_dim.is_multiple_of(self.encoder_heads) {
            return fail(format!(
                "sam encoder_dim {} is not divisible by {} heads",
                self.encoder_dim, self.encoder_heads
            ));
        }
        if !self.feat_dim.is_multiple_of(8) {
            return fail(format!("feat_dim {} must be a multiple of 8", self.feat_dim));
        }
        let cross = self.feat_dim / self.attention_downsample;
        if !self.feat_dim.is_multiple_of(self.attention_downsample)
            || !self.feat_dim.is_multiple_of(self.decoder_heads)
            || !cross.is_multiple_of(self.decoder_heads)
        {
            return fail(format!(
                "feat_dim {} does not split into {} heads at downsample {}",
                self.feat_dim, self.decoder_heads, self.attention_downsample
            ));
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Side of the logit map before any final resize.
    pub fn native_mask_size(&self) -> usize {
        self.grid_size() * UPSAMPLE_FACTOR
    }
}

/// `[h*w, feat_dim]` feature grid in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatureGrid {
    pub height: usize,
    pub width: usize,
    pub features: Tensor,
}

#[derive(Clone, Debug)]
struct VitBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

/// Plain ViT with a linear neck to the feature width.
#[derive(Clone, Debug)]
pub struct SamImageEncoder {
    config: SamConfig,
    patch: Linear,
    positions: ParamId,
    blocks: Vec<VitBlock>,
    neck: Linear,
    neck_norm: LayerNorm,
}

impl SamImageEncoder {
    pub fn build(store: &mut ParamStore, config: &SamConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.encoder_dim;
        let g = c.grid_size();
        let mut b = store.builder(ModuleGroup::ImageEncoder, seed);
        let patch = b.linear("patch_embed", c.patch_size * c.patch_size * 3, d);
        let positions = b.normal("positions", &[g * g, d], 0.02);
        let blocks = (0..c.encoder_layers)
            .map(|i| {
                b.scope(&format!("blocks.{i}"), |b| VitBlock {
                    norm1: b.layer_norm("norm1", d),
                    attn: b.attention("attn", d, d, c.encoder_heads),
                    norm2: b.layer_norm("norm2", d),
                    mlp: b.mlp("mlp", &[d, 2 * d, d], Activation::Gelu),
                })
            })
            .collect();
        let neck = b.linear("neck", d, c.feat_dim);
        let neck_norm = b.layer_norm("neck_norm", c.feat_dim);
        Ok(Self {
            config: c.clone(),
            patch,
            positions,
            blocks,
            neck,
            neck_norm,
        })
    }

    /// `[grid*grid, feat_dim]`.
    pub fn forward(&self, s: &mut Session<'_>, image: &Image) -> Result<Var> {
        let c = &self.config;
        if image.height() != c.image_size || image.width() != c.image_size {
            return Err(Error::shape(
                "encode_image",
                format!(
                    "{}x{} image for sam image_size {}",
                    image.height(),
                    image.width(),
                    c.image_size
                ),
            ));
        }
        let patches = s.tape.constant(image.patches(c.patch_size)?);
        let x = self.patch.forward(s, patches)?;
        let pos = s.param(self.positions);
        let mut x = s.tape.add(x, pos)?;
        for blk in &self.blocks {
            let h = blk.norm1.forward(s, x)?;
            let h = blk.attn.forward(s, h, h, h, None)?;
            x = s.tape.add(x, h)?;
            let h = blk.norm2.forward(s, x)?;
            let h = blk.mlp.forward(s, h)?;
            x = s.tape.add(x, h)?;
        }
        let x = self.neck.forward(s, x)?;
        self.neck_norm.forward(s, x)
    }

    /// Inference-only forward returning a plain feature grid.
    pub fn encode_image(&self, store: &ParamStore, image: &Image) -> Result<ImageFeatureGrid> {
        let mut tape = crate::autodiff::Tape::new();
        let mut s = Session::inference(&mut tape, store);
        let v = self.forward(&mut s, image)?;
        let g = self.config.grid_size();
        Ok(ImageFeatureGrid {
            height: g,
            width: g,
            features: tape.value(v).clone(),
        })
    }
}

#[derive(Clone, Debug)]
struct TwoWayBlock {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_token_to_image: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    cross_image_to_token: Attention,
    norm4: LayerNorm,
    skip_first_layer_pe: bool,
}

impl TwoWayBlock {
    /// Returns updated `(queries, keys)`.
    fn forward(&self, s: &mut Session<'_>, queries: Var, keys: Var, query_pe: Var, key_pe: Var) -> Result<(Var, Var)> {
        let queries = if self.skip_first_layer_pe {
            self.self_attn.forward(s, queries, queries, queries, None)?
        } else {
            let q = s.tape.add(queries, query_pe)?;
            let a = self.self_attn.forward(s, q, q, queries, None)?;
            s.tape.add(queries, a)?
        };
        let queries = self.norm1.forward(s, queries)?;

        let q = s.tape.add(queries, query_pe)?;
        let k = s.tape.add(keys, key_pe)?;
        let a = self.cross_token_to_image.forward(s, q, k, keys, None)?;
        let queries = s.tape.add(queries, a)?;
        let queries = self.norm2.forward(s, queries)?;

        let m = self.mlp.forward(s, queries)?;
        let queries = s.tape.add(queries, m)?;
        let queries = self.norm3.forward(s, queries)?;

        let q = s.tape.add(queries, query_pe)?;
        let a = self.cross_image_to_token.forward(s, k, q, queries, None)?;
        let keys = s.tape.add(keys, a)?;
        let keys = self.norm4.forward(s, keys)?;
        Ok((queries, keys))
    }
}

/// Two-way transformer over `[mask token] ++ sparse prompts` and the image
/// grid, followed by ×4 upscaling and a hypernetwork dot product.
#[derive(Clone, Debug)]
pub struct MaskDecoder {
    config: SamConfig,
    mask_token: ParamId,
    blocks: Vec<TwoWayBlock>,
    final_attn: Attention,
    final_norm: LayerNorm,
    upscale1: Linear,
    upscale_norm: LayerNorm,
    upscale2: Linear,
    hyper: Mlp,
    image_pe: Tensor,
}

impl MaskDecoder {
    pub fn build(store: &mut ParamStore, config: &SamConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.feat_dim;
        let cross = d / c.attention_downsample;
        let mut b: Builder<'_> = store.builder(ModuleGroup::MaskDecoder, seed);
        let mask_token = b.normal("mask_token", &[1, d], 1.0);
        let blocks = (0..c.decoder_blocks)
            .map(|i| {
                b.scope(&format!("blocks.{i}"), |b| TwoWayBlock {
                    self_attn: b.attention("self_attn", d, d, c.decoder_heads),
                    norm1: b.layer_norm("norm1", d),
                    cross_token_to_image: b.attention("cross_token_to_image", d, cross, c.decoder_heads),
                    norm2: b.layer_norm("norm2", d),
                    mlp: b.mlp("mlp", &[d, c.decoder_mlp_dim, d], Activation::Relu),
                    norm3: b.layer_norm("norm3", d),
                    cross_image_to_token: b.attention("cross_image_to_token", d, cross, c.decoder_heads),
                    norm4: b.layer_norm("norm4", d),
                    skip_first_layer_pe: i == 0,
                })
            })
            .collect();
        let final_attn = b.attention("final_attn", d, cross, c.decoder_heads);
        let final_norm = b.layer_norm("final_norm", d);
        let upscale1 = b.linear("upscale.0", d, d);
        let upscale_norm = b.layer_norm("upscale.norm", d / 4);
        let upscale2 = b.linear("upscale.1", d / 4, d / 2);
        let hyper = b.mlp("hyper_mlp", &[d, d, d / 8], Activation::Relu);
        let g = c.grid_size();
        let image_pe = CoordinateEncoding::new(d)?.grid(g, g);
        Ok(Self {
            config: c.clone(),
            mask_token,
            blocks,
            final_attn,
            final_norm,
            upscale1,
            upscale_norm,
            upscale2,
            hyper,
            image_pe,
        })
    }

    pub fn config(&self) -> &SamConfig {
        &self.config
    }

    /// Mask logits `[mask_size, mask_size]` for one sample.
    ///
    /// `features: [h*w, feat_dim]`; `sparse` must hold a single sample.
    pub fn forward(
        &self,
        s: &mut Session<'_>,
        features: Var,
        sparse: &SparsePromptEmbeddings,
        prompt_encoder: &PromptEncoder,
    ) -> Result<Var> {
        let c = &self.config;
        let d = c.feat_dim;
        let g = c.grid_size();
        if s.tape.shape(features) != [g * g, d] {
            return Err(Error::shape(
                "decode_mask",
                format!("features {:?} for a {g}x{g} grid of width {d}", s.tape.shape(features)),
            ));
        }
        let st = s.tape.shape(sparse.tokens).to_vec();
        if st.len() != 3 || st[0] != 1 || st[2] != d || prompt_encoder.prompt_dim() != d {
            return Err(Error::shape(
                "decode_mask",
                format!("sparse tokens {st:?} for feat_dim {d} (one sample)"),
            ));
        }
        let sparse2d = s.tape.reshape(sparse.tokens, &[st[1], d])?;
        let mask_token = s.param(self.mask_token);
        let tokens = s.tape.concat(&[mask_token, sparse2d], 0)?;

        let dense = prompt_encoder.dense_embeddings(s, g, g)?;
        let mut keys = s.tape.add(features, dense)?;
        let key_pe = s.tape.constant(self.image_pe.clone());
        let mut queries = tokens;
        for blk in &self.blocks {
            (queries, keys) = blk.forward(s, queries, keys, tokens, key_pe)?;
        }
        let q = s.tape.add(queries, tokens)?;
        let k = s.tape.add(keys, key_pe)?;
        let a = self.final_attn.forward(s, q, k, keys, None)?;
        let queries = s.tape.add(queries, a)?;
        let queries = self.final_norm.forward(s, queries)?;

        let up = self.upscale1.forward(s, keys)?;
        let up = pixel_shuffle(s, up, g, g)?;
        let up = self.upscale_norm.forward(s, up)?;
        let up = s.tape.gelu(up)?;
        let up = self.upscale2.forward(s, up)?;
        let up = pixel_shuffle(s, up, 2 * g, 2 * g)?;
        let up = s.tape.gelu(up)?;

        let mask_out = s.tape.slice_rows(queries, 0, 1)?;
        let hyper = self.hyper.forward(s, mask_out)?;
        let logits = s.tape.matmul_ext(up, hyper, true)?;
        let side = c.native_mask_size();
        let logits = s.tape.reshape(logits, &[side, side])?;
        if side == c.mask_size {
            Ok(logits)
        } else {
            s.tape.resize_bilinear(logits, c.mask_size, c.mask_size)
        }
    }
}

/// `[h*w, 4c]` to `[(2h)*(2w), c]`: channel group `dy*2 + dx` of cell
/// `(i, j)` becomes output pixel `(2i+dy, 2j+dx)`. Together with the
/// preceding linear map this is a stride-2, kernel-2 transposed convolution.
pub fn pixel_shuffle(s: &mut Session<'_>, x: Var, h: usize, w: usize) -> Result<Var> {
    let shape = s.tape.shape(x).to_vec();
    if shape.len() != 2 || shape[0] != h * w || !shape[1].is_multiple_of(4) {
        return Err(Error::shape("pixel_shuffle", format!("{shape:?} for a {h}x{w} grid")));
    }
    let c = shape[1] / 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut index = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x_ in 0..ow {
            let (i, dy, j, dx) = (y / 2, y % 2, x_ / 2, x_ % 2);
            let base = (i * w + j) * shape[1] + (dy * 2 + dx) * c;
            index.extend(base..base + c);
        }
    }
    s.tape.gather(x, index, &[oh * ow, c])
}
