//! The assembled text-prompted segmenter.

use crate::autodiff::{Tape, Var};
use crate::data::{grammar_words, SegSample};
use crate::encoder::{EncoderConfig, MultimodalEncoder, TokenizedText, VocabTokenizer};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::Mask;
use crate::nn::{ParamStore, Session};
use crate::prompt::{GeometricPrompt, Projector, PromptEncoder};
use crate::sam::{MaskDecoder, SamConfig, SamImageEncoder};
use crate::tensor::{Elem, Tensor};

pub struct EvfSam {
    pub store: ParamStore,
    pub encoder: MultimodalEncoder,
    pub projector: Projector,
    pub prompt_encoder: PromptEncoder,
    pub image_encoder: SamImageEncoder,
    pub mask_decoder: MaskDecoder,
    pub tokenizer: VocabTokenizer,
    encoder_config: EncoderConfig,
    sam_config: SamConfig,
}

/// A sample converted to model inputs. The SAM feature grid is cached when
/// the image encoder is frozen, since it can then never change.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    pub tokens: TokenizedText,
    pub encoder_image: Image,
    pub sam_image: Image,
    pub sam_features: Option<Tensor>,
    /// `[mask_size, mask_size]` of 0/1.
    pub target: Tensor,
    pub mask: Mask,
}

impl EvfSam {
    /// All parameter groups are initialised from `seed`; each component's
    /// weights depend only on its own name and the seed.
    pub fn build(encoder_config: &EncoderConfig, sam_config: &SamConfig, seed: u64) -> Result<Self> {
        encoder_config.validate()?;
        sam_config.validate()?;
        let tokenizer = VocabTokenizer::new(&grammar_words(), encoder_config.max_text_len)?;
        if encoder_config.vocab_size < tokenizer.vocab_size() {
            return Err(Error::Config(format!(
                "vocab_size {} is smaller than the {} tokens of the grammar",
                encoder_config.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        let mut store = ParamStore::new();
        let encoder = MultimodalEncoder::build(&mut store, encoder_config, seed)?;
        let d_in = encoder_config.representation_dim();
        let hidden = sam_config.projector_hidden_dim.unwrap_or(encoder_config.embed_dim);
        let projector = Projector::build(&mut store, d_in, hidden, sam_config.feat_dim, seed);
        let prompt_encoder = PromptEncoder::build(&mut store, sam_config.feat_dim, seed)?;
        let image_encoder = SamImageEncoder::build(&mut store, sam_config, seed)?;
        let mask_decoder = MaskDecoder::build(&mut store, sam_config, seed)?;
        Ok(Self {
            store,
            encoder,
            projector,
            prompt_encoder,
            image_encoder,
            mask_decoder,
            tokenizer,
            encoder_config: encoder_config.clone(),
            sam_config: sam_config.clone(),
        })
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder_config
    }

    pub fn sam_config(&self) -> &SamConfig {
        &self.sam_config
    }

    /// Tokenizes and resizes a sample; `cache_features` precomputes the SAM
    /// feature grid.
    pub fn prepare(&self, sample: &SegSample, cache_features: bool) -> Result<PreparedSample> {
        let side = self.sam_config.mask_size;
        if (sample.mask.height, sample.mask.width) != (side, side) {
            return Err(Error::Validation(format!(
                "sample {}: mask is {}x{} but the model predicts {side}x{side}",
                sample.id, sample.mask.height, sample.mask.width
            )));
        }
        let mut p = self.prepare_input(&sample.image, &sample.expression, cache_features)?;
        p.id = sample.id.clone();
        p.target = sample.mask.to_tensor();
        p.mask = sample.mask.clone();
        Ok(p)
    }

    /// As [`EvfSam::prepare`] for an unlabeled input; the target is empty.
    pub fn prepare_input(&self, image: &Image, expression: &str, cache_features: bool) -> Result<PreparedSample> {
        let e = self.encoder_config.image_size;
        let s = self.sam_config.image_size;
        let sam_image = image.resized(s, s);
        let sam_features = if cache_features {
            Some(self.image_encoder.encode_image(&self.store, &sam_image)?.features)
        } else {
            None
        };
        let side = self.sam_config.mask_size;
        Ok(PreparedSample {
            id: String::new(),
            tokens: self.tokenizer.tokenize(expression),
            encoder_image: image.resized(e, e),
            sam_image,
            sam_features,
            target: Tensor::zeros(&[side, side]),
            mask: Mask::empty(side, side),
        })
    }

    /// Multimodal encoder and projector: the EVF token, `[1, feat_dim]`.
    pub fn evf_token(&self, s: &mut Session<'_>, input: &PreparedSample) -> Result<Var> {
        let out = self.encoder.encode(s, &input.encoder_image, &input.tokens)?;
        self.projector.forward(s, out.representation)
    }

    /// Mask logits `[mask_size, mask_size]`.
    pub fn forward(&self, s: &mut Session<'_>, input: &PreparedSample, geometric: &[GeometricPrompt]) -> Result<Var> {
        let evf = self.evf_token(s, input)?;
        let geo = if geometric.is_empty() {
            Vec::new()
        } else {
            vec![geometric.to_vec()]
        };
        let sparse = self.prompt_encoder.build_sparse_embeddings(s, evf, &geo)?;
        let features = match &input.sam_features {
            Some(f) => s.tape.constant(f.clone()),
            None => self.image_encoder.forward(s, &input.sam_image)?,
        };
        self.mask_decoder.forward(s, features, &sparse, &self.prompt_encoder)
    }

    /// Logits without gradient recording.
    pub fn predict_logits(&self, input: &PreparedSample) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut s = Session::inference(&mut tape, &self.store);
        let v = self.forward(&mut s, input, &[])?;
        Ok(tape.value(v).clone())
    }

    pub fn predict_mask(&self, input: &PreparedSample, threshold: Elem) -> Result<Mask> {
        Mask::from_logits(&self.predict_logits(input)?, threshold)
    }
}
