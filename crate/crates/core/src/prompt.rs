//! Projector and adapted prompt encoder: turn the encoder's summary vector
//! into the sparse prompt tokens the mask decoder consumes.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Builder, Linear, ModuleGroup, ParamId, ParamStore, Session};
use crate::tensor::{Elem, Tensor};

/// `linear2(relu(linear1(x)))`.
#[derive(Clone, Debug)]
pub struct Projector {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Projector {
    /// Trains and freezes together with the multimodal encoder.
    pub fn build(store: &mut ParamStore, d_in: usize, hidden: usize, d_out: usize, seed: u64) -> Self {
        let mut b = store.builder_at(ModuleGroup::MultimodalEncoder, "projector", seed);
        Self {
            fc1: b.linear("fc1", d_in, hidden),
            fc2: b.linear("fc2", hidden, d_out),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.d_in
    }

    pub fn output_dim(&self) -> usize {
        self.fc2.d_out
    }

    /// `x: [B, d_in]` to `[B, d_out]`.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let d = s.tape.shape(x);
        if d.len() != 2 || d[1] != self.fc1.d_in {
            return Err(Error::shape(
                "project",
                format!("input {:?} for projector expecting width {}", d, self.fc1.d_in),
            ));
        }
        let h = self.fc1.forward(s, x)?;
        let h = s.tape.relu(h)?;
        self.fc2.forward(s, h)
    }
}

/// A geometric prompt in normalized `[0, 1]^2` image coordinates
/// (`x` to the right, `y` down).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeometricPrompt {
    Point { x: f64, y: f64 },
    Box { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl GeometricPrompt {
    fn validate(&self) -> Result<()> {
        let coords: &[f64] = match self {
            GeometricPrompt::Point { x, y } => &[*x, *y],
            GeometricPrompt::Box { x0, y0, x1, y1 } => &[*x0, *y0, *x1, *y1],
        };
        if coords.iter().all(|c| (0.0..=1.0).contains(c)) {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "prompt {self:?} has coordinates outside [0, 1]"
            )))
        }
    }

    fn token_count(&self) -> usize {
        match self {
            GeometricPrompt::Point { .. } => 1,
            GeometricPrompt::Box { .. } => 2,
        }
    }
}

/// Where each sparse token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Point,
    BoxCorner(u8),
    /// The projected multimodal embedding.
    Evf,
}

/// `[B, N, prompt_dim]` sparse prompt block; the EVF token is last.
#[derive(Clone, Debug)]
pub struct SparsePromptEmbeddings {
    pub tokens: Var,
    pub kinds: Vec<TokenKind>,
}

impl SparsePromptEmbeddings {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }
}

/// Fixed sinusoidal features of 2-D coordinates.
///
/// A `dim`-wide code uses `dim / 4` frequencies `2^k * pi`, with
/// `[sin(fx), cos(fx), sin(fy), cos(fy)]` per frequency.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordinateEncoding {
    dim: usize,
}

impl CoordinateEncoding {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "prompt_dim {dim} must be a positive multiple of 4"
            )));
        }
        Ok(Self { dim })
    }

    pub fn encode(&self, x: f64, y: f64) -> Vec<Elem> {
        let mut out = Vec::with_capacity(self.dim);
        for k in 0..self.dim / 4 {
            let f = PI * (1u64 << k.min(62)) as f64;
            out.extend([(f * x).sin(), (f * x).cos(), (f * y).sin(), (f * y).cos()].map(|v| v as Elem));
        }
        out
    }

    /// Encoding of every cell center of an `h x w` grid, `[h*w, dim]`.
    pub fn grid(&self, h: usize, w: usize) -> Tensor {
        let mut data = Vec::with_capacity(h * w * self.dim);
        for i in 0..h {
            for j in 0..w {
                data.extend(self.encode((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64));
            }
        }
        Tensor::from_parts(vec![h * w, self.dim], data)
    }
}

/// SAM's prompt encoder reduced to what text prompting needs: per-kind
/// embeddings for points and box corners, and the learned "no mask" dense
/// embedding.
#[derive(Clone, Debug)]
pub struct PromptEncoder {
    point: ParamId,
    box_corners: [ParamId; 2],
    no_mask: ParamId,
    coords: CoordinateEncoding,
}

impl PromptEncoder {
    pub fn build(store: &mut ParamStore, prompt_dim: usize, seed: u64) -> Result<Self> {
        let coords = CoordinateEncoding::new(prompt_dim)?;
        let mut b: Builder<'_> = store.builder(ModuleGroup::PromptEncoder, seed);
        Ok(Self {
            point: b.normal("point_embed", &[1, prompt_dim], 1.0),
            box_corners: [
                b.normal("box_corner_embed.0", &[1, prompt_dim], 1.0),
                b.normal("box_corner_embed.1", &[1, prompt_dim], 1.0),
            ],
            no_mask: b.normal("no_mask_embed", &[1, prompt_dim], 1.0),
            coords,
        })
    }

    pub fn prompt_dim(&self) -> usize {
        self.coords.dim
    }

    pub fn coordinate_encoding(&self) -> CoordinateEncoding {
        self.coords
    }

    /// Appends each sample's EVF token (`evf: [B, prompt_dim]`) to its
    /// encoded geometric prompts. Every sample must carry the same prompt
    /// structure. With no geometric prompts the result is `[B, 1, D]`.
    pub fn build_sparse_embeddings(
        &self,
        s: &mut Session<'_>,
        evf: Var,
        geometric: &[Vec<GeometricPrompt>],
    ) -> Result<SparsePromptEmbeddings> {
        let shape = s.tape.shape(evf).to_vec();
        let d = self.prompt_dim();
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::shape(
                "build_sparse_embeddings",
                format!("evf tokens {shape:?} for prompt_dim {d}"),
            ));
        }
        let batch = shape[0];
        if geometric.len() != batch && !geometric.is_empty() {
            return Err(Error::Validation(format!(
                "{} geometric prompt lists for a batch of {batch}",
                geometric.len()
            )));
        }
        let structure = |p: &[GeometricPrompt]| p.iter().map(GeometricPrompt::token_count).collect::<Vec<_>>();
        if let Some(first) = geometric.first() {
            if geometric.iter().any(|g| structure(g) != structure(first)) {
                return Err(Error::Validation(
                    "all samples in a batch need the same geometric prompt layout".into(),
                ));
            }
        }
        for p in geometric.iter().flatten() {
            p.validate()?;
        }

        let mut kinds = Vec::new();
        if let Some(first) = geometric.first() {
            for p in first {
                match p {
                    GeometricPrompt::Point { .. } => kinds.push(TokenKind::Point),
                    GeometricPrompt::Box { .. } => kinds.extend([TokenKind::BoxCorner(0), TokenKind::BoxCorner(1)]),
                }
            }
        }
        kinds.push(TokenKind::Evf);
        let n = kinds.len();

        let mut per_sample = Vec::with_capacity(batch);
        for b in 0..batch {
            let evf_row = s.tape.slice_rows(evf, b, b + 1)?;
            let mut rows = Vec::with_capacity(n);
            for p in geometric.get(b).map(Vec::as_slice).unwrap_or(&[]) {
                match *p {
                    GeometricPrompt::Point { x, y } => rows.push(self.encode_geometric(s, x, y, self.point)?),
                    GeometricPrompt::Box { x0, y0, x1, y1 } => {
                        rows.push(self.encode_geometric(s, x0, y0, self.box_corners[0])?);
                        rows.push(self.encode_geometric(s, x1, y1, self.box_corners[1])?);
                    }
                }
            }
            rows.push(evf_row);
            let block = if rows.len() == 1 {
                rows[0]
            } else {
                s.tape.concat(&rows, 0)?
            };
            per_sample.push(s.tape.reshape(block, &[1, n, d])?);
        }
        let tokens = if batch == 1 {
            per_sample[0]
        } else {
            s.tape.concat(&per_sample, 0)?
        };
        Ok(SparsePromptEmbeddings { tokens, kinds })
    }

    fn encode_geometric(&self, s: &mut Session<'_>, x: f64, y: f64, kind: ParamId) -> Result<Var> {
        let code = s
            .tape
            .constant(Tensor::from_parts(vec![1, self.prompt_dim()], self.coords.encode(x, y)));
        let k = s.param(kind);
        s.tape.add(code, k)
    }

    /// The "no mask" embedding broadcast over an `h x w` grid, `[h*w, D]`.
    pub fn dense_embeddings(&self, s: &mut Session<'_>, h: usize, w: usize) -> Result<Var> {
        let e = s.param(self.no_mask);
        s.tape.select_rows(e, &vec![0; h * w])
    }
}
