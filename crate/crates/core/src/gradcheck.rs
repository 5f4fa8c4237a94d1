//! Finite-difference checks of every trainable block, over randomly drawn
//! small configurations.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{AttentionMask, Tape, Var};
use crate::encoder::{CrossModal, EncoderConfig, FusionMode, MultimodalEncoder, Representation};
use crate::error::{Error, Result};
use crate::metrics::{total_loss, LossWeights};
use crate::nn::{mix_seed, ModuleGroup, ParamStore, Session};
use crate::prompt::{GeometricPrompt, Projector, PromptEncoder};
use crate::sam::{MaskDecoder, SamConfig};
use crate::tensor::{Elem, Tensor};

/// Largest relative error a block may show.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_CONFIGURATIONS: usize = 20;
const EPS: Elem = 1e-6;
/// Magnitude floor for the relative error: a difference of 1e-7 against a
/// vanishing gradient (e.g. key biases under softmax) is central-difference
/// round-off, and scores exactly at the tolerance.
const SCALE_FLOOR: Elem = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Attention,
    MultiwayFfn,
    Projector,
    TwoWayDecoder,
    Losses,
}

impl Block {
    pub const ALL: [Block; 5] = [
        Block::Attention,
        Block::MultiwayFfn,
        Block::Projector,
        Block::TwoWayDecoder,
        Block::Losses,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Block::Attention => "attention",
            Block::MultiwayFfn => "multiway",
            Block::Projector => "projector",
            Block::TwoWayDecoder => "decoder",
            Block::Losses => "losses",
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `all` or a single block name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    All,
    One(Block),
}

impl Scope {
    pub fn blocks(self) -> Vec<Block> {
        match self {
            Scope::All => Block::ALL.to_vec(),
            Scope::One(b) => vec![b],
        }
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Scope::All);
        }
        Block::ALL
            .iter()
            .find(|b| b.as_str() == s)
            .map(|&b| Scope::One(b))
            .ok_or_else(|| {
                let names: Vec<_> = Block::ALL.iter().map(|b| b.as_str()).collect();
                Error::Config(format!(
                    "unknown gradcheck scope {s:?}, expected all or one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockReport {
    pub block: Block,
    pub configurations: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

impl BlockReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

/// Checks every block of `scope` on `configurations` random setups each.
pub fn check_scope(scope: Scope, configurations: usize, seed: u64) -> Result<Vec<BlockReport>> {
    scope
        .blocks()
        .into_iter()
        .map(|b| check_block(b, configurations, seed))
        .collect()
}

pub fn check_block(block: Block, configurations: usize, seed: u64) -> Result<BlockReport> {
    let mut report = BlockReport {
        block,
        configurations,
        coordinates: 0,
        max_rel_error: 0.0,
    };
    for i in 0..configurations {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, block as u64), i as u64));
        let (n, err) = match block {
            Block::Attention => attention_case(&mut rng),
            Block::MultiwayFfn => multiway_case(&mut rng),
            Block::Projector => projector_case(&mut rng),
            Block::TwoWayDecoder => decoder_case(&mut rng),
            Block::Losses => loss_case(&mut rng),
        }?;
        report.coordinates += n;
        report.max_rel_error = report.max_rel_error.max(err as f64);
    }
    Ok(report)
}

/// Compares tape gradients with central differences for every parameter
/// coordinate reached by `f`. Returns (coordinates, max relative error).
fn check_store<F>(store: &mut ParamStore, f: F) -> Result<(usize, Elem)>
where
    F: Fn(&mut Session<'_>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut Session::train(&mut tape, store))?;
    tape.backward(out)?;
    let analytic: Vec<(usize, Tensor)> = tape.keyed_grads().map(|(k, g)| (k, g.clone())).collect();

    let eval = |store: &ParamStore| -> Result<Elem> {
        let mut tape = Tape::new();
        let out = f(&mut Session::inference(&mut tape, store))?;
        Ok(tape.value(out).item())
    };
    let ids: Vec<_> = store.ids().collect();
    let (mut n, mut worst) = (0, 0.0 as Elem);
    for (key, grad) in analytic {
        let id = ids[key];
        for c in 0..grad.numel() {
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + EPS;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[c] = orig - EPS;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * EPS);
            let a = grad.data()[c];
            let diff = (a - numeric).abs();
            let rel = diff / a.abs().max(numeric.abs()).max(SCALE_FLOOR);
            worst = worst.max(rel);
            n += 1;
        }
    }
    Ok((n, worst))
}

/// `sum(x * r)` for a fixed random `r`, so every output coordinate gets a
/// distinct upstream gradient.
fn probe(s: &mut Session<'_>, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let r = Tensor::randn(s.tape.shape(x), 1.0, rng);
    let r = s.tape.constant(r);
    let y = s.tape.mul(x, r)?;
    s.tape.sum(y)
}

fn input(store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> crate::nn::ParamId {
    store.add(
        format!("input.{name}"),
        ModuleGroup::MultimodalEncoder,
        Tensor::randn(shape, 1.0, rng),
    )
}

fn attention_case(rng: &mut ChaCha8Rng) -> Result<(usize, Elem)> {
    let heads = rng.random_range(1..=3);
    let dim = heads * rng.random_range(1..=3);
    let inner = heads * rng.random_range(1..=2);
    let (nq, nk) = (rng.random_range(1..=4), rng.random_range(1..=5));
    let mut store = ParamStore::new();
    let attn = store
        .builder(ModuleGroup::MultimodalEncoder, rng.random())
        .attention("attn", dim, inner, heads);
    let q = input(&mut store, "q", &[nq, dim], rng);
    let kv = input(&mut store, "kv", &[nk, dim], rng);
    // every query keeps at least its first key
    let blocked: Vec<bool> = (0..nq * nk).map(|_| rng.random_bool(0.3)).collect();
    let mask = AttentionMask::from_fn(nq, nk, |i, j| j == 0 || !blocked[i * nk + j]);
    let use_mask = rng.random_bool(0.5);
    let probe_seed: u64 = rng.random();
    check_store(&mut store, |s| {
        let (q, kv) = (s.param(q), s.param(kv));
        let o = attn.forward(s, q, kv, kv, use_mask.then_some(&mask))?;
        probe(s, o, &mut ChaCha8Rng::seed_from_u64(probe_seed))
    })
}

fn multiway_case(rng: &mut ChaCha8Rng) -> Result<(usize, Elem)> {
    let num_layers = rng.random_range(1..=3);
    let heads = rng.random_range(1..=2);
    let fusion_mode = match rng.random_range(0..3) {
        0 => FusionMode::TextOnly,
        1 => FusionMode::LateConcat,
        _ => FusionMode::Early {
            fusion_depth: rng.random_range(0..=num_layers),
        },
    };
    let representation = match fusion_mode {
        FusionMode::Early { .. } => Representation::ALL[rng.random_range(0..4)],
        m => m.default_representation(),
    };
    let cfg = EncoderConfig {
        num_layers,
        embed_dim: 4 * heads,
        num_heads: heads,
        ffn_dim: rng.random_range(3..=8),
        image_size: 8,
        patch_size: 4,
        vocab_size: 8,
        max_text_len: rng.random_range(2..=4),
        fusion_mode,
        representation,
    };
    let mut store = ParamStore::new();
    let enc = MultimodalEncoder::build(&mut store, &cfg, rng.random())?;
    let t = cfg.max_text_len;
    let text = input(&mut store, "text", &[t, cfg.embed_dim], rng);
    let image = cfg
        .uses_image()
        .then(|| input(&mut store, "image", &[cfg.num_patches() + 1, cfg.embed_dim], rng));
    let valid: Vec<bool> = (0..t).map(|i| i < 2 || rng.random_bool(0.6)).collect();
    let cross = if rng.random_bool(0.2) {
        CrossModal::BlockedEverywhere
    } else {
        CrossModal::AsConfigured
    };
    let probe_seed: u64 = rng.random();
    check_store(&mut store, |s| {
        let t = s.param(text);
        let i = image.map(|i| s.param(i));
        let out = enc.encode_embeddings(s, t, i, &valid, cross)?;
        let mut r = ChaCha8Rng::seed_from_u64(probe_seed);
        let a = probe(s, out.states, &mut r)?;
        let b = probe(s, out.representation, &mut r)?;
        s.tape.add(a, b)
    })
}

fn projector_case(rng: &mut ChaCha8Rng) -> Result<(usize, Elem)> {
    let (d_in, hidden, d_out) = (
        rng.random_range(1..=8),
        rng.random_range(1..=8),
        rng.random_range(1..=8),
    );
    let rows = rng.random_range(1..=3);
    let mut store = ParamStore::new();
    let proj = Projector::build(&mut store, d_in, hidden, d_out, rng.random());
    let x = input(&mut store, "x", &[rows, d_in], rng);
    let probe_seed: u64 = rng.random();
    check_store(&mut store, |s| {
        let x = s.param(x);
        let y = proj.forward(s, x)?;
        probe(s, y, &mut ChaCha8Rng::seed_from_u64(probe_seed))
    })
}

fn decoder_case(rng: &mut ChaCha8Rng) -> Result<(usize, Elem)> {
    let feat_dim = 8 * rng.random_range(1..=2);
    let cfg = SamConfig {
        image_size: 4 * rng.random_range(1..=2),
        patch_size: 4,
        feat_dim,
        decoder_blocks: rng.random_range(1..=2),
        decoder_heads: if feat_dim == 16 { 2 } else { rng.random_range(1..=2) },
        decoder_mlp_dim: rng.random_range(4..=8),
        attention_downsample: rng.random_range(1..=2),
        mask_size: rng.random_range(3..=8),
        ..SamConfig::default()
    };
    cfg.validate()?;
    let g = cfg.grid_size();
    let mut store = ParamStore::new();
    let prompts = PromptEncoder::build(&mut store, feat_dim, rng.random())?;
    let decoder = MaskDecoder::build(&mut store, &cfg, rng.random())?;
    let features = input(&mut store, "features", &[g * g, feat_dim], rng);
    let evf = input(&mut store, "evf", &[1, feat_dim], rng);
    let mut geometric = Vec::new();
    for _ in 0..rng.random_range(0..=1) {
        geometric.push(GeometricPrompt::Point {
            x: rng.random(),
            y: rng.random(),
        });
    }
    if rng.random_bool(0.3) {
        let (x0, y0): (f64, f64) = (rng.random_range(0.0..0.5), rng.random_range(0.0..0.5));
        geometric.push(GeometricPrompt::Box {
            x0,
            y0,
            x1: x0 + 0.4,
            y1: y0 + 0.4,
        });
    }
    let probe_seed: u64 = rng.random();
    check_store(&mut store, |s| {
        let f = s.param(features);
        let e = s.param(evf);
        let sparse = prompts.build_sparse_embeddings(s, e, std::slice::from_ref(&geometric))?;
        let logits = decoder.forward(s, f, &sparse, &prompts)?;
        probe(s, logits, &mut ChaCha8Rng::seed_from_u64(probe_seed))
    })
}

fn loss_case(rng: &mut ChaCha8Rng) -> Result<(usize, Elem)> {
    let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
    let target = Tensor::from_fn(&[h, w], |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
    let weights = LossWeights {
        bce: rng.random_range(0.0..2.0),
        dice: rng.random_range(0.0..2.0),
    };
    let mut store = ParamStore::new();
    let logits = store.add(
        "input.logits".into(),
        ModuleGroup::MaskDecoder,
        Tensor::randn(&[h, w], 2.0, rng),
    );
    check_store(&mut store, |s| {
        let z = s.param(logits);
        Ok(total_loss(s.tape, z, &target, weights)?.total)
    })
}
