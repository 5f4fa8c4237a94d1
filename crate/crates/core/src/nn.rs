//! Named parameters and the small layers every model component is built from.

use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionMask, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// The four independently freezable parts of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleGroup {
    ImageEncoder,
    MultimodalEncoder,
    PromptEncoder,
    MaskDecoder,
}

impl ModuleGroup {
    pub const ALL: [ModuleGroup; 4] = [
        ModuleGroup::ImageEncoder,
        ModuleGroup::MultimodalEncoder,
        ModuleGroup::PromptEncoder,
        ModuleGroup::MaskDecoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleGroup::ImageEncoder => "image_encoder",
            ModuleGroup::MultimodalEncoder => "multimodal_encoder",
            ModuleGroup::PromptEncoder => "prompt_encoder",
            ModuleGroup::MaskDecoder => "mask_decoder",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ModuleGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ModuleGroup,
    pub value: Tensor,
}

/// Every parameter of a model, addressable by id or hierarchical name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
    frozen: [bool; 4],
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn add(&mut self, name: String, group: ModuleGroup, value: Tensor) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_frozen(&mut self, group: ModuleGroup, frozen: bool) {
        self.frozen[group.index()] = frozen;
    }

    pub fn is_frozen(&self, group: ModuleGroup) -> bool {
        self.frozen[group.index()]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        !self.is_frozen(self.params[id.0].group)
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces the value of `name` keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    /// Parameters added under `group` with names prefixed by the group name.
    pub fn builder(&mut self, group: ModuleGroup, seed: u64) -> Builder<'_> {
        self.builder_at(group, group.as_str(), seed)
    }

    /// Parameters added under `group` with names prefixed by `prefix`. The
    /// RNG is seeded from `(seed, prefix)` so a component's initial weights do
    /// not depend on which other components exist.
    pub fn builder_at(&mut self, group: ModuleGroup, prefix: &str, seed: u64) -> Builder<'_> {
        let tag = prefix.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
        });
        Builder {
            store: self,
            group,
            prefix: prefix.to_string(),
            rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, tag)),
        }
    }
}

/// SplitMix64 finaliser over `a ^ rotated b`; platform independent.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.rotate_left(32) ^ 0x9E37_79B9_7F4A_7C15;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Adds parameters under a name prefix using a group-local RNG.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    group: ModuleGroup,
    prefix: String,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    pub fn group(&self) -> ModuleGroup {
        self.group
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = format!("{saved}.{name}");
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = format!("{}.{name}", self.prefix);
        self.store.add(full, self.group, value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: Elem) -> ParamId {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.tensor(name, t)
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        self.scope(name, |b| {
            let bound = (6.0 / (d_in + d_out) as Elem).sqrt();
            let w = Tensor::uniform(&[d_in, d_out], -bound, bound, &mut b.rng);
            Linear {
                weight: b.tensor("weight", w),
                bias: b.zeros("bias", &[d_out]),
                d_in,
                d_out,
            }
        })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        self.scope(name, |b| LayerNorm {
            gamma: b.tensor("weight", Tensor::ones(&[dim])),
            beta: b.zeros("bias", &[dim]),
        })
    }

    pub fn mlp(&mut self, name: &str, dims: &[usize], act: Activation) -> Mlp {
        self.scope(name, |b| Mlp {
            layers: dims
                .windows(2)
                .enumerate()
                .map(|(i, w)| b.linear(&format!("layers.{i}"), w[0], w[1]))
                .collect(),
            act,
        })
    }

    /// Separate q/k/v/out projections; the attention runs at `inner` width.
    pub fn attention(&mut self, name: &str, dim: usize, inner: usize, heads: usize) -> Attention {
        assert!(
            inner.is_multiple_of(heads),
            "attention width {inner} not divisible by {heads} heads"
        );
        self.scope(name, |b| Attention {
            q: b.linear("q_proj", dim, inner),
            k: b.linear("k_proj", dim, inner),
            v: b.linear("v_proj", dim, inner),
            out: b.linear("out_proj", inner, dim),
            heads,
        })
    }
}

/// A forward pass in progress: the tape being recorded plus the parameters.
pub struct Session<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a ParamStore,
    record_grads: bool,
}

impl<'a> Session<'a> {
    /// Trainable parameters are recorded as gradient-requiring leaves.
    pub fn train(tape: &'a mut Tape, params: &'a ParamStore) -> Self {
        Self {
            tape,
            params,
            record_grads: true,
        }
    }

    /// No parameter requires a gradient.
    pub fn inference(tape: &'a mut Tape, params: &'a ParamStore) -> Self {
        Self {
            tape,
            params,
            record_grads: false,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let requires = self.record_grads && self.params.is_trainable(id);
        let params = self.params;
        self.tape.keyed_leaf(id.index(), requires, || params.value(id).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

fn activate(s: &mut Session<'_>, act: Activation, x: Var) -> Result<Var> {
    match act {
        Activation::Relu => s.tape.relu(x),
        Activation::Gelu => s.tape.gelu(x),
    }
}

/// `y = x W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.tape.matmul(x, w)?;
        s.tape.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: Elem = 1e-5;

impl LayerNorm {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Linear layers with an activation between consecutive layers (none after
/// the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    pub fn forward(&self, s: &mut Session<'_>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(s, x)?;
            if i < last {
                x = activate(s, self.act, x)?;
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn forward(&self, s: &mut Session<'_>, q: Var, k: Var, v: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let q = self.q.forward(s, q)?;
        let k = self.k.forward(s, k)?;
        let v = self.v.forward(s, v)?;
        let o = s.tape.attention(q, k, v, self.heads, mask)?;
        self.out.forward(s, o)
    }
}

/// Gradient accumulator indexed by parameter id.
#[derive(Clone, Debug)]
pub struct Grads {
    bufs: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            bufs: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.bufs[id.0].as_ref()
    }

    /// Adds `weight * grad` for every parameter leaf on `tape`.
    pub fn accumulate(&mut self, tape: &Tape, weight: Elem) {
        for (key, g) in tape.keyed_grads() {
            let slot = &mut self.bufs[key];
            match slot {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += weight * v;
                    }
                }
                None => *slot = Some(g.map(|v| v * weight)),
            }
        }
    }

    pub fn scale(&mut self, c: Elem) {
        for t in self.bufs.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.bufs
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn clear(&mut self) {
        self.bufs.iter_mut().for_each(|g| *g = None);
    }
}
