//! Training loop, evaluation, checkpoints and ablation sweeps.

mod ablate;
mod checkpoint;
mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablate::{ablate, AblationAxes, AblationCell, AblationReport, AblationRow, FusionChoice};
pub use checkpoint::Checkpoint;
pub use optim::{linear_decay, AdamW, AdamWConfig};

use crate::autodiff::Tape;
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, total_loss, LossWeights, Mask, MetricsReport};
use crate::model::{EvfSam, PreparedSample};
use crate::nn::{mix_seed, Grads, ModuleGroup, Session};
use crate::tensor::Elem;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleState {
    Trainable,
    Frozen,
}

impl ModuleState {
    pub fn is_frozen(self) -> bool {
        self == ModuleState::Frozen
    }
}

/// Which components the optimizer may update. The projector follows the
/// multimodal encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreezeFlags {
    pub image_encoder: ModuleState,
    pub multimodal_encoder: ModuleState,
    pub prompt_encoder: ModuleState,
    pub mask_decoder: ModuleState,
}

impl Default for FreezeFlags {
    fn default() -> Self {
        Self {
            image_encoder: ModuleState::Frozen,
            multimodal_encoder: ModuleState::Trainable,
            prompt_encoder: ModuleState::Trainable,
            mask_decoder: ModuleState::Trainable,
        }
    }
}

impl FreezeFlags {
    pub fn state(&self, group: ModuleGroup) -> ModuleState {
        match group {
            ModuleGroup::ImageEncoder => self.image_encoder,
            ModuleGroup::MultimodalEncoder => self.multimodal_encoder,
            ModuleGroup::PromptEncoder => self.prompt_encoder,
            ModuleGroup::MaskDecoder => self.mask_decoder,
        }
    }

    /// Trainable/frozen pattern over (multimodal encoder, prompt encoder,
    /// mask decoder), e.g. `TFT`.
    pub fn label(&self) -> String {
        [self.multimodal_encoder, self.prompt_encoder, self.mask_decoder]
            .iter()
            .map(|s| if s.is_frozen() { 'F' } else { 'T' })
            .collect()
    }

    /// The four rows of the trainable-module study, image encoder frozen.
    pub fn study_rows() -> [FreezeFlags; 4] {
        use ModuleState::{Frozen as F, Trainable as T};
        let row = |m, p, d| FreezeFlags {
            image_encoder: F,
            multimodal_encoder: m,
            prompt_encoder: p,
            mask_decoder: d,
        };
        [row(F, F, T), row(T, F, F), row(T, F, T), row(T, T, T)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_final: f64,
    pub total_iterations: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub loss_weights: LossWeights,
    /// Seeds weight initialisation and batch order.
    pub seed: u64,
    pub freeze: FreezeFlags,
    pub adamw: AdamWConfig,
    /// Evaluate every this many steps (0: only at the end).
    pub eval_every: usize,
    pub eval_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_final: 0.0,
            total_iterations: 1000,
            batch_size: 8,
            grad_accum_steps: 2,
            loss_weights: LossWeights::default(),
            seed: 0,
            freeze: FreezeFlags::default(),
            adamw: AdamWConfig::default(),
            eval_every: 0,
            eval_threshold: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(Error::Config("batch_size and grad_accum_steps must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr_final.is_finite()) || self.lr < 0.0 || self.lr_final < 0.0 {
            return Err(Error::Config(format!(
                "invalid learning rates {} -> {}",
                self.lr, self.lr_final
            )));
        }
        let a = self.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 || a.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid AdamW settings {a:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        linear_decay(self.lr, self.lr_final, t, self.total_iterations)
    }

    /// Samples consumed per optimizer step.
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step {
        it: usize,
        lr: f64,
        loss: f64,
        bce: f64,
        dice: f64,
    },
    Eval {
        it: usize,
        giou: f64,
        ciou: f64,
    },
}

impl LogRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

/// Endless epoch-wise shuffled index stream.
#[derive(Clone, Debug)]
struct Sampler {
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
    /// Draws still to discard, used when resuming.
    skip: usize,
}

impl Sampler {
    fn new(seed: u64) -> Self {
        Self {
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
            skip: 0,
        }
    }

    fn next(&mut self, n: usize) -> usize {
        while self.skip > 0 {
            self.skip -= 1;
            self.draw(n);
        }
        self.draw(n)
    }

    fn draw(&mut self, n: usize) -> usize {
        if self.cursor >= self.order.len() || self.order.len() != n {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, self.epoch));
            self.order = (0..n).collect();
            rand::seq::SliceRandom::shuffle(self.order.as_mut_slice(), &mut rng);
            self.epoch += 1;
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

pub struct Trainer {
    pub model: EvfSam,
    pub optimizer: AdamW,
    /// Optimizer steps taken.
    pub iteration: usize,
    config: TrainConfig,
    sampler: Sampler,
}

impl Trainer {
    /// Applies the freeze flags to the model's parameters.
    pub fn new(mut model: EvfSam, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        for g in ModuleGroup::ALL {
            model.store.set_frozen(g, config.freeze.state(g).is_frozen());
        }
        let optimizer = AdamW::new(config.adamw, &model.store);
        Ok(Self {
            model,
            optimizer,
            iteration: 0,
            config: config.clone(),
            sampler: Sampler::new(mix_seed(config.seed, 0x5eed)),
        })
    }

    /// Positions the trainer after `iteration` optimizer steps: the batch
    /// order continues as if those steps had been taken on the same data.
    pub fn resume_at(&mut self, iteration: usize) {
        self.iteration = iteration;
        self.sampler = Sampler::new(self.sampler.seed);
        self.sampler.skip = iteration * self.config.effective_batch();
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Converts samples, caching SAM features when the image encoder is
    /// frozen.
    pub fn prepare(&self, samples: &[SegSample]) -> Result<Vec<PreparedSample>> {
        let cache = self.model.store.is_frozen(ModuleGroup::ImageEncoder);
        samples.iter().map(|s| self.model.prepare(s, cache)).collect()
    }

    /// Accumulated gradients for the next optimizer step, without applying
    /// them. Returns the gradients and the mean (total, bce, dice) losses.
    pub fn compute_gradients(&mut self, data: &[PreparedSample]) -> Result<(Grads, [f64; 3])> {
        if data.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        let cfg = &self.config;
        let image_trainable = !self.model.store.is_frozen(ModuleGroup::ImageEncoder);
        let mut grads = Grads::new(&self.model.store);
        let mut sums = [0.0f64; 3];
        for _ in 0..cfg.grad_accum_steps {
            for _ in 0..cfg.batch_size {
                let sample = &data[self.sampler.next(data.len())];
                if image_trainable && sample.sam_features.is_some() {
                    return Err(Error::Contract(
                        "cached image features cannot train a trainable image encoder".into(),
                    ));
                }
                let mut tape = Tape::new();
                let mut s = Session::train(&mut tape, &self.model.store);
                let logits = self.model.forward(&mut s, sample, &[])?;
                let loss = total_loss(s.tape, logits, &sample.target, cfg.loss_weights)?;
                tape.backward(loss.total)?;
                for (acc, v) in sums.iter_mut().zip([loss.total, loss.bce, loss.dice]) {
                    *acc += tape.value(v).item() as f64;
                }
                grads.accumulate(&tape, 1.0 / cfg.batch_size as Elem);
            }
        }
        grads.scale(1.0 / cfg.grad_accum_steps as Elem);
        let n = cfg.effective_batch() as f64;
        Ok((grads, sums.map(|v| v / n)))
    }

    /// One optimizer step over `grad_accum_steps` micro-batches.
    pub fn step(&mut self, data: &[PreparedSample]) -> Result<LogRecord> {
        let it = self.iteration;
        let diverged = |detail: String| Error::Diverged { iteration: it, detail };
        let (grads, [loss, bce, dice]) = self.compute_gradients(data).map_err(|e| match e {
            Error::NonFinite(m) => diverged(m),
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(diverged(format!("loss is {loss}")));
        }
        let lr = self.config.lr_at(it);
        self.optimizer
            .update(&mut self.model.store, &grads, lr)
            .map_err(|e| match e {
                Error::NonFinite(m) => diverged(m),
                other => other,
            })?;
        self.iteration += 1;
        Ok(LogRecord::Step {
            it,
            lr,
            loss,
            bce,
            dice,
        })
    }

    /// Runs until `total_iterations`, evaluating on `eval_data` every
    /// `eval_every` steps and at the end. Each record is passed to `log`
    /// as it is produced.
    pub fn run(
        &mut self,
        data: &[PreparedSample],
        eval_data: &[PreparedSample],
        mut log: impl FnMut(&LogRecord) -> Result<()>,
    ) -> Result<Vec<LogRecord>> {
        let mut records = Vec::new();
        let total = self.config.total_iterations;
        let every = self.config.eval_every;
        while self.iteration < total {
            let rec = self.step(data)?;
            log(&rec)?;
            records.push(rec);
            let done = self.iteration == total;
            if !eval_data.is_empty() && (done || (every > 0 && self.iteration.is_multiple_of(every))) {
                let r = evaluate(&self.model, eval_data, self.config.eval_threshold as Elem)?;
                let rec = LogRecord::Eval {
                    it: self.iteration,
                    giou: r.giou,
                    ciou: r.ciou,
                };
                log(&rec)?;
                records.push(rec);
            }
        }
        Ok(records)
    }
}

/// Binarizes logits at `threshold` and scores them against each sample's
/// mask.
pub fn evaluate(model: &EvfSam, data: &[PreparedSample], threshold: Elem) -> Result<MetricsReport> {
    let preds = data
        .iter()
        .map(|d| model.predict_mask(d, threshold))
        .collect::<Result<Vec<Mask>>>()?;
    let gts: Vec<Mask> = data.iter().map(|d| d.mask.clone()).collect();
    compute_metrics(&preds, &gts)
}
