//! Segmentation losses and the gIoU / cIoU metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

pub const DICE_SMOOTH: Elem = 1.0;

/// Relative weights of the two loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub bce: Elem,
    pub dice: Elem,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { bce: 1.0, dice: 1.0 }
    }
}

/// Loss terms of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub bce: Var,
    pub dice: Var,
}

pub fn bce_loss(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    tape.bce_with_logits(logits, target)
}

pub fn dice_loss(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    tape.dice_with_logits(logits, target, DICE_SMOOTH)
}

/// `weights.bce * bce + weights.dice * dice`.
pub fn total_loss(tape: &mut Tape, logits: Var, target: &Tensor, weights: LossWeights) -> Result<LossVars> {
    let bce = bce_loss(tape, logits, target)?;
    let dice = dice_loss(tape, logits, target)?;
    let a = tape.scale(bce, weights.bce)?;
    let b = tape.scale(dice, weights.dice)?;
    let total = tape.add(a, b)?;
    Ok(LossVars { total, bce, dice })
}

/// A binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Validation(format!(
                "{} mask values for {height}x{width}",
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Pixels with logit strictly above `threshold`.
    pub fn from_logits(logits: &Tensor, threshold: Elem) -> Result<Self> {
        if logits.rank() != 2 {
            return Err(Error::shape(
                "binarize",
                format!("logits {:?} are not a 2-D map", logits.shape()),
            ));
        }
        let (h, w) = (logits.shape()[0], logits.shape()[1]);
        Ok(Self {
            height: h,
            width: w,
            bits: logits.data().iter().map(|&z| z > threshold).collect(),
        })
    }

    /// `[h, w]` tensor of 0/1.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.height, self.width],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Intersection and union pixel counts.
    pub fn overlap(&self, other: &Mask) -> Result<(u64, u64)> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Validation(format!(
                "mask shapes {}x{} and {}x{} differ",
                self.height, self.width, other.height, other.width
            )));
        }
        let (mut inter, mut union) = (0u64, 0u64);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as u64;
            union += (a || b) as u64;
        }
        Ok((inter, union))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub giou: f64,
    pub ciou: f64,
    pub n_samples: usize,
    pub intersection: u64,
    pub union: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_sample_iou: Vec<f64>,
}

impl MetricsReport {
    /// One `key value` pair per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "giou {:.6}", self.giou).unwrap();
        writeln!(s, "ciou {:.6}", self.ciou).unwrap();
        writeln!(s, "n_samples {}", self.n_samples).unwrap();
        writeln!(s, "intersection {}", self.intersection).unwrap();
        writeln!(s, "union {}", self.union).unwrap();
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// gIoU is the mean per-sample IoU, cIoU the ratio of summed intersections
/// to summed unions. An empty prediction on an empty target counts as IoU 1
/// and adds nothing to the cIoU sums. With no samples, or a zero total
/// union, both metrics are reported as 1 when nothing was expected.
pub fn compute_metrics(pred: &[Mask], gt: &[Mask]) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} ground-truth masks",
            pred.len(),
            gt.len()
        )));
    }
    let mut per_sample = Vec::with_capacity(pred.len());
    let (mut inter, mut union) = (0u64, 0u64);
    for (p, g) in pred.iter().zip(gt) {
        let (i, u) = p.overlap(g)?;
        inter += i;
        union += u;
        per_sample.push(if u == 0 { 1.0 } else { i as f64 / u as f64 });
    }
    let n = per_sample.len();
    let giou = if n == 0 {
        0.0
    } else {
        per_sample.iter().sum::<f64>() / n as f64
    };
    let ciou = if union == 0 {
        if n == 0 {
            0.0
        } else {
            1.0
        }
    } else {
        inter as f64 / union as f64
    };
    Ok(MetricsReport {
        giou,
        ciou,
        n_samples: n,
        intersection: inter,
        union,
        per_sample_iou: per_sample,
    })
}
