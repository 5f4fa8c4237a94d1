use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{evaluate, FreezeFlags, Trainer};
use crate::config::RunConfig;
use crate::data::SegSample;
use crate::encoder::{FusionMode, Representation};
use crate::error::{Error, Result};
use crate::model::EvfSam;
use crate::tensor::Elem;

/// Fusion settings by name, resolved against the configured depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionChoice {
    TextOnly,
    LateConcat,
    EarlyHalf,
    EarlyFull,
}

impl FusionChoice {
    pub fn mode(self, num_layers: usize) -> FusionMode {
        match self {
            FusionChoice::TextOnly => FusionMode::TextOnly,
            FusionChoice::LateConcat => FusionMode::LateConcat,
            FusionChoice::EarlyHalf => FusionMode::Early {
                fusion_depth: num_layers / 2,
            },
            FusionChoice::EarlyFull => FusionMode::Early {
                fusion_depth: num_layers,
            },
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "text-only" | "text_only" => Some(FusionChoice::TextOnly),
            "late-concat" | "late_concat" => Some(FusionChoice::LateConcat),
            "early-half" | "early_half" => Some(FusionChoice::EarlyHalf),
            "early-full" | "early_full" => Some(FusionChoice::EarlyFull),
            _ => None,
        }
    }
}

/// Values to sweep; an empty axis keeps the base setting.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationAxes {
    pub fusion: Vec<FusionChoice>,
    pub representation: Vec<Representation>,
    pub freeze: Vec<FreezeFlags>,
}

/// One point of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub fusion_mode: FusionMode,
    pub representation: Representation,
    pub freeze: FreezeFlags,
}

impl AblationAxes {
    /// Cartesian product of the axes applied to `base`. A fusion mode that
    /// cannot use the base representation falls back to its own default.
    pub fn cells(&self, base: &RunConfig) -> Vec<AblationCell> {
        let layers = base.encoder.num_layers;
        let fusions: Vec<Option<FusionChoice>> = if self.fusion.is_empty() {
            vec![None]
        } else {
            self.fusion.iter().copied().map(Some).collect()
        };
        let reps: Vec<Option<Representation>> = if self.representation.is_empty() {
            vec![None]
        } else {
            self.representation.iter().copied().map(Some).collect()
        };
        let freezes: Vec<Option<FreezeFlags>> = if self.freeze.is_empty() {
            vec![None]
        } else {
            self.freeze.iter().copied().map(Some).collect()
        };
        let mut cells = Vec::new();
        for f in &fusions {
            for r in &reps {
                for z in &freezes {
                    let mode = f.map_or(base.encoder.fusion_mode, |f| f.mode(layers));
                    let mut rep = r.unwrap_or(base.encoder.representation);
                    if !rep.is_compatible(&mode) {
                        rep = mode.default_representation();
                    }
                    let freeze = z.unwrap_or(base.train.freeze);
                    let mut parts = Vec::new();
                    if f.is_some() || (r.is_none() && z.is_none()) {
                        parts.push(mode.label(layers));
                    }
                    if r.is_some() {
                        parts.push(rep.label().to_string());
                    }
                    if z.is_some() {
                        parts.push(format!("train-{}", freeze.label()));
                    }
                    cells.push(AblationCell {
                        label: parts.join("/"),
                        fusion_mode: mode,
                        representation: rep,
                        freeze,
                    });
                }
            }
        }
        cells
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub seeds: Vec<u64>,
    pub giou: Vec<f64>,
    pub ciou: Vec<f64>,
    pub giou_mean: f64,
    pub giou_std: f64,
    pub ciou_mean: f64,
    pub ciou_std: f64,
    /// `(seed, message)` for runs that failed.
    pub errors: Vec<(u64, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell.label == label)
    }

    /// Mean ± population standard deviation over seeds.
    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.cell.label.len()).max().unwrap_or(4).max(4);
        let mut s = String::new();
        writeln!(s, "{:<w$}  {:>17}  {:>17}  runs", "cell", "gIoU", "cIoU").unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{:<w$}  {:>8.4} ± {:<6.4}  {:>8.4} ± {:<6.4}  {}/{}",
                r.cell.label,
                r.giou_mean,
                r.giou_std,
                r.ciou_mean,
                r.ciou_std,
                r.giou.len(),
                r.seeds.len()
            )
            .unwrap();
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Trains one model per cell and seed with the base budget and evaluates
/// it on `val`. A failing run is recorded in its row and the sweep goes on.
pub fn ablate(
    base: &RunConfig,
    axes: &AblationAxes,
    seeds: &[u64],
    train: &[SegSample],
    val: &[SegSample],
    mut progress: impl FnMut(&AblationCell, u64, &Result<(f64, f64)>),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Validation("ablation needs at least one seed".into()));
    }
    let cells = axes.cells(base);
    let mut rows: Vec<AblationRow> = cells
        .iter()
        .map(|c| AblationRow {
            cell: c.clone(),
            seeds: seeds.to_vec(),
            giou: Vec::new(),
            ciou: Vec::new(),
            giou_mean: f64::NAN,
            giou_std: f64::NAN,
            ciou_mean: f64::NAN,
            ciou_std: f64::NAN,
            errors: Vec::new(),
        })
        .collect();
    for &seed in seeds {
        // the SAM image encoder's weights depend only on the seed, so cached
        // features are shared by every cell that keeps it frozen
        let mut shared: Option<(Vec<_>, Vec<_>)> = None;
        for row in rows.iter_mut() {
            let mut cfg = base.clone();
            cfg.train.seed = seed;
            cfg.encoder.fusion_mode = row.cell.fusion_mode;
            cfg.encoder.representation = row.cell.representation;
            cfg.train.freeze = row.cell.freeze;
            let result = (|| -> Result<(f64, f64)> {
                cfg.validate()?;
                let model = EvfSam::build(&cfg.encoder, &cfg.sam, seed)?;
                let mut trainer = Trainer::new(model, &cfg.train)?;
                let cacheable = cfg.train.freeze.image_encoder.is_frozen();
                let (tr, va) = match (&shared, cacheable) {
                    (Some(s), true) => s.clone(),
                    _ => {
                        let s = (trainer.prepare(train)?, trainer.prepare(val)?);
                        if cacheable {
                            shared = Some(s.clone());
                        }
                        s
                    }
                };
                trainer.run(&tr, &[], |_| Ok(()))?;
                let r = evaluate(&trainer.model, &va, cfg.train.eval_threshold as Elem)?;
                Ok((r.giou, r.ciou))
            })();
            progress(&row.cell, seed, &result);
            match result {
                Ok((g, c)) => {
                    row.giou.push(g);
                    row.ciou.push(c);
                }
                Err(e) => row.errors.push((seed, e.to_string())),
            }
        }
    }
    for row in rows.iter_mut() {
        (row.giou_mean, row.giou_std) = mean_std(&row.giou);
        (row.ciou_mean, row.ciou_std) = mean_std(&row.ciou);
    }
    Ok(AblationReport { rows })
}
