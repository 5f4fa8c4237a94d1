use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use evf_core::config::RunConfig;
use evf_core::data::{generate_dataset, read_ppm, rle_encode, write_dataset, write_pgm, Difficulty, GeneratorConfig};
use evf_core::gradcheck::{check_scope, Scope, GRADCHECK_TOLERANCE};
use evf_core::train::{evaluate, Checkpoint, LogRecord, Trainer};
use evf_core::{Elem, Error, EvfSam};
use log::{debug, info};
use serde_json::json;

use crate::axes::parse_axes;
use crate::Failure;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "log.jsonl";
const STEP_LOG_EVERY: usize = 100;

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => Ok(RunConfig::from_file(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))
}

pub fn gen_data(seed: u64, n: usize, size: usize, difficulty: Difficulty, out: &Path) -> Result<(), Failure> {
    if n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let cfg = GeneratorConfig {
        canvas_size: size,
        difficulty,
        ..GeneratorConfig::default()
    };
    cfg.validate()?;
    let samples = generate_dataset(seed, n, &cfg)?;
    let index = write_dataset(out, &samples)?;
    info!("wrote {n} samples to {}", index.display());
    println!("{}", index.display());
    Ok(())
}

pub fn train(config: Option<&Path>, out_dir: &Path, resume: Option<&Path>) -> Result<(), Failure> {
    let (cfg, mut trainer) = match resume {
        Some(ckpt) => {
            if config.is_some() {
                return Err(Failure::Usage(
                    "--resume takes its config from the checkpoint; drop --config".into(),
                ));
            }
            let c = Checkpoint::load(ckpt)?;
            let t = c.into_trainer()?;
            (c.config, t)
        }
        None => {
            let cfg = load_config(config)?;
            cfg.validate()?;
            let model = EvfSam::build(&cfg.encoder, &cfg.sam, cfg.train.seed)?;
            let t = Trainer::new(model, &cfg.train)?;
            (cfg, t)
        }
    };
    create_dir(out_dir)?;
    write(&out_dir.join("config.json"), &cfg.to_json())?;
    let (train, val) = cfg.data.load()?;
    info!("{} training and {} validation samples", train.len(), val.len());
    let tr = trainer.prepare(&train)?;
    let va = trainer.prepare(&val)?;

    let log_path = out_dir.join(LOG_FILE);
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Failure::Usage(format!("cannot open {}: {e}", log_path.display())))?;
    trainer.run(&tr, &va, |rec| {
        writeln!(log, "{}", rec.to_json_line()).map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        match rec {
            LogRecord::Step { it, .. } if it % STEP_LOG_EVERY != 0 => debug!("{}", rec.to_json_line()),
            _ => info!("{}", rec.to_json_line()),
        }
        Ok(())
    })?;
    Checkpoint::capture(&trainer, &cfg).save(&out_dir.join(CHECKPOINT_FILE))?;
    if !va.is_empty() {
        let report = evaluate(&trainer.model, &va, cfg.train.eval_threshold as Elem)?;
        write(&out_dir.join("metrics.json"), &report.to_json())?;
        println!("{}", report.to_text());
    }
    Ok(())
}

pub fn eval(
    config: Option<&Path>,
    checkpoint: &Path,
    train_split: bool,
    out_dir: Option<&Path>,
) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let data_cfg = match config {
        Some(p) => RunConfig::from_file(p)?.data,
        None => ckpt.config.data.clone(),
    };
    let model = ckpt.into_model()?;
    let (train, val) = data_cfg.load()?;
    let samples = if train_split { train } else { val };
    if samples.is_empty() {
        return Err(Failure::Usage("the selected split is empty".into()));
    }
    let prepared = samples
        .iter()
        .map(|s| model.prepare(s, false))
        .collect::<evf_core::Result<Vec<_>>>()?;
    let report = evaluate(&model, &prepared, ckpt.config.train.eval_threshold as Elem)?;
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        write(&dir.join("metrics.json"), &report.to_json())?;
        write(&dir.join("metrics.txt"), &report.to_text())?;
    }
    println!("{}", report.to_json());
    Ok(())
}

pub fn ablate(config: Option<&Path>, axes: &str, seeds: &[u64], out_dir: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    cfg.validate()?;
    let axes = parse_axes(axes).map_err(Failure::Usage)?;
    let (train, val) = cfg.data.load()?;
    if val.is_empty() {
        return Err(Failure::Usage("ablation needs a validation split".into()));
    }
    let report = evf_core::train::ablate(&cfg, &axes, seeds, &train, &val, |cell, seed, r| match r {
        Ok((g, c)) => info!("{} seed {seed}: gIoU {g:.4} cIoU {c:.4}", cell.label),
        Err(e) => log::warn!("{} seed {seed}: {e}", cell.label),
    })?;
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        write(&dir.join("ablation.txt"), &report.to_text())?;
        write(&dir.join("ablation.json"), &report.to_json())?;
    }
    print!("{}", report.to_text());
    if report.rows.iter().all(|r| r.giou.is_empty()) {
        return Err(Failure::Runtime("every run in the sweep failed".into()));
    }
    Ok(())
}

pub fn gradcheck(scope: &str, configurations: usize, seed: u64, json_out: bool) -> Result<(), Failure> {
    let scope: Scope = scope.parse()?;
    if configurations == 0 {
        return Err(Failure::Usage("--configurations must be at least 1".into()));
    }
    let reports = check_scope(scope, configurations, seed)?;
    if json_out {
        println!("{}", serde_json::to_string_pretty(&reports).map_err(Error::from)?);
    } else {
        println!(
            "{:<10} {:>8} {:>12} {:>14}  result",
            "block", "configs", "coordinates", "max rel error"
        );
        for r in &reports {
            println!(
                "{:<10} {:>8} {:>12} {:>14.3e}  {}",
                r.block.to_string(),
                r.configurations,
                r.coordinates,
                r.max_rel_error,
                if r.passed() { "ok" } else { "FAIL" }
            );
        }
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.block.to_string())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Acceptance(format!(
            "relative error at or above {GRADCHECK_TOLERANCE:e} in {}",
            failed.join(", ")
        )))
    }
}

pub fn rle_path(mask_path: &Path) -> PathBuf {
    mask_path.with_extension("json")
}

pub fn predict(checkpoint: &Path, image: &Path, text: &str, out: &Path, threshold: f64) -> Result<(), Failure> {
    let model = Checkpoint::load(checkpoint)?.into_model()?;
    let image = read_ppm(image)?;
    let input = model.prepare_input(&image, text, false)?;
    let mask = model.predict_mask(&input, threshold as Elem)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_pgm(out, &mask)?;
    let rle = json!({
        "expression": text,
        "size": [mask.height, mask.width],
        "counts": rle_encode(&mask),
    });
    write(&rle_path(out), &format!("{rle}\n"))?;
    println!("{} pixels in mask, written to {}", mask.count(), out.display());
    Ok(())
}
