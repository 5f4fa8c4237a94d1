#![cfg(not(feature = "single-precision"))]
#![allow(clippy::unnecessary_cast)]

use evf_core::config::RunConfig;
use evf_core::data::{generate_dataset, GeneratorConfig, SegSample};
use evf_core::nn::{Grads, ModuleGroup, ParamStore, Session};
use evf_core::train::{
    ablate, evaluate, linear_decay, AblationAxes, AdamW, AdamWConfig, Checkpoint, FreezeFlags, FusionChoice, LogRecord,
    ModuleState, TrainConfig, Trainer,
};
use evf_core::{Error, EvfSam, Mask, Tape, Tensor};
use proptest::prelude::*;

fn small_run(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.encoder.num_layers = 2;
    cfg.encoder.fusion_mode = evf_core::encoder::FusionMode::Early { fusion_depth: 2 };
    cfg.train = TrainConfig {
        lr: 1e-3,
        total_iterations: 4,
        batch_size: 2,
        grad_accum_steps: 1,
        seed,
        ..TrainConfig::default()
    };
    cfg
}

fn samples(seed: u64, n: usize) -> Vec<SegSample> {
    generate_dataset(seed, n, &GeneratorConfig::default()).unwrap()
}

fn trainer(cfg: &RunConfig) -> Trainer {
    let model = EvfSam::build(&cfg.encoder, &cfg.sam, cfg.train.seed).unwrap();
    Trainer::new(model, &cfg.train).unwrap()
}

fn scalar_store(v: f64) -> (ParamStore, evf_core::nn::ParamId) {
    let mut store = ParamStore::new();
    let id = store.add(
        "p".into(),
        ModuleGroup::MaskDecoder,
        Tensor::new(&[1], vec![v as _]).unwrap(),
    );
    (store, id)
}

/// Gradient of `sum(p * c)` with respect to `p`, i.e. `c`.
fn grads_of(store: &ParamStore, id: evf_core::nn::ParamId, c: f64) -> Grads {
    weighted_grads(store, id, c, 1.0)
}

fn weighted_grads(store: &ParamStore, id: evf_core::nn::ParamId, c: f64, weight: f64) -> Grads {
    let mut tape = Tape::new();
    let mut s = Session::train(&mut tape, store);
    let p = s.param(id);
    let k = s.tape.constant(Tensor::new(&[1], vec![c as _]).unwrap());
    let y = s.tape.mul(p, k).unwrap();
    let l = s.tape.sum(y).unwrap();
    tape.backward(l).unwrap();
    let mut g = Grads::new(store);
    g.accumulate(&tape, weight as _);
    g
}

#[test]
fn adamw_first_step_by_hand() {
    let (mut store, id) = scalar_store(1.0);
    let g = grads_of(&store, id, 1.0);
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    opt.update(&mut store, &g, 0.1).unwrap();
    // m_hat = v_hat = 1 after bias correction
    let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
    assert!((store.value(id).item() - expected).abs() < 1e-15);
    assert!((store.value(id).item() - 0.9).abs() < 1e-8);
    assert_eq!(opt.step, 1);
}

#[test]
fn adamw_zero_gradient_is_a_fixed_point_without_decay() {
    let (mut store, id) = scalar_store(0.7);
    let g = grads_of(&store, id, 0.0);
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    for _ in 0..5 {
        opt.update(&mut store, &g, 0.1).unwrap();
    }
    assert_eq!(store.value(id).item(), 0.7);

    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: 0.5,
            ..AdamWConfig::default()
        },
        &store,
    );
    opt.update(&mut store, &g, 0.1).unwrap();
    assert!((store.value(id).item() - 0.7 * (1.0 - 0.05)).abs() < 1e-12);
}

#[test]
fn adamw_rejects_non_finite_gradients_by_name() {
    let (mut store, id) = scalar_store(1.0);
    let g = weighted_grads(&store, id, 1.0, f64::NAN);
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    match opt.update(&mut store, &g, 0.1) {
        Err(Error::NonFinite(m)) => assert!(m.contains('p')),
        other => panic!("{other:?}"),
    }
    assert_eq!(store.value(id).item(), 1.0);
    assert_eq!(opt.step, 0);
}

#[test]
fn schedule_endpoints() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_at(0), 1e-4);
    assert_eq!(cfg.lr_at(cfg.total_iterations), 0.0);
    assert_eq!(linear_decay(1.0, 0.2, 10, 10), 0.2);
    assert!((linear_decay(1.0, 0.0, 5, 10) - 0.5).abs() < 1e-15);
    assert_eq!(cfg.effective_batch(), 16);
}

proptest! {
    #[test]
    fn schedule_is_strictly_decreasing(lr0 in 1e-6f64..1.0, frac in 0.0f64..0.99, total in 2usize..500) {
        let lr_final = lr0 * frac;
        for t in 0..total {
            prop_assert!(linear_decay(lr0, lr_final, t + 1, total) < linear_decay(lr0, lr_final, t, total));
        }
    }
}

#[test]
fn accumulation_matches_a_single_large_batch() {
    let data = samples(1, 12);
    let mut a = small_run(3);
    a.train.batch_size = 2;
    a.train.grad_accum_steps = 2;
    let mut b = a.clone();
    b.train.batch_size = 4;
    b.train.grad_accum_steps = 1;
    let (mut ta, mut tb) = (trainer(&a), trainer(&b));
    let (da, db) = (ta.prepare(&data).unwrap(), tb.prepare(&data).unwrap());
    ta.step(&da).unwrap();
    tb.step(&db).unwrap();
    let mut worst: f64 = 0.0;
    for ((_, pa), (_, pb)) in ta.model.store.iter().zip(tb.model.store.iter()) {
        worst = worst.max(pa.value.max_abs_diff(&pb.value) as f64);
    }
    assert!(worst < 1e-10, "{worst}");
}

#[test]
fn identical_configs_give_identical_logs() {
    let data = samples(2, 10);
    let cfg = small_run(4);
    let run = || {
        let mut t = trainer(&cfg);
        let d = t.prepare(&data).unwrap();
        t.run(&d, &d[..3], |_| Ok(())).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), cfg.train.total_iterations + 1);
    assert_eq!(a, b);
    let lines: Vec<String> = a.iter().map(LogRecord::to_json_line).collect();
    assert!(lines[0].starts_with("{\"it\":0,\"lr\":"));
    assert!(lines.last().unwrap().contains("\"giou\""));
}

fn snapshot(store: &ParamStore) -> Vec<(ModuleGroup, String, Tensor)> {
    store
        .iter()
        .map(|(_, p)| (p.group, p.name.clone(), p.value.clone()))
        .collect()
}

/// Names of parameters with a nonzero first-step gradient.
fn reached(cfg: &RunConfig, data: &[evf_core::PreparedSample]) -> Vec<String> {
    let mut t = trainer(cfg);
    let (g, _) = t.compute_gradients(data).unwrap();
    g.iter()
        .filter(|(_, g)| g.data().iter().any(|&v| v != 0.0))
        .map(|(id, _)| t.model.store.get(id).name.clone())
        .collect()
}

#[test]
fn freeze_rows_keep_frozen_groups_bitwise() {
    let data = samples(5, 8);
    for flags in FreezeFlags::study_rows() {
        let mut cfg = small_run(6);
        cfg.train.freeze = flags;
        cfg.train.total_iterations = 10;
        let mut t = trainer(&cfg);
        let d = t.prepare(&data).unwrap();
        let before = snapshot(&t.model.store);
        let grads = reached(&cfg, &d);
        t.run(&d, &[], |_| Ok(())).unwrap();
        let after = snapshot(&t.model.store);
        for g in ModuleGroup::ALL {
            let state = flags.state(g);
            let mut changed = 0;
            for ((gr, name, a), (_, _, b)) in before.iter().zip(&after) {
                if *gr != g {
                    continue;
                }
                if state.is_frozen() {
                    assert_eq!(a, b, "{name} changed under {}", flags.label());
                } else if a != b {
                    changed += 1;
                } else {
                    assert!(!grads.contains(name), "{name} had a gradient but stayed put");
                }
            }
            if !state.is_frozen() {
                assert!(changed > 0, "{g} did not train under {}", flags.label());
            }
        }
    }
}

#[test]
fn freezing_everything_changes_nothing() {
    let data = samples(7, 6);
    let mut cfg = small_run(7);
    cfg.train.freeze = FreezeFlags {
        image_encoder: ModuleState::Frozen,
        multimodal_encoder: ModuleState::Frozen,
        prompt_encoder: ModuleState::Frozen,
        mask_decoder: ModuleState::Frozen,
    };
    cfg.train.total_iterations = 10;
    let mut t = trainer(&cfg);
    let d = t.prepare(&data).unwrap();
    let before = snapshot(&t.model.store);
    t.run(&d, &[], |_| Ok(())).unwrap();
    assert_eq!(before, snapshot(&t.model.store));
}

#[test]
fn checkpoints_round_trip_byte_identically_and_resume_exactly() {
    let data = samples(8, 10);
    let mut cfg = small_run(9);
    cfg.train.total_iterations = 6;
    let mut full = trainer(&cfg);
    let d = full.prepare(&data).unwrap();
    let full_log = full.run(&d, &[], |_| Ok(())).unwrap();

    let mut half = trainer(&cfg);
    for _ in 0..3 {
        half.step(&d).unwrap();
    }
    let ck = Checkpoint::capture(&half, &cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());

    let mut resumed = loaded.into_trainer().unwrap();
    let rest = resumed.run(&d, &[], |_| Ok(())).unwrap();
    assert_eq!(rest, full_log[3..].to_vec());
    assert_eq!(snapshot(&resumed.model.store), snapshot(&full.model.store));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = small_run(1);
    let t = trainer(&cfg);
    let bytes = Checkpoint::capture(&t, &cfg).to_bytes();
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..10]),
        Err(Error::Checkpoint(_))
    ));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 4]),
        Err(Error::Checkpoint(_))
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
}

#[test]
fn evaluate_is_deterministic_and_handles_degenerate_logits() {
    let data = samples(10, 6);
    let cfg = small_run(2);
    let t = trainer(&cfg);
    let d = t.prepare(&data).unwrap();
    let a = evaluate(&t.model, &d, 0.0).unwrap();
    let b = evaluate(&t.model, &d, 0.0).unwrap();
    assert_eq!(a, b);

    // a threshold no logit exceeds gives empty predictions
    let empty = evaluate(&t.model, &d, 1e300 as _).unwrap();
    assert_eq!(empty.ciou, 0.0);
    assert_eq!(empty.giou, 0.0);

    // logits equal to the ground truth score perfectly
    let gts: Vec<Mask> = d.iter().map(|p| p.mask.clone()).collect();
    let preds: Vec<Mask> = d
        .iter()
        .map(|p| Mask::from_logits(&p.target.map(|v| if v > 0.5 { 10.0 } else { -10.0 }), 0.0).unwrap())
        .collect();
    let r = evf_core::metrics::compute_metrics(&preds, &gts).unwrap();
    assert_eq!((r.giou, r.ciou), (1.0, 1.0));
}

#[test]
fn divergence_is_reported() {
    let data = samples(11, 4);
    let mut cfg = small_run(3);
    cfg.train.lr = 1e300;
    cfg.train.total_iterations = 50;
    let mut t = trainer(&cfg);
    let d = t.prepare(&data).unwrap();
    match t.run(&d, &[], |_| Ok(())) {
        Err(Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|r| r.len())),
    }
}

#[test]
fn config_validation() {
    let mut cfg = TrainConfig::default();
    cfg.batch_size = 0;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = TrainConfig::default();
    cfg.adamw.beta1 = 1.0;
    assert!(cfg.validate().is_err());
    assert!(RunConfig::from_json("{\"train\":{\"lr\":1e-3,\"bogus\":1}}").is_err());
    let parsed = RunConfig::from_json("{\"train\":{\"lr\":0.5}}").unwrap();
    assert_eq!(parsed.train.lr, 0.5);
    assert_eq!(parsed.encoder, RunConfig::default().encoder);
    let round = RunConfig::from_json(&parsed.to_json()).unwrap();
    assert_eq!(round, parsed);
}

#[test]
fn single_cell_sweep_equals_plain_training() {
    let train = samples(12, 8);
    let val = samples(13, 4);
    let cfg = small_run(0);
    let report = ablate(&cfg, &AblationAxes::default(), &[5], &train, &val, |_, _, _| {}).unwrap();
    assert_eq!(report.rows.len(), 1);

    let mut plain_cfg = cfg.clone();
    plain_cfg.train.seed = 5;
    let mut t = trainer(&plain_cfg);
    let (tr, va) = (t.prepare(&train).unwrap(), t.prepare(&val).unwrap());
    t.run(&tr, &[], |_| Ok(())).unwrap();
    let r = evaluate(&t.model, &va, 0.0).unwrap();
    let row = &report.rows[0];
    assert_eq!((row.giou_mean, row.ciou_mean), (r.giou, r.ciou));
    assert_eq!(row.giou_std, 0.0);
    assert!(report.to_text().contains(&row.cell.label));
    assert!(report.to_json().contains("giou_mean"));
}

#[test]
fn fusion_axis_cells_are_distinct_and_failures_stay_in_their_row() {
    let mut cfg = small_run(0);
    cfg.encoder.num_layers = 4;
    cfg.train.total_iterations = 1;
    let axes = AblationAxes {
        fusion: vec![
            FusionChoice::TextOnly,
            FusionChoice::LateConcat,
            FusionChoice::EarlyHalf,
            FusionChoice::EarlyFull,
        ],
        ..AblationAxes::default()
    };
    let cells = axes.cells(&cfg);
    let labels: Vec<&str> = cells.iter().map(|c| c.label.as_str()).collect();
    let unique: std::collections::BTreeSet<_> = labels.iter().collect();
    assert_eq!(unique.len(), 4, "{labels:?}");
    assert_ne!(cells[2].fusion_mode, cells[3].fusion_mode);

    // a learning rate that diverges fails every run, but the sweep finishes
    cfg.train.lr = 1e300;
    cfg.train.total_iterations = 30;
    let train = samples(14, 4);
    let report = ablate(&cfg, &axes, &[1, 2], &train, &train, |_, _, _| {}).unwrap();
    assert_eq!(report.rows.len(), 4);
    for row in &report.rows {
        assert_eq!(row.errors.len(), 2, "{}", row.cell.label);
        assert!(row.giou_mean.is_nan());
    }
}
