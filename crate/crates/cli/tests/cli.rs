use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evf_core::config::RunConfig;
use evf_core::data::{generate_dataset, load_dataset, write_dataset, write_ppm, GeneratorConfig};
use evf_core::metrics::compute_metrics;
use evf_core::Mask;

fn evf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evf"))
        .args(args)
        .env("EVF_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, json: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, json).unwrap();
    path
}

const SMALL: &str = r#"{
  "train": {"total_iterations": 4, "batch_size": 2, "grad_accum_steps": 1, "lr": 0.001, "eval_every": 2},
  "data": {"seed": 3, "n_train": 8, "n_val": 4}
}"#;

fn read_pgm(path: &Path) -> Mask {
    let bytes = fs::read(path).unwrap();
    let header: Vec<&[u8]> = bytes.splitn(4, |&b| b == b'\n').collect();
    assert_eq!(header[0], b"P5");
    let dims = std::str::from_utf8(header[1]).unwrap();
    let (w, h) = dims.split_once(' ').unwrap();
    let (w, h): (usize, usize) = (w.parse().unwrap(), h.parse().unwrap());
    assert_eq!(header[2], b"255");
    let pixels = header[3];
    assert_eq!(pixels.len(), w * h);
    assert!(pixels.iter().all(|&v| v == 0 || v == 255));
    Mask::new(h, w, pixels.iter().map(|&v| v == 255).collect()).unwrap()
}

#[test]
fn dump_defaults_reparses() {
    let out = evf(&["--dump-defaults"]);
    assert_eq!(code(&out), 0);
    assert_eq!(RunConfig::from_json(&stdout(&out)).unwrap(), RunConfig::default());
}

#[test]
fn missing_subcommand_and_bad_flags_are_usage_errors() {
    assert_eq!(code(&evf(&[])), 2);
    assert_eq!(code(&evf(&["train"])), 2);
    assert_eq!(code(&evf(&["gen-data", "--n", "ten", "--out", "x"])), 2);
}

#[test]
fn gen_data_is_deterministic_and_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = evf(&["gen-data", "--seed", "7", "--n", "100", "--out", p(d)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let index = |d: &Path| fs::read(d.join("index.jsonl")).unwrap();
    assert_eq!(index(&a), index(&b));
    for entry in fs::read_dir(a.join("images")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(a.join("images").join(&name)).unwrap(),
            fs::read(b.join("images").join(&name)).unwrap()
        );
    }
    let loaded = load_dataset(&a.join("index.jsonl")).unwrap();
    assert_eq!(loaded.len(), 100);
    let expected = generate_dataset(7, 100, &GeneratorConfig::default()).unwrap();
    assert!(loaded
        .iter()
        .zip(&expected)
        .all(|(l, e)| l.mask == e.mask && l.expression == e.expression));
}

#[test]
fn gen_data_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&evf(&["gen-data", "--n", "0", "--out", p(dir.path())])), 2);
    assert_eq!(
        code(&evf(&["gen-data", "--n", "2", "--size", "8", "--out", p(dir.path())])),
        2
    );
    let file = dir.path().join("file");
    fs::write(&file, "").unwrap();
    let out = evf(&["gen-data", "--n", "2", "--out", p(&file.join("sub"))]);
    assert_eq!(code(&out), 2);
    let out = evf(&[
        "gen-data",
        "--n",
        "3",
        "--difficulty",
        "attributes-only",
        "--size",
        "32",
        "--out",
        p(&dir.path().join("attr")),
    ]);
    assert_eq!(code(&out), 0);
    let loaded = load_dataset(&dir.path().join("attr/index.jsonl")).unwrap();
    assert_eq!((loaded[0].image.height(), loaded[0].mask.width), (32, 32));
}

#[test]
fn gradcheck_all_passes_and_reports_json() {
    let out = evf(&["gradcheck", "--scope", "all"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    for block in ["attention", "multiway", "projector", "decoder", "losses"] {
        assert!(
            text.lines().any(|l| l.starts_with(block) && l.ends_with("ok")),
            "{text}"
        );
    }
    let out = evf(&["gradcheck", "--scope", "projector", "--configurations", "3", "--json"]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 1);
    assert!(v[0]["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert_eq!(code(&evf(&["gradcheck", "--scope", "everything"])), 2);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"train": {"learning_rate": 0.1}}"#);
    let out = evf(&["train", "--config", p(&cfg), "--out-dir", p(&dir.path().join("run"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn divergence_exits_with_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"train": {"total_iterations": 6, "batch_size": 2, "grad_accum_steps": 1, "lr": 1e300},
            "data": {"n_train": 4, "n_val": 0}}"#,
    );
    let out = evf(&["train", "--config", p(&cfg), "--out-dir", p(&dir.path().join("run"))]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_eval_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = dir.path().join("run");
    let out = evf(&["train", "--config", p(&cfg), "--out-dir", p(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(run.join("log.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.iter().filter(|r| r.get("loss").is_some()).count(), 4);
    assert_eq!(records.iter().filter(|r| r.get("giou").is_some()).count(), 2);
    assert!(run.join("metrics.json").exists());
    assert_eq!(
        RunConfig::from_file(&run.join("config.json")).unwrap(),
        RunConfig::from_json(SMALL).unwrap()
    );

    // same config, same log
    let again = dir.path().join("again");
    assert_eq!(code(&evf(&["train", "--config", p(&cfg), "--out-dir", p(&again)])), 0);
    assert_eq!(log, fs::read_to_string(again.join("log.jsonl")).unwrap());

    let ckpt = run.join("checkpoint.bin");
    let e1 = evf(&["eval", "--checkpoint", p(&ckpt), "--out-dir", p(&dir.path().join("e1"))]);
    let e2 = evf(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--config",
        p(&cfg),
        "--out-dir",
        p(&dir.path().join("e2")),
    ]);
    assert_eq!(code(&e1), 0);
    assert_eq!(stdout(&e1), stdout(&e2));
    let m1 = fs::read(dir.path().join("e1/metrics.json")).unwrap();
    assert_eq!(m1, fs::read(dir.path().join("e2/metrics.json")).unwrap());
    assert_eq!(m1, fs::read(run.join("metrics.json")).unwrap());
    let train_split = evf(&["eval", "--checkpoint", p(&ckpt), "--split", "train"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&train_split)).unwrap();
    assert_eq!(v["n_samples"], 8);

    // resuming a finished run changes nothing; resume with --config is refused
    let before = fs::read(&ckpt).unwrap();
    assert_eq!(code(&evf(&["train", "--resume", p(&ckpt), "--out-dir", p(&run)])), 0);
    assert_eq!(before, fs::read(&ckpt).unwrap());
    assert_eq!(
        code(&evf(&[
            "train",
            "--resume",
            p(&ckpt),
            "--config",
            p(&cfg),
            "--out-dir",
            p(&run)
        ])),
        2
    );

    fs::write(dir.path().join("junk.bin"), b"not a checkpoint").unwrap();
    assert_eq!(
        code(&evf(&["eval", "--checkpoint", p(&dir.path().join("junk.bin"))])),
        2
    );
}

#[test]
fn ablate_writes_text_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("sweep");
    let out = evf(&[
        "ablate",
        "--config",
        p(&cfg),
        "--axes",
        "fusion=text-only,early-full",
        "--seeds",
        "0,1",
        "--out-dir",
        p(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("ablation.json")).unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r["giou"].as_array().unwrap().len(), 2);
    }
    assert_eq!(fs::read_to_string(out_dir.join("ablation.txt")).unwrap(), stdout(&out));
    assert_eq!(
        code(&evf(&["ablate", "--config", p(&cfg), "--axes", "fusion=diagonal"])),
        2
    );
}

#[test]
fn predict_recovers_an_overfit_referent() {
    let dir = tempfile::tempdir().unwrap();
    let sample = generate_dataset(11, 400, &GeneratorConfig::default())
        .unwrap()
        .into_iter()
        .find(|s| s.expression.contains("red circle"))
        .expect("a red circle expression");
    let index = write_dataset(&dir.path().join("data"), std::slice::from_ref(&sample)).unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(
            r#"{{"train": {{"total_iterations": 400, "batch_size": 1, "grad_accum_steps": 1, "lr": 0.001}},
                "data": {{"train_path": {:?}, "n_val": 0}}}}"#,
            index.to_str().unwrap()
        ),
    );
    let run = dir.path().join("run");
    let out = evf(&["train", "--config", p(&cfg), "--out-dir", p(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let image = dir.path().join("scene.ppm");
    write_ppm(&image, &sample.image).unwrap();
    let mask_path = dir.path().join("out/mask.pgm");
    let out = evf(&[
        "predict",
        "--checkpoint",
        p(&run.join("checkpoint.bin")),
        "--image",
        p(&image),
        "--text",
        &sample.expression,
        "--out",
        p(&mask_path),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mask = read_pgm(&mask_path);
    let iou = compute_metrics(std::slice::from_ref(&mask), std::slice::from_ref(&sample.mask))
        .unwrap()
        .giou;
    assert!(iou >= 0.9, "IoU {iou}");

    let rle: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(mask_path.with_extension("json")).unwrap()).unwrap();
    let counts: Vec<u64> = serde_json::from_value(rle["counts"].clone()).unwrap();
    assert_eq!(
        evf_core::data::rle_decode(&counts, mask.height, mask.width).unwrap(),
        mask
    );
    assert_eq!(rle["expression"], sample.expression.as_str());

    let missing = evf(&[
        "predict",
        "--checkpoint",
        p(&run.join("checkpoint.bin")),
        "--image",
        p(&dir.path().join("nope.ppm")),
        "--text",
        "x",
        "--out",
        p(&mask_path),
    ]);
    assert_eq!(code(&missing), 2);
}
