use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use advmetric::checkpoint::load_checkpoint;
use advmetric::embedder::init_model;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_advmetric"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `dir` with its bytes, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    walkdir(dir)
        .into_iter()
        .map(|f| {
            (
                f.strip_prefix(dir).unwrap().to_path_buf(),
                fs::read(&f).unwrap(),
            )
        })
        .collect()
}

fn walkdir(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walkdir(&path));
        } else {
            out.push(path);
        }
    }
    out
}

/// A small dataset: 6 train and 3 test identities.
fn tiny_data(root: &Path) -> PathBuf {
    let d = root.join("data");
    ok(&[
        "synth",
        "--out",
        p(&d),
        "--train-ids",
        "6",
        "--test-ids",
        "3",
        "--seed",
        "3",
    ]);
    d
}

fn tiny_model(root: &Path, data: &Path) -> PathBuf {
    let m = root.join("m.ckpt");
    ok(&[
        "train",
        "--data",
        p(data),
        "--out",
        p(&m),
        "--loss",
        "triplet",
        "--epochs",
        "2",
        "--hidden",
        "16",
        "--feature-dim",
        "8",
        "--pk",
        "2,4",
        "--batch-size",
        "8",
    ]);
    m
}

#[test]
fn synth_is_deterministic_and_laid_out() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&[
            "synth",
            "--seed",
            "7",
            "--out",
            p(d),
            "--train-ids",
            "4",
            "--test-ids",
            "2",
        ]);
    }
    for split in ["train", "probe", "gallery"] {
        assert!(a.join(split).is_dir());
    }
    let (sa, mut sb) = (snapshot(&a), snapshot(&b));
    // config.json records the output directory itself.
    let key = PathBuf::from("config.json");
    sb.insert(key.clone(), sa[&key].clone());
    assert_eq!(sa, sb);
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    let out = run(&["synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
    assert!(out.stdout.is_empty());

    let out = run(&[
        "eval",
        "--data",
        "/nonexistent",
        "--model",
        "/nonexistent.ckpt",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_with_zero_epochs_writes_the_fresh_init() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let m = tmp.path().join("zero.ckpt");
    ok(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&m),
        "--epochs",
        "0",
        "--seed",
        "4",
        "--hidden",
        "8",
    ]);
    let model = load_checkpoint(&m).unwrap();
    assert_eq!(model, init_model(&model.config, 4).unwrap());
    assert!(tmp.path().join("zero.config.json").is_file());
    let log: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("zero.log.json")).unwrap())
            .unwrap();
    assert!(log["final_loss"].is_number());
}

#[test]
fn triplet_training_rejects_identities_with_too_few_images() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    // Leave identity 1 with a single training image.
    for f in walkdir(&data.join("train")) {
        let name = f.file_name().unwrap().to_str().unwrap();
        if name.starts_with("0001_") && !name.ends_with("000000_00.png") {
            fs::remove_file(f).unwrap();
        }
    }
    let out = run(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&tmp.path().join("t.ckpt")),
        "--loss",
        "triplet",
        "--pk",
        "2,4",
        "--batch-size",
        "8",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("fewer than 4 images: [1]"), "{stderr}");
}

#[test]
fn attack_records_resolved_iterations_and_duplicate_ensembles_match() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let m = tiny_model(tmp.path(), &data);
    let (single, double) = (tmp.path().join("single"), tmp.path().join("double"));
    ok(&[
        "attack",
        "--data",
        p(&data),
        "--models",
        p(&m),
        "--out",
        p(&single),
        "--eps",
        "5",
        "--iters",
        "auto",
    ]);
    let pair = format!("{},{}", p(&m), p(&m));
    ok(&[
        "attack",
        "--data",
        p(&data),
        "--models",
        &pair,
        "--out",
        p(&double),
        "--eps",
        "5",
    ]);

    let config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(single.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["iters"], 6);
    assert_eq!(config["alpha"], 1.0);

    let (mut a, mut b) = (snapshot(&single), snapshot(&double));
    a.remove(Path::new("config.json"));
    b.remove(Path::new("config.json"));
    assert_eq!(a, b);
}

#[test]
fn targeted_attack_needs_a_second_probe_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let m = tiny_model(tmp.path(), &data);
    let probe = tmp.path().join("one_probe");
    fs::create_dir(&probe).unwrap();
    for f in walkdir(&data.join("probe")) {
        if f.file_name()
            .unwrap()
            .to_str()
            .unwrap()
            .starts_with("0007_")
        {
            fs::copy(&f, probe.join(f.file_name().unwrap())).unwrap();
        }
    }
    let out = run(&[
        "attack",
        "--probe",
        p(&probe),
        "--gallery",
        p(&data.join("gallery")),
        "--models",
        p(&m),
        "--out",
        p(&tmp.path().join("t")),
        "--targeted",
    ]);
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn defend_preserves_architecture_and_covers_the_training_set() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let m = tiny_model(tmp.path(), &data);
    let (d, adv) = (tmp.path().join("def.ckpt"), tmp.path().join("y_adv"));
    ok(&[
        "defend",
        "--data",
        p(&data),
        "--model",
        p(&m),
        "--out",
        p(&d),
        "--adv-out",
        p(&adv),
        "--epochs",
        "1",
        "--pk",
        "2,4",
        "--batch-size",
        "8",
    ]);
    assert_eq!(
        load_checkpoint(&d).unwrap().config,
        load_checkpoint(&m).unwrap().config
    );
    let pngs = |dir: &Path| {
        walkdir(dir)
            .iter()
            .filter(|f| f.extension().is_some_and(|e| e == "png"))
            .count()
    };
    assert_eq!(pngs(&adv), pngs(&data.join("train")));
}

#[test]
fn eval_self_retrieval_and_baseline_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let m = tiny_model(tmp.path(), &data);
    let gallery = data.join("gallery");
    let stdout = ok(&[
        "eval",
        "--probe",
        p(&gallery),
        "--gallery",
        p(&gallery),
        "--model",
        p(&m),
        "--protocol",
        "all",
    ]);
    let report: serde_json::Value = serde_json::from_str(stdout.lines().next().unwrap()).unwrap();
    assert_eq!(report["rank"]["1"], 1.0);

    let report_path = tmp.path().join("clean.json");
    ok(&[
        "eval",
        "--data",
        p(&data),
        "--model",
        p(&m),
        "--out",
        p(&report_path),
    ]);
    let stdout = ok(&[
        "eval",
        "--data",
        p(&data),
        "--model",
        p(&m),
        "--baseline",
        p(&report_path),
    ]);
    assert!(stdout.contains("mAP ratio 1.000000"), "{stdout}");

    let strips = tmp.path().join("strips");
    ok(&[
        "eval",
        "--data",
        p(&data),
        "--model",
        p(&m),
        "--ranking",
        "5",
        "--ranking-probes",
        "2",
        "--ranking-out",
        p(&strips),
    ]);
    assert!(strips.join("probe_0001.png").is_file());
    let lists: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(strips.join("rankings.json")).unwrap()).unwrap();
    assert_eq!(lists[0]["entries"].as_array().unwrap().len(), 5);
}

#[test]
fn bench_emits_a_square_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let m = tiny_model(tmp.path(), &data);
    let out = tmp.path().join("bench.json");
    let models = format!("{},{}", p(&m), p(&m));
    ok(&[
        "bench",
        "--data",
        p(&data),
        "--models",
        &models,
        "--out",
        p(&out),
        "--eps",
        "2",
    ]);
    let table: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let adv = table["adversarial"].as_array().unwrap();
    assert_eq!(adv.len(), 2);
    assert_eq!(adv[0], adv[1]);
    assert_eq!(table["eval_metric"], "euclidean");
}
