use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hdnet::checkpoint;
use hdnet::datadir::DatasetDir;
use hdnet::formats::{read_json, write_density, write_mask};
use hdnet_core::gt::build_level_masks;
use hdnet_core::trainer::evaluate_model;
use serde_json::{json, Value};

fn hdnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdnet")).args(args).output().expect("run hdnet")
}

fn ok(args: &[&str]) -> String {
    let out = hdnet(args);
    assert!(out.status.success(), "hdnet {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    hdnet(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json_file(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn check_schema(schema: &str, instance: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(format!("{schema}.schema.json"));
    let validator = jsonschema::validator_for(&json_file(&path)).unwrap();
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| format!("{}: {e}", e.instance_path)).collect();
    assert!(errors.is_empty(), "{schema}: {errors:?}\n{instance:#}");
}

fn small_model() -> Value {
    json!({"channels_per_level": [4, 6, 8], "stem_channels": 4, "head_channels": 4})
}

struct Fixture {
    _root: tempfile::TempDir,
    dir: PathBuf,
    train: PathBuf,
    val: PathBuf,
}

fn fixture() -> Fixture {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().to_path_buf();
    let (train, val) = (dir.join("train"), dir.join("val"));
    ok(&["gen-data", "--out", p(&train), "--scenes", "6", "--size", "32x32", "--seed", "0"]);
    ok(&["gen-data", "--out", p(&val), "--scenes", "3", "--size", "32x32", "--seed", "6"]);
    ok(&["make-gt", "--data", p(&train), "--sigma", "2"]);
    ok(&["make-gt", "--data", p(&val), "--sigma", "2", "--thresholds", "0.3,1.2"]);
    Fixture { _root: root, dir, train, val }
}

fn write_config(f: &Fixture, name: &str, value: Value) -> PathBuf {
    let path = f.dir.join(name);
    std::fs::write(&path, value.to_string()).unwrap();
    path
}

fn run_config(f: &Fixture, train: Value) -> PathBuf {
    write_config(
        f,
        "run.json",
        json!({"schema_version": 1, "model": small_model(), "train": train, "data": {"train": "train", "val": "val"}}),
    )
}

#[test]
fn gen_data_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let mut hashes = Vec::new();
    for name in ["a", "b"] {
        let out = root.path().join(name);
        ok(&["gen-data", "--out", p(&out), "--scenes", "4", "--size", "24x40", "--seed", "3"]);
        let manifest = json_file(&out.join("manifest.json"));
        check_schema("manifest", &manifest);
        assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 8);
        hashes.push(manifest["tree_sha256"].clone());
        for entry in std::fs::read_dir(out.join("annotations")).unwrap() {
            check_schema("annotation", &json_file(&entry.unwrap().path()));
        }
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn workflow_outputs_match_schemas() {
    let f = fixture();
    check_schema("gt_config", &json_file(&f.train.join("gt/config.json")));
    assert_eq!(std::fs::read_dir(f.train.join("gt/density")).unwrap().count(), 6);
    assert_eq!(std::fs::read_dir(f.train.join("gt/masks")).unwrap().count(), 6);

    let cfg = run_config(&f, json!({"epochs": 5, "batch_size": 2}));
    check_schema("config", &json_file(&cfg));
    let out = f.dir.join("run");
    ok(&["train", "--config", p(&cfg), "--out", p(&out), "--epochs", "2", "--seed", "4"]);
    let written = json_file(&out.join("config.json"));
    check_schema("config", &written);
    assert_eq!(written["train"]["epochs"], 2);
    assert_eq!(written["train"]["seed"], 4);
    let history = std::fs::read_to_string(out.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
    for line in history.lines() {
        check_schema("history_record", &serde_json::from_str(line).unwrap());
    }
    check_schema("train_state", &json_file(&out.join("state.json")));
    check_schema("manifest", &json_file(&out.join("manifest.json")));

    let ckpt = out.join("checkpoint.bin");
    let metrics = f.dir.join("metrics.json");
    ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&f.val), "--out", p(&metrics)]);
    let m = json_file(&metrics);
    check_schema("metrics", &m);
    assert_eq!(m["n"], 3);
    let printed: Value = serde_json::from_str(&ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&f.val)])).unwrap();
    assert_eq!(printed, m);

    let infer_out = f.dir.join("infer");
    let image = f.val.join("images").join("scene_00006.png");
    let stdout =
        ok(&["infer", "--checkpoint", p(&ckpt), "--image", p(&image), "--dump-intermediates", "--out", p(&infer_out)]);
    let prediction = json_file(&infer_out.join("prediction.json"));
    check_schema("prediction", &prediction);
    let count: f64 = stdout.lines().last().unwrap().parse().unwrap();
    assert_eq!(count, prediction["count"].as_f64().unwrap());
    let pngs: Vec<String> = std::fs::read_dir(&infer_out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    let starting = |prefix: &str| pngs.iter().filter(|n| n.starts_with(prefix)).count();
    assert_eq!((starting("head_"), starting("mask_"), starting("masked_"), starting("density")), (3, 4, 3, 1));
    assert_eq!(pngs.len(), 11);

    let bare = ok(&["infer", "--checkpoint", p(&ckpt), "--image", p(&image)]);
    assert_eq!(bare.trim().parse::<f64>().unwrap(), count);
}

#[test]
fn ablation_report_matches_schema() {
    let f = fixture();
    let suite = write_config(
        &f,
        "suite.json",
        json!({
            "schema_version": 1,
            "base_model": small_model(),
            "train": {"epochs": 1, "batch_size": 3},
            "seeds": [0, 1, 2],
            "variants": ["no decoupling", "FB decoupling (n=1)", "FB+FD decoupling (n=3)"],
            "data": {"train": "train", "val": "val"}
        }),
    );
    check_schema("suite", &json_file(&suite));
    let out = f.dir.join("ablation");
    let table = ok(&["ablate", "--suite", p(&suite), "--out", p(&out)]);
    let report = json_file(&out.join("report.json"));
    check_schema("ablation_report", &report);
    assert_eq!(report["variants"].as_array().unwrap().len(), 3);
    assert!(report["decoupling_order"]["expected"].is_string());
    assert!(table.contains("expected order"));
    assert_eq!(std::fs::read_to_string(out.join("report.txt")).unwrap(), table);
}

#[test]
fn exit_codes() {
    let f = fixture();
    let out = f.dir.join("out");
    let bad_field = write_config(&f, "bad.json", json!({"schema_version": 1, "bogus": 1, "data": {"train": "train"}}));
    assert_eq!(code(&["train", "--config", p(&bad_field), "--out", p(&out)]), 2);
    let levels = write_config(
        &f,
        "levels.json",
        json!({"schema_version": 1, "model": {"num_levels": 2, "channels_per_level": [4, 6]}, "data": {"train": "train"}}),
    );
    let stderr = String::from_utf8(hdnet(&["train", "--config", p(&levels), "--out", p(&out)]).stderr).unwrap();
    assert!(stderr.contains("model.num_levels"), "{stderr}");
    assert_eq!(code(&["train", "--config", p(&levels), "--out", p(&out)]), 2);
    assert_eq!(code(&["train", "--config", p(&f.dir.join("none.json")), "--out", p(&out)]), 3);
    assert_eq!(code(&["eval", "--checkpoint", p(&f.dir.join("none.bin")), "--data", p(&f.val)]), 3);
    assert_eq!(code(&["gen-data", "--out", p(&out), "--size", "0x4"]), 2);

    let diverge = run_config(&f, json!({"epochs": 3, "learning_rate": 1e30, "batch_size": 2}));
    let run = f.dir.join("diverge");
    assert_eq!(code(&["train", "--config", p(&diverge), "--out", p(&run)]), 4);

    let cfg = run_config(&f, json!({"epochs": 1}));
    ok(&["train", "--config", p(&cfg), "--out", p(&run)]);
    let ckpt = run.join("checkpoint.bin");
    let image = f.val.join("images").join("scene_00006.png");
    assert_eq!(code(&["infer", "--checkpoint", p(&ckpt), "--image", p(&image), "--dump-intermediates"]), 2);
    assert_eq!(code(&["infer", "--checkpoint", p(&ckpt), "--image", p(&f.dir.join("none.png"))]), 3);
}

#[test]
fn eval_of_own_predictions_is_exact() {
    let f = fixture();
    let cfg = run_config(&f, json!({"epochs": 1}));
    let run = f.dir.join("run");
    ok(&["train", "--config", p(&cfg), "--out", p(&run)]);
    let ckpt = run.join("checkpoint.bin");
    let model = checkpoint::load(&ckpt).unwrap();
    let data = DatasetDir::new(&f.train);
    let gt = data.gt_config().unwrap();
    for id in data.ids().unwrap() {
        let image = hdnet::imageio::read_gray(&data.image(&id)).unwrap();
        let d = model.predict(&image).unwrap().density;
        write_density(&data.density(&id), &d).unwrap();
        write_mask(&data.mask(&id), &build_level_masks(&d, &gt).unwrap()).unwrap();
    }
    let metrics = f.dir.join("self.json");
    ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&f.train), "--out", p(&metrics)]);
    let m = json_file(&metrics);
    assert_eq!(m["mae"].as_f64(), Some(0.0));
    assert_eq!(m["mse"].as_f64(), Some(0.0));
}

#[test]
fn reloaded_checkpoint_scores_identically() {
    let f = fixture();
    let cfg = run_config(&f, json!({"epochs": 2}));
    let run = f.dir.join("run");
    ok(&["train", "--config", p(&cfg), "--out", p(&run)]);
    let state: Value = json_file(&run.join("state.json"));
    let model = checkpoint::load(&run.join("checkpoint.bin")).unwrap();
    let val = DatasetDir::new(&f.val).load_samples(Some(64), 1).unwrap();
    let mae = evaluate_model(&model, &val, 4).unwrap().mae;
    assert_eq!(Some(mae), state["best_val_mae"].as_f64());

    let copy = f.dir.join("copy.bin");
    checkpoint::save(&copy, &model).unwrap();
    assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(run.join("checkpoint.bin")).unwrap());
    let written: Value = read_json(&run.join("config.json")).unwrap();
    let again: hdnet_core::ModelConfig = serde_json::from_value(written["model"].clone()).unwrap();
    assert_eq!(&again, model.config());
}
