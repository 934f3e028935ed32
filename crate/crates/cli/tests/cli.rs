use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
output_dir = "run"
seed = 1

[wave]
theta_start_deg = 0.0
theta_stop_deg = 180.0
theta_step_deg = 45.0

[mesh]
edge_wavelengths = 0.2

[[shapes]]
name = "cube"
shape = { kind = "cube", side = 0.12 }

[model]
levels = 2
width = 4
heads = 2
density_hidden = 3
normal_hidden = 3

[train]
batch_size = 2
max_steps = 3
learning_rate = 1e-3

[eval]
timing_repeats = 1
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scatternet"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup(config: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, config).unwrap();
    (dir, path)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn config_hash(dir: &Path) -> String {
    json(&dir.join("manifest.json"))["config_hash"].as_str().unwrap().to_string()
}

/// Every file listed in the manifest mentions the config hash.
fn assert_stamped(dir: &Path) {
    let hash = config_hash(dir);
    for f in json(&dir.join("manifest.json"))["files"].as_array().unwrap() {
        let bytes = std::fs::read(dir.join(f["path"].as_str().unwrap())).unwrap();
        let found = bytes.windows(hash.len()).any(|w| w == hash.as_bytes());
        assert!(found, "{} lacks the config hash", f["path"]);
    }
}

#[test]
fn pipeline_end_to_end() {
    let (tmp, cfg) = setup(CONFIG);
    let cfg = cfg.to_str().unwrap();
    let root = tmp.path().join("run");

    ok(&["gen", cfg], tmp.path());
    let data = root.join("data");
    let manifest = std::fs::read(data.join("manifest.json")).unwrap();
    let files: Vec<String> = json(&data.join("manifest.json"))["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["path"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(files.iter().filter(|f| f.starts_with("meshes/")).count(), 1);
    assert_eq!(files.iter().filter(|f| f.starts_with("labels/")).count(), 5);
    assert!(files.contains(&"hierarchy/cube.json".to_string()));
    assert_stamped(&data);

    ok(&["gen", cfg], tmp.path());
    assert_eq!(std::fs::read(data.join("manifest.json")).unwrap(), manifest, "gen is not deterministic");

    let stdout = ok(&["train", cfg], tmp.path());
    assert!(stdout.contains("trained 3 steps"), "{stdout}");
    assert!(root.join("train/model.ckpt").is_file());
    let loss = std::fs::read_to_string(root.join("train/loss.csv")).unwrap();
    assert!(loss.lines().any(|l| l == "epoch,loss"));
    assert_stamped(&root.join("train"));

    ok(&["eval", cfg], tmp.path());
    let eval = root.join("eval");
    let metrics = json(&eval.join("metrics.json"));
    for key in ["rmse", "r2", "mae", "mse"] {
        assert!(metrics[key].is_f64(), "metrics.json lacks {key}");
    }
    assert!(metrics.get("timing").is_none());
    assert!(json(&eval.join("timing.json"))["timing"]["speedup"].is_f64());
    let cdf = std::fs::read_to_string(eval.join("cdf.csv")).unwrap();
    assert!(cdf.contains("error_value,cumulative_fraction"));
    let overlay = std::fs::read_dir(eval.join("rcs")).unwrap().next().unwrap().unwrap().path();
    assert!(std::fs::read_to_string(overlay).unwrap().contains("theta_deg,phi_deg,label_dbsm,pred_dbsm"));
    assert_stamped(&eval);

    ok(&["ablate", cfg], tmp.path());
    let mut arms: Vec<String> = std::fs::read_dir(root.join("ablation"))
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().into_string().unwrap())
        .collect();
    arms.sort();
    assert_eq!(arms, ["edge", "full", "physics-loss", "skip"]);

    let ckpt = root.join("train/model.ckpt");
    ok(&["finetune", cfg, "--checkpoint", ckpt.to_str().unwrap(), "--fraction", "0.5"], tmp.path());
    assert!(root.join("finetune-0.5/cdf.csv").is_file());

    // A checkpoint from a different model shape is rejected.
    let wider = CONFIG.replace("width = 4", "width = 6");
    std::fs::write(tmp.path().join("wider.toml"), wider).unwrap();
    let out = run(&["eval", "wider.toml", "--checkpoint", ckpt.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));

    // Same with a dataset produced under other mesh settings.
    let finer = CONFIG.replace("edge_wavelengths = 0.2", "edge_wavelengths = 0.15");
    std::fs::write(tmp.path().join("finer.toml"), finer).unwrap();
    assert_eq!(run(&["train", "finer.toml"], tmp.path()).status.code(), Some(5));

    // Tampered labels are detected.
    let label = data.join(files.iter().find(|f| f.starts_with("labels/")).unwrap());
    std::fs::write(&label, "tampered").unwrap();
    assert_eq!(run(&["train", cfg], tmp.path()).status.code(), Some(5));
}

#[test]
fn invalid_key_exits_with_config_code() {
    let (tmp, cfg) = setup(&CONFIG.replace("batch_size = 2", "batch_sise = 2"));
    let out = run(&["gen", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_sise"));
}

#[test]
fn missing_dataset_is_a_compatibility_error() {
    let (tmp, cfg) = setup(CONFIG);
    let out = run(&["train", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn solve_writes_currents_and_rcs() {
    let tmp = tempfile::tempdir().unwrap();
    let shape = r#"{"kind":"cube","side":0.1}"#;
    let stdout = ok(&["solve", "--shape", shape, "--edge", "0.2", "--theta", "30", "--out", "oracle"], tmp.path());
    let residual: f64 = stdout.split("relative residual ").nth(1).unwrap().trim().parse().unwrap();
    assert!(residual <= 1e-8, "{stdout}");
    for f in ["currents.csv", "rcs.csv", "mesh.off", "solve.json"] {
        assert!(tmp.path().join("oracle").join(f).is_file(), "{f}");
    }
    assert_stamped(&tmp.path().join("oracle"));

    let mesh = tmp.path().join("oracle/mesh.off");
    ok(&["solve", "--mesh", mesh.to_str().unwrap(), "--po", "--out", "po"], tmp.path());
    let po = std::fs::read_to_string(tmp.path().join("po/currents.csv")).unwrap();
    let mom = std::fs::read_to_string(tmp.path().join("oracle/currents.csv")).unwrap();
    assert_ne!(po.lines().last(), mom.lines().last());

    let sphere = r#"{"kind":"sphere","radius":0.05}"#;
    ok(&["solve", "--shape", sphere, "--edge", "0.2", "--mie", "0.05", "--cut-step", "10", "--out", "mie"], tmp.path());
    let mie = std::fs::read_to_string(tmp.path().join("mie/mie.csv")).unwrap();
    assert_eq!(mie.lines().filter(|l| !l.starts_with('#')).count(), 1 + 19);
}

#[test]
fn solve_rejects_bad_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["solve", "--mesh", "missing.off", "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["solve", "--shape", r#"{"kind":"blob"}"#, "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["solve", "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}
