use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use scatternet::em::{
    bistatic_rcs, mie_reference, physical_optics, solve_scattering, write_currents_csv, write_rcs_csv, AngleSweep,
    IncidentWave,
};
use scatternet::geometry::{generate_shape, load_mesh, write_off, MeshFormat, ShapeSpec, TriangleMesh};
use scatternet::nn::ParameterStore;
use scatternet::train::{
    ablation_suite, evaluate_physics_loss, evaluate_predictions, finetune_protocol, generate_dataset, measure_timing,
    predict_samples, rcs_overlay, train, AblationArm, Dataset, LabelCache, LossHistory, MetricsReport,
};
use scatternet::{GeometryContext, Model, ModelConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifacts::{Artifacts, Manifest};
use crate::config::{sha256_hex, LoadedConfig};
use crate::error::CliError;

const DATA_DIR: &str = "data";
const LABELS: &str = "labels.json";
const CHECKPOINT: &str = "model.ckpt";

/// Hash of the sections that determine the generated data.
fn dataset_key(cfg: &LoadedConfig) -> String {
    let r = &cfg.run;
    let doc = json!({ "wave": r.wave, "mesh": r.mesh, "shapes": r.shapes, "levels": r.model.levels });
    sha256_hex(doc.to_string().as_bytes())[..16].to_string()
}

fn run_dir(arm: AblationArm) -> String {
    match arm {
        AblationArm::Full => "train".into(),
        other => format!("train-{}", other.name()),
    }
}

// ---------------------------------------------------------------------------
// gen

pub fn gen(cfg: &LoadedConfig) -> Result<String, CliError> {
    let meshes = cfg.build_meshes()?;
    let template = cfg.template_wave()?;
    let mut out = Artifacts::create(cfg.output_dir.join(DATA_DIR), &cfg.hash)?;
    for (name, mesh) in &meshes {
        info!("{name}: {} faces", mesh.face_count());
        let stamp = out.stamp();
        out.write_text(&format!("meshes/{name}.off"), |_, buf| write_off(mesh, Some(&stamp), buf))?;
        let ctx = GeometryContext::new(mesh, template.wavelength(), &cfg.run.model)
            .map_err(|e| CliError::Other(format!("{name}: {e}")))?;
        out.write_json(
            &format!("hierarchy/{name}.json"),
            &json!({ "hierarchy": ctx.hierarchy, "graphs": ctx.graphs }),
        )?;
    }
    info!("solving {} incident directions per shape", cfg.angle_grid().angles().map(|a| a.len()).unwrap_or(0));
    let dataset = generate_dataset(meshes, &cfg.angle_grid(), &template)?;
    for s in &dataset.samples {
        info!("{}: relative residual {:.2e}", s.id, s.relative_residual);
        out.write_text(&format!("labels/{}.csv", s.id), |stamp, buf| write_currents_csv(&s.label, Some(stamp), buf))?;
    }
    out.write_json(LABELS, &dataset.label_cache())?;
    let samples = dataset.len();
    let manifest = out.finish(Some(dataset_key(cfg)))?;
    println!("generated {samples} samples; manifest sha256 {manifest}");
    Ok(manifest)
}

#[derive(Deserialize)]
struct LabelFile {
    config_hash: String,
    #[serde(flatten)]
    cache: LabelCache,
}

/// Reloads the dataset written by `gen` after checking it belongs to `cfg`.
fn load_dataset(cfg: &LoadedConfig) -> Result<Dataset, CliError> {
    let dir = cfg.output_dir.join(DATA_DIR);
    let manifest = Manifest::read(&dir)?;
    let key = dataset_key(cfg);
    if manifest.dataset_key.as_deref() != Some(key.as_str()) {
        return Err(CliError::Compatibility(format!(
            "{} was generated by config {} with different wave, mesh, shape or level settings; rerun `scatternet gen`",
            dir.display(),
            manifest.config_hash
        )));
    }
    manifest.verify(&dir)?;
    let text = std::fs::read_to_string(dir.join(LABELS)).map_err(CliError::io(LABELS))?;
    let labels: LabelFile =
        serde_json::from_str(&text).map_err(|e| CliError::Compatibility(format!("{LABELS}: {e}")))?;
    if labels.config_hash != manifest.config_hash {
        return Err(CliError::Compatibility(format!("{LABELS} does not belong to the manifest")));
    }
    let meshes = labels
        .cache
        .shapes
        .iter()
        .map(|s| {
            let path = dir.join(format!("meshes/{}.off", s.name));
            load_mesh(&path, MeshFormat::Off)
                .map(|m| (s.name.clone(), m))
                .map_err(|e| CliError::Compatibility(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset::from_cache(meshes, labels.cache)?)
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    config_hash: String,
    arm: AblationArm,
    model: ModelConfig,
}

fn save_checkpoint(out: &mut Artifacts, model: &Model, arm: AblationArm, hash: &str) -> Result<PathBuf, CliError> {
    let record = CheckpointRecord { config_hash: hash.to_string(), arm, model: model.config.clone() };
    let mut buf = Vec::new();
    model
        .store
        .save(&serde_json::to_string(&record).expect("record serializes"), &mut buf)
        .map_err(|e| CliError::Other(e.to_string()))?;
    out.write(CHECKPOINT, &buf)
}

/// Loads a checkpoint whose model config must equal `expected`.
fn load_checkpoint(path: &Path, expected: &ModelConfig) -> Result<(Model, CheckpointRecord), CliError> {
    let bad = |m: String| CliError::Compatibility(format!("{}: {m}", path.display()));
    let file = std::fs::File::open(path).map_err(|e| bad(e.to_string()))?;
    let (store, record) = ParameterStore::load(std::io::BufReader::new(file)).map_err(|e| bad(e.to_string()))?;
    let record: CheckpointRecord = serde_json::from_str(&record).map_err(|e| bad(format!("record: {e}")))?;
    if &record.model != expected {
        return Err(bad(format!(
            "model settings differ from the config (checkpoint written under config {})",
            record.config_hash
        )));
    }
    let mut model = Model::new(record.model.clone()).map_err(|e| bad(e.to_string()))?;
    model.store.copy_values_from(&store).map_err(|e| bad(e.to_string()))?;
    Ok((model, record))
}

fn write_history(out: &mut Artifacts, history: &LossHistory) -> Result<(), CliError> {
    out.write_text("loss.csv", |stamp, buf| history.write_csv(Some(stamp), buf))?;
    out.write_text("steps.csv", |stamp, buf| {
        writeln!(buf, "# {stamp}")?;
        writeln!(buf, "step,loss")?;
        for (i, l) in history.steps.iter().enumerate() {
            writeln!(buf, "{},{l:.16e}", i + 1)?;
        }
        Ok(())
    })?;
    Ok(())
}

fn write_cdf(out: &mut Artifacts, rel: &str, metrics: &MetricsReport) -> Result<(), CliError> {
    out.write_text(rel, |stamp, buf| {
        writeln!(buf, "# {stamp}")?;
        writeln!(buf, "error_value,cumulative_fraction")?;
        for (v, f) in &metrics.cdf {
            writeln!(buf, "{v:.10e},{f:.10e}")?;
        }
        Ok(())
    })?;
    Ok(())
}

/// Summary without the bulky per-face data, which goes to CSV instead.
fn metrics_summary(m: &MetricsReport) -> serde_json::Value {
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    json!({
        "rmse": m.rmse,
        "r2": m.r2,
        "mae": m.mae,
        "mse": m.mse,
        "physics_loss": m.physics_loss,
        "mean_relative_residual": mean(&m.relative_residuals),
        "mean_rcs_error_db": mean(&m.rcs_errors_db),
        "samples": m.sample_ids.iter().zip(&m.relative_residuals)
            .map(|(id, r)| json!({ "id": id, "relative_residual": r }))
            .collect::<Vec<_>>(),
    })
}

fn write_face_errors(out: &mut Artifacts, m: &MetricsReport) -> Result<(), CliError> {
    out.write_text("face_errors.csv", |stamp, buf| {
        writeln!(buf, "# {stamp}")?;
        writeln!(buf, "sample_id,face,abs_error")?;
        for (id, errs) in m.sample_ids.iter().zip(&m.face_errors) {
            for (f, e) in errs.iter().enumerate() {
                writeln!(buf, "{id},{f},{e:.10e}")?;
            }
        }
        Ok(())
    })?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train / eval / ablate / finetune

pub fn train_cmd(cfg: &LoadedConfig, arm: AblationArm) -> Result<(), CliError> {
    let dataset = load_dataset(cfg)?;
    let (model_config, train_config) = arm.apply(&cfg.run.model, &cfg.run.train);
    let wavelength = cfg.template_wave()?.wavelength();
    let contexts = dataset.contexts(&model_config, wavelength)?;
    let (train_idx, test_idx) = dataset.split(train_config.test_fraction, train_config.seed);
    let mut model = Model::new(model_config).map_err(|e| CliError::Config(e.to_string()))?;
    let initial = evaluate_physics_loss(&model, &dataset, &contexts, &train_idx)?;
    info!("arm {}: {} training samples, initial physics loss {initial:.4e}", arm.name(), train_idx.len());
    let history = train(&mut model, &dataset, &contexts, &train_idx, &train_config)?;
    let final_loss = evaluate_physics_loss(&model, &dataset, &contexts, &train_idx)?;
    let mut out = Artifacts::create(cfg.output_dir.join(run_dir(arm)), &cfg.hash)?;
    save_checkpoint(&mut out, &model, arm, &cfg.hash)?;
    write_history(&mut out, &history)?;
    out.write_json(
        "train.json",
        &json!({
            "arm": arm,
            "train_samples": train_idx.iter().map(|&i| &dataset.samples[i].id).collect::<Vec<_>>(),
            "test_samples": test_idx.iter().map(|&i| &dataset.samples[i].id).collect::<Vec<_>>(),
            "steps": history.steps.len(),
            "epochs": history.epochs.len(),
            "initial_physics_loss": initial,
            "final_physics_loss": final_loss,
        }),
    )?;
    out.finish(None)?;
    println!("trained {} steps; physics loss {initial:.4e} -> {final_loss:.4e}", history.steps.len());
    Ok(())
}

pub fn eval_cmd(cfg: &LoadedConfig, arm: AblationArm, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    let dataset = load_dataset(cfg)?;
    let (model_config, train_config) = arm.apply(&cfg.run.model, &cfg.run.train);
    let path = checkpoint.unwrap_or_else(|| cfg.output_dir.join(run_dir(arm)).join(CHECKPOINT));
    let (model, _) = load_checkpoint(&path, &model_config)?;
    let wavelength = cfg.template_wave()?.wavelength();
    let contexts = dataset.contexts(&model.config, wavelength)?;
    let (train_idx, test_idx) = dataset.split(train_config.test_fraction, train_config.seed);
    let eval_idx = if test_idx.is_empty() { train_idx } else { test_idx };
    let preds = predict_samples(&model, &dataset, &contexts, &eval_idx)?;
    let metrics = evaluate_predictions(&dataset, &eval_idx, &preds)?;

    let dir = match arm {
        AblationArm::Full => "eval".to_string(),
        other => format!("eval-{}", other.name()),
    };
    let mut out = Artifacts::create(cfg.output_dir.join(dir), &cfg.hash)?;
    out.write_json("metrics.json", &metrics_summary(&metrics))?;
    write_cdf(&mut out, "cdf.csv", &metrics)?;
    write_face_errors(&mut out, &metrics)?;
    for (&i, p) in eval_idx.iter().zip(&preds) {
        let s = &dataset.samples[i];
        let (label, pred) = rcs_overlay(dataset.mesh(i), &s.wave, &s.label, p)?;
        out.write_text(&format!("rcs/{}.csv", s.id), |stamp, buf| {
            writeln!(buf, "# {stamp}")?;
            writeln!(buf, "theta_deg,phi_deg,label_dbsm,pred_dbsm")?;
            for ((a, l), q) in label.angles.iter().zip(&label.sigma_dbsm).zip(&pred.sigma_dbsm) {
                writeln!(buf, "{},{},{l:.10e},{q:.10e}", a[0], a[1])?;
            }
            Ok(())
        })?;
        out.write_text(&format!("currents/{}.csv", s.id), |stamp, buf| write_currents_csv(p, Some(stamp), buf))?;
    }
    let first = &dataset.samples[eval_idx[0]];
    let timing = measure_timing(&model, dataset.mesh(eval_idx[0]), &first.wave, cfg.run.eval.timing_repeats)?;
    out.write_json(
        "timing.json",
        &json!({ "sample": first.id, "faces": dataset.mesh(eval_idx[0]).face_count(), "timing": timing }),
    )?;
    out.finish(None)?;
    println!(
        "evaluated {} samples: RMSE {:.4e}  R2 {:.4}  MAE {:.4e}  MSE {:.4e}  speedup {:.0}x",
        eval_idx.len(),
        metrics.rmse,
        metrics.r2,
        metrics.mae,
        metrics.mse,
        timing.speedup
    );
    Ok(())
}

pub fn ablate_cmd(cfg: &LoadedConfig) -> Result<(), CliError> {
    let dataset = load_dataset(cfg)?;
    let wavelength = cfg.template_wave()?.wavelength();
    let reports = ablation_suite(&dataset, &cfg.run.model, &cfg.run.train, wavelength)?;
    let root = cfg.output_dir.join("ablation");
    let mut summary = Vec::new();
    for r in &reports {
        let mut out = Artifacts::create(root.join(r.arm.name()), &cfg.hash)?;
        write_history(&mut out, &r.history)?;
        write_cdf(&mut out, "cdf.csv", &r.metrics)?;
        let mut m = metrics_summary(&r.metrics);
        m["arm"] = json!(r.arm);
        m["model"] = json!(r.model);
        m["train"] = json!(r.train);
        m["max_relative_residual"] = json!(r.max_relative_residual);
        out.write_json("metrics.json", &m)?;
        out.finish(None)?;
        summary.push(json!({
            "arm": r.arm,
            "rmse": r.metrics.rmse,
            "r2": r.metrics.r2,
            "mae": r.metrics.mae,
            "mse": r.metrics.mse,
            "mean_relative_residual": r.mean_relative_residual,
            "max_relative_residual": r.max_relative_residual,
        }));
        println!(
            "{:<13} RMSE {:.4e}  R2 {:.4}  mean residual {:.4e}",
            r.arm.name(),
            r.metrics.rmse,
            r.metrics.r2,
            r.mean_relative_residual
        );
    }
    let mut out = Artifacts::create(root, &cfg.hash)?;
    out.write_json("summary.json", &json!({ "arms": summary }))?;
    out.finish(None)?;
    Ok(())
}

pub fn finetune_cmd(cfg: &LoadedConfig, checkpoint: &Path, fraction: f64) -> Result<(), CliError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CliError::Config(format!("--fraction must lie in (0, 1], got {fraction}")));
    }
    let dataset = load_dataset(cfg)?;
    let (model, record) = load_checkpoint(checkpoint, &cfg.run.model)?;
    let wavelength = cfg.template_wave()?.wavelength();
    let contexts = dataset.contexts(&model.config, wavelength)?;
    let report = finetune_protocol(&model, &dataset, &contexts, fraction, &cfg.run.train)?;
    let mut out = Artifacts::create(cfg.output_dir.join(format!("finetune-{fraction}")), &cfg.hash)?;
    write_history(&mut out, &report.history)?;
    write_cdf(&mut out, "cdf.csv", &report.metrics)?;
    write_face_errors(&mut out, &report.metrics)?;
    let mut m = metrics_summary(&report.metrics);
    m["fraction"] = json!(fraction);
    m["base_checkpoint_config_hash"] = json!(record.config_hash);
    m["tuned_samples"] = json!(report.tuned_samples);
    out.write_json("metrics.json", &m)?;
    out.finish(None)?;
    println!(
        "fine-tuned on {} of {} samples: RMSE {:.4e}  R2 {:.4}",
        report.tuned_samples.len(),
        dataset.len(),
        report.metrics.rmse,
        report.metrics.r2
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// solve

#[derive(Clone, Debug, Serialize)]
pub struct SolveArgs {
    pub mesh: Option<PathBuf>,
    pub shape: Option<ShapeSpec>,
    pub edge_wavelengths: f64,
    pub frequency_hz: f64,
    pub amplitude: f64,
    pub theta_deg: f64,
    pub phi_deg: f64,
    pub cut_phi_deg: f64,
    pub cut_start_deg: f64,
    pub cut_stop_deg: f64,
    pub cut_step_deg: f64,
    pub po: bool,
    pub mie_radius: Option<f64>,
}

pub fn solve_cmd(args: &SolveArgs, out_dir: PathBuf) -> Result<(), CliError> {
    let hash = sha256_hex(serde_json::to_string(args).expect("args serialize").as_bytes())[..16].to_string();
    let wave = IncidentWave::new(args.frequency_hz, args.amplitude, args.theta_deg, args.phi_deg)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let sweep = AngleSweep::theta_cut(args.cut_phi_deg, args.cut_start_deg, args.cut_stop_deg, args.cut_step_deg)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mesh: TriangleMesh = match (&args.mesh, &args.shape) {
        (Some(path), None) => MeshFormat::from_path(path).and_then(|f| load_mesh(path, f)),
        (None, Some(spec)) => generate_shape(spec, wave.wavelength() * args.edge_wavelengths),
        _ => return Err(CliError::Config("give exactly one of --mesh and --shape".into())),
    }
    .map_err(|e| CliError::Config(e.to_string()))?;

    let mut out = Artifacts::create(out_dir, &hash)?;
    let currents = if args.po {
        physical_optics(&mesh, &wave)
    } else {
        let (sol, secs) = solve_scattering(&mesh, &wave).map_err(|e| CliError::Solver(e.to_string()))?;
        println!("{} faces solved in {secs:.2} s; relative residual {:.3e}", mesh.face_count(), sol.relative_residual);
        sol.currents
    };
    out.write_text("currents.csv", |stamp, buf| write_currents_csv(&currents, Some(stamp), buf))?;
    let rcs = bistatic_rcs(&currents, &mesh, &wave, &sweep).map_err(|e| CliError::Solver(e.to_string()))?;
    out.write_text("rcs.csv", |stamp, buf| write_rcs_csv(&rcs, Some(stamp), buf))?;
    if let Some(radius) = args.mie_radius {
        let mie = mie_reference(radius, &wave, &sweep).map_err(|e| CliError::Config(e.to_string()))?;
        out.write_text("mie.csv", |stamp, buf| write_rcs_csv(&mie, Some(stamp), buf))?;
    }
    let stamp = out.stamp();
    out.write_text("mesh.off", |_, buf| write_off(&mesh, Some(&stamp), buf))?;
    out.write_json("solve.json", args)?;
    out.finish(None)?;
    if args.po {
        println!("{} faces, physical-optics currents", mesh.face_count());
    }
    Ok(())
}
