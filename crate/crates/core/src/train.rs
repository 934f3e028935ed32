//! Dataset generation, physics-residual training, evaluation and the
//! experiment protocols built on them.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::em::{
    assemble_impedance, bistatic_rcs, excitation, AngleSweep, EmError, FactorizedSystem, IncidentWave, RcsProfile,
    SurfaceCurrentField, C64,
};
use crate::geometry::TriangleMesh;
use crate::model::{GeometryContext, Model, ModelConfig, ModelError};
use crate::nn::{Adam, CustomOp, NnError, Tape, Tensor, Var};

/// Losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("sample {sample}: {source}")]
    Solver { sample: String, source: EmError },
    #[error("training diverged at step {step}: loss {loss:e}")]
    Divergence { step: usize, loss: f64 },
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("prediction has {actual} faces, sample mesh has {expected}")]
    Mismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Em(#[from] EmError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// A mesh with its assembled impedance matrix at one frequency.
pub struct ShapeData {
    pub name: String,
    pub mesh: TriangleMesh,
    pub impedance: Arc<DMatrix<C64>>,
}

/// One incident wave on one shape, labelled by the oracle.
#[derive(Clone, Debug)]
pub struct ScatteringSample {
    pub id: String,
    pub shape: usize,
    pub wave: IncidentWave,
    pub excitation: DVector<C64>,
    pub label: SurfaceCurrentField,
    pub relative_residual: f64,
}

pub struct Dataset {
    pub shapes: Vec<ShapeData>,
    pub samples: Vec<ScatteringSample>,
}

/// Incident directions `θ = start, start + step, …, stop` at one `φ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngleGrid {
    pub theta_start_deg: f64,
    pub theta_stop_deg: f64,
    pub theta_step_deg: f64,
    pub phi_deg: f64,
}

impl AngleGrid {
    pub fn angles(&self) -> Result<Vec<(f64, f64)>> {
        let sweep =
            AngleSweep::theta_cut(self.phi_deg, self.theta_start_deg, self.theta_stop_deg, self.theta_step_deg)?;
        Ok(sweep.points().iter().map(|p| (p[0], p[1])).collect())
    }
}

/// Assembles each shape once, then solves every incident angle.
pub fn generate_dataset(
    shapes: Vec<(String, TriangleMesh)>,
    grid: &AngleGrid,
    template: &IncidentWave,
) -> Result<Dataset> {
    let angles = grid.angles()?;
    let k = template.wavenumber();
    let mut shape_data = Vec::with_capacity(shapes.len());
    let mut samples = Vec::new();
    for (s, (name, mesh)) in shapes.into_iter().enumerate() {
        let impedance = Arc::new(assemble_impedance(&mesh, k));
        let system = FactorizedSystem::new(impedance.clone())
            .map_err(|source| TrainError::Solver { sample: name.clone(), source })?;
        let solved: Vec<ScatteringSample> = angles
            .par_iter()
            .map(|&(theta, phi)| {
                let id = format!("{name}_t{theta:05.1}_p{phi:05.1}");
                let wave = template.with_angles(theta, phi)?;
                let v = excitation(&mesh, &wave);
                let (x, rel) = system.solve(&v).map_err(|source| TrainError::Solver { sample: id.clone(), source })?;
                Ok(ScatteringSample {
                    id,
                    shape: s,
                    wave,
                    excitation: v,
                    label: SurfaceCurrentField::from_dvector(&x),
                    relative_residual: rel,
                })
            })
            .collect::<Result<_>>()?;
        samples.extend(solved);
        shape_data.push(ShapeData { name, mesh, impedance });
    }
    Ok(Dataset { shapes: shape_data, samples })
}

/// Solved labels of a dataset, enough to rebuild it without re-solving.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelCache {
    pub shapes: Vec<CachedShape>,
    pub samples: Vec<CachedSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CachedShape {
    pub name: String,
    pub face_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CachedSample {
    pub id: String,
    pub shape: usize,
    pub wave: IncidentWave,
    pub relative_residual: f64,
    /// `[Re Jx, Im Jx, Re Jy, Im Jy, Re Jz, Im Jz]` per face.
    pub label: Vec<[f64; 6]>,
}

impl Dataset {
    pub fn label_cache(&self) -> LabelCache {
        LabelCache {
            shapes: self
                .shapes
                .iter()
                .map(|s| CachedShape { name: s.name.clone(), face_count: s.mesh.face_count() })
                .collect(),
            samples: self
                .samples
                .iter()
                .map(|s| CachedSample {
                    id: s.id.clone(),
                    shape: s.shape,
                    wave: s.wave,
                    relative_residual: s.relative_residual,
                    label: s.label.to_channels(),
                })
                .collect(),
        }
    }

    /// Rebuilds a dataset from cached labels, re-assembling each shape's
    /// impedance matrix. Meshes must be given in the cached order.
    pub fn from_cache(shapes: Vec<(String, TriangleMesh)>, cache: LabelCache) -> Result<Self> {
        if shapes.len() != cache.shapes.len() {
            return Err(TrainError::Config(format!(
                "{} meshes for {} cached shapes",
                shapes.len(),
                cache.shapes.len()
            )));
        }
        let first = cache.samples.first().map(|s| s.wave);
        let mut shape_data = Vec::with_capacity(shapes.len());
        for ((name, mesh), cached) in shapes.into_iter().zip(&cache.shapes) {
            if name != cached.name || mesh.face_count() != cached.face_count {
                return Err(TrainError::Config(format!(
                    "mesh {name} with {} faces does not match cached {} with {}",
                    mesh.face_count(),
                    cached.name,
                    cached.face_count
                )));
            }
            let k = first.map_or(1.0, |w| w.wavenumber());
            shape_data.push(ShapeData { name, impedance: Arc::new(assemble_impedance(&mesh, k)), mesh });
        }
        let mut samples = Vec::with_capacity(cache.samples.len());
        for s in cache.samples {
            let Some(shape) = shape_data.get(s.shape) else {
                return Err(TrainError::Config(format!("sample {} refers to missing shape {}", s.id, s.shape)));
            };
            if s.label.len() != shape.mesh.face_count() {
                return Err(TrainError::Mismatch { expected: shape.mesh.face_count(), actual: s.label.len() });
            }
            if first.is_some_and(|w| w.frequency() != s.wave.frequency()) {
                return Err(TrainError::Config(format!("sample {} has a different frequency", s.id)));
            }
            samples.push(ScatteringSample {
                excitation: excitation(&shape.mesh, &s.wave),
                label: SurfaceCurrentField::from_channels(&s.label),
                id: s.id,
                shape: s.shape,
                wave: s.wave,
                relative_residual: s.relative_residual,
            });
        }
        Ok(Dataset { shapes: shape_data, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mesh(&self, sample: usize) -> &TriangleMesh {
        &self.shapes[self.samples[sample].shape].mesh
    }

    pub fn impedance(&self, sample: usize) -> &DMatrix<C64> {
        &self.shapes[self.samples[sample].shape].impedance
    }

    /// Per-shape geometry contexts for one model configuration.
    pub fn contexts(&self, config: &ModelConfig, wavelength: f64) -> Result<Vec<GeometryContext>> {
        Ok(self.shapes.iter().map(|s| GeometryContext::new(&s.mesh, wavelength, config)).collect::<Result<_, _>>()?)
    }

    /// Seeded split per shape: a fraction `test_fraction` of each shape's
    /// angles goes to the test set. Returns sorted (train, test) indices.
    pub fn split(&self, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for s in 0..self.shapes.len() {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.samples[i].shape == s).collect();
            idx.shuffle(&mut rng);
            let n_test = (idx.len() as f64 * test_fraction).round() as usize;
            test.extend_from_slice(&idx[..n_test]);
            train.extend_from_slice(&idx[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        (train, test)
    }
}

// ---------------------------------------------------------------------------
// Losses

fn channels_to_vector(x: &Tensor) -> DVector<C64> {
    DVector::from_iterator(x.len() / 2, x.data().chunks_exact(2).map(|c| C64::new(c[0], c[1])))
}

/// Collocation residual `(1/N)‖Z J − V‖²` for `N` faces, with `J` given as
/// an `N × 6` channel tensor.
pub struct PhysicsResidual {
    impedance: Arc<DMatrix<C64>>,
    excitation: DVector<C64>,
}

impl PhysicsResidual {
    pub fn new(impedance: Arc<DMatrix<C64>>, excitation: DVector<C64>) -> Self {
        Self { impedance, excitation }
    }

    fn residual(&self, x: &Tensor) -> DVector<C64> {
        self.impedance.as_ref() * channels_to_vector(x) - &self.excitation
    }
}

impl CustomOp for PhysicsResidual {
    fn name(&self) -> &str {
        "physics_residual"
    }

    fn forward(&self, inputs: &[&Tensor]) -> crate::nn::Result<Tensor> {
        let x = inputs[0];
        if x.cols() != 6 || 3 * x.rows() != self.impedance.ncols() {
            return Err(NnError::Shape(format!(
                "currents {:?} against a {}-unknown system",
                x.shape(),
                self.impedance.ncols()
            )));
        }
        let r = self.residual(x);
        Ok(Tensor::scalar(r.norm_squared() / x.rows() as f64))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let x = inputs[0];
        let r = self.residual(x);
        let g = self.impedance.ad_mul(&r);
        let s = 2.0 * grad.data()[0] / x.rows() as f64;
        let data = g.iter().flat_map(|c| [s * c.re, s * c.im]).collect();
        vec![Tensor::matrix(x.rows(), 6, data).expect("finite gradient")]
    }
}

/// `(1/N)‖Z J − V‖²` for one sample.
pub fn sample_physics_loss(impedance: &DMatrix<C64>, v: &DVector<C64>, currents: &SurfaceCurrentField) -> f64 {
    (impedance * currents.to_dvector() - v).norm_squared() / currents.len() as f64
}

/// Batch loss `(1/B) Σ_u (1/N_u)‖Z_u J_u − V_u‖²`.
pub fn physics_loss(dataset: &Dataset, samples: &[usize], predictions: &[SurfaceCurrentField]) -> Result<f64> {
    if samples.is_empty() || samples.len() != predictions.len() {
        return Err(TrainError::Config(format!("{} samples, {} predictions", samples.len(), predictions.len())));
    }
    let mut total = 0.0;
    for (&i, p) in samples.iter().zip(predictions) {
        let n = dataset.mesh(i).face_count();
        if p.len() != n {
            return Err(TrainError::Mismatch { expected: n, actual: p.len() });
        }
        total += sample_physics_loss(dataset.impedance(i), &dataset.samples[i].excitation, p);
    }
    Ok(total / samples.len() as f64)
}

/// Mean squared error over all six real channels of all faces.
pub fn mse_loss(prediction: &SurfaceCurrentField, label: &SurfaceCurrentField) -> Result<f64> {
    if prediction.len() != label.len() {
        return Err(TrainError::Mismatch { expected: label.len(), actual: prediction.len() });
    }
    let (p, l) = (prediction.to_channels(), label.to_channels());
    let sum: f64 = p.iter().flatten().zip(l.iter().flatten()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / (6 * label.len()) as f64)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Physics,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossMode,
    pub test_fraction: f64,
    pub fine_tune_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 300,
            max_steps: None,
            learning_rate: 5e-4,
            seed: 0,
            loss: LossMode::Physics,
            test_fraction: 0.2,
            fine_tune_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(TrainError::Config(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction)));
        }
        if !(self.fine_tune_fraction > 0.0 && self.fine_tune_fraction <= 1.0) {
            return Err(TrainError::Config(format!(
                "fine_tune_fraction must lie in (0, 1], got {}",
                self.fine_tune_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    /// Mean batch loss per optimizer step.
    pub steps: Vec<f64>,
    /// Mean of the step losses within each epoch.
    pub epochs: Vec<f64>,
}

impl LossHistory {
    pub fn write_csv<W: std::io::Write>(&self, comment: Option<&str>, mut out: W) -> std::io::Result<()> {
        if let Some(c) = comment {
            writeln!(out, "# {c}")?;
        }
        writeln!(out, "epoch,loss")?;
        for (e, l) in self.epochs.iter().enumerate() {
            writeln!(out, "{},{:.16e}", e + 1, l)?;
        }
        Ok(())
    }
}

/// Records the training loss of one sample on `tape`.
fn sample_loss(
    tape: &mut Tape,
    model: &Model,
    ctx: &GeometryContext,
    dataset: &Dataset,
    i: usize,
    mode: LossMode,
    training: bool,
) -> Result<Var> {
    let s = &dataset.samples[i];
    let x = tape.constant(ctx.features(&s.wave, model.config.include_coordinates));
    let out = model.forward(tape, ctx, x, training)?.output;
    Ok(match mode {
        LossMode::Physics => {
            let op = PhysicsResidual::new(dataset.shapes[s.shape].impedance.clone(), s.excitation.clone());
            tape.custom(Arc::new(op), &[out])?
        }
        LossMode::Mse => {
            let label = tape.constant(crate::model::field_to_channels(&s.label));
            let d = tape.sub(out, label)?;
            let sq = tape.mul(d, d)?;
            tape.mean(sq)
        }
    })
}

/// Optimizes `model` in place on the `train` samples.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    contexts: &[GeometryContext],
    train: &[usize],
    config: &TrainConfig,
) -> Result<LossHistory> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.learning_rate);
    let mut history = LossHistory::default();
    let mut step = 0;
    'epochs: for _ in 0..config.epochs {
        let mut order = train.to_vec();
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::new();
        for batch in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            model.store.zero_grad();
            let mut batch_loss = 0.0;
            for &i in batch {
                let ctx = &contexts[dataset.samples[i].shape];
                let mut tape = Tape::new();
                let loss = sample_loss(&mut tape, model, ctx, dataset, i, config.loss, true)?;
                let loss = tape.scale(loss, 1.0 / batch.len() as f64);
                batch_loss += tape.value(loss).data()[0];
                let grads = tape.backward(loss)?;
                model.store.accumulate(&grads);
                model.store.apply_buffer_updates(tape.take_buffer_updates());
            }
            if !(batch_loss.is_finite() && batch_loss <= DIVERGENCE_LIMIT) {
                log::error!("loss {batch_loss:e} at step {step}; last epoch losses {:?}", history.epochs.last());
                return Err(TrainError::Divergence { step, loss: batch_loss });
            }
            adam.step(&mut model.store);
            history.steps.push(batch_loss);
            epoch_losses.push(batch_loss);
            step += 1;
        }
        if epoch_losses.is_empty() {
            break 'epochs;
        }
        history.epochs.push(epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64);
        log::info!("epoch {} loss {:.6e}", history.epochs.len(), history.epochs.last().unwrap());
    }
    Ok(history)
}

/// Inference-mode predictions for the given samples.
pub fn predict_samples(
    model: &Model,
    dataset: &Dataset,
    contexts: &[GeometryContext],
    samples: &[usize],
) -> Result<Vec<SurfaceCurrentField>> {
    samples
        .par_iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            Ok(model.predict(&contexts[s.shape], &s.wave)?)
        })
        .collect()
}

/// Mean inference-mode physics loss over `samples`.
pub fn evaluate_physics_loss(
    model: &Model,
    dataset: &Dataset,
    contexts: &[GeometryContext],
    samples: &[usize],
) -> Result<f64> {
    let preds = predict_samples(model, dataset, contexts, samples)?;
    physics_loss(dataset, samples, &preds)
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub r2: f64,
    pub mae: f64,
    pub mse: f64,
    /// Mean physics loss of the predictions.
    pub physics_loss: f64,
    /// Per-sample relative residual `‖Z J − V‖ / ‖V‖`.
    pub relative_residuals: Vec<f64>,
    /// `|pred| − |label|` absolute error per face, per sample.
    pub face_errors: Vec<Vec<f64>>,
    /// Empirical CDF of the pooled face errors.
    pub cdf: Vec<(f64, f64)>,
    /// Absolute RCS differences in dB over every sample's cut.
    pub rcs_errors_db: Vec<f64>,
    pub sample_ids: Vec<String>,
}

/// Scalar metrics over pooled per-face magnitudes.
pub fn magnitude_metrics(pred: &[f64], label: &[f64]) -> (f64, f64, f64, f64) {
    let n = label.len() as f64;
    let mse = pred.iter().zip(label).map(|(p, l)| (p - l) * (p - l)).sum::<f64>() / n;
    let mae = pred.iter().zip(label).map(|(p, l)| (p - l).abs()).sum::<f64>() / n;
    let mean = label.iter().sum::<f64>() / n;
    let ss_tot: f64 = label.iter().map(|l| (l - mean) * (l - mean)).sum();
    let ss_res = mse * n;
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    (mse.sqrt(), r2, mae, mse)
}

/// Sorted values paired with `i/n`.
pub fn empirical_cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter().enumerate().map(|(i, x)| (x, (i + 1) as f64 / n)).collect()
}

/// Cut through the incidence plane used for RCS comparisons.
pub fn rcs_cut(wave: &IncidentWave) -> AngleSweep {
    AngleSweep::theta_cut(wave.phi_deg(), 0.0, 180.0, 2.0).expect("fixed cut is valid")
}

/// Label and predicted bistatic RCS on the sample's cut.
pub fn rcs_overlay(
    mesh: &TriangleMesh,
    wave: &IncidentWave,
    label: &SurfaceCurrentField,
    pred: &SurfaceCurrentField,
) -> Result<(RcsProfile, RcsProfile)> {
    let sweep = rcs_cut(wave);
    Ok((bistatic_rcs(label, mesh, wave, &sweep)?, bistatic_rcs(pred, mesh, wave, &sweep)?))
}

pub fn evaluate_predictions(
    dataset: &Dataset,
    samples: &[usize],
    predictions: &[SurfaceCurrentField],
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(TrainError::Config("no samples to evaluate".into()));
    }
    let physics = physics_loss(dataset, samples, predictions)?;
    let mut all_pred = Vec::new();
    let mut all_label = Vec::new();
    let mut face_errors = Vec::new();
    let mut residuals = Vec::new();
    let mut rcs_errors = Vec::new();
    for (&i, p) in samples.iter().zip(predictions) {
        let s = &dataset.samples[i];
        let (pm, lm) = (p.magnitudes(), s.label.magnitudes());
        face_errors.push(pm.iter().zip(&lm).map(|(a, b)| (a - b).abs()).collect());
        all_pred.extend(pm);
        all_label.extend(lm);
        let r = dataset.impedance(i) * p.to_dvector() - &s.excitation;
        let vn = s.excitation.norm();
        residuals.push(if vn > 0.0 { r.norm() / vn } else { r.norm() });
        let (l, q) = rcs_overlay(dataset.mesh(i), &s.wave, &s.label, p)?;
        rcs_errors.extend(l.sigma_dbsm.iter().zip(&q.sigma_dbsm).map(|(a, b)| (a - b).abs()));
    }
    let (rmse, r2, mae, mse) = magnitude_metrics(&all_pred, &all_label);
    let pooled: Vec<f64> = face_errors.iter().flatten().copied().collect();
    Ok(MetricsReport {
        rmse,
        r2,
        mae,
        mse,
        physics_loss: physics,
        relative_residuals: residuals,
        cdf: empirical_cdf(&pooled),
        face_errors,
        rcs_errors_db: rcs_errors,
        sample_ids: samples.iter().map(|&i| dataset.samples[i].id.clone()).collect(),
    })
}

pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    contexts: &[GeometryContext],
    samples: &[usize],
) -> Result<MetricsReport> {
    let preds = predict_samples(model, dataset, contexts, samples)?;
    evaluate_predictions(dataset, samples, &preds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    /// Context build plus forward pass, best of the repeats.
    pub inference_seconds: f64,
    /// Assembly, factorization and solve, best of the repeats.
    pub oracle_seconds: f64,
    pub speedup: f64,
}

/// Wall-clock comparison of model inference and a fresh oracle solve on one mesh.
pub fn measure_timing(model: &Model, mesh: &TriangleMesh, wave: &IncidentWave, repeats: usize) -> Result<TimingReport> {
    let repeats = repeats.max(1);
    let mut inference = f64::INFINITY;
    for _ in 0..repeats {
        let start = Instant::now();
        let ctx = GeometryContext::new(mesh, wave.wavelength(), &model.config)?;
        let field = model.predict(&ctx, wave)?;
        std::hint::black_box(field);
        inference = inference.min(start.elapsed().as_secs_f64());
    }
    let mut oracle = f64::INFINITY;
    for _ in 0..repeats {
        let start = Instant::now();
        let z = Arc::new(assemble_impedance(mesh, wave.wavenumber()));
        let (x, _) = FactorizedSystem::new(z)?.solve(&excitation(mesh, wave))?;
        std::hint::black_box(x);
        oracle = oracle.min(start.elapsed().as_secs_f64());
    }
    Ok(TimingReport { inference_seconds: inference, oracle_seconds: oracle, speedup: oracle / inference })
}

// ---------------------------------------------------------------------------
// Protocols

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneReport {
    pub fraction: f64,
    pub tuned_samples: Vec<String>,
    pub history: LossHistory,
    pub metrics: MetricsReport,
}

/// Fine-tunes a copy of `model` on a seeded `fraction` of `dataset` and
/// evaluates on the remainder.
pub fn finetune_protocol(
    model: &Model,
    dataset: &Dataset,
    contexts: &[GeometryContext],
    fraction: f64,
    config: &TrainConfig,
) -> Result<FineTuneReport> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TrainError::Config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let n_tune = (dataset.len() as f64 * fraction).round() as usize;
    if n_tune < 2 {
        return Err(TrainError::Config(format!("fraction {fraction} selects {n_tune} samples; at least 2 are needed")));
    }
    let mut tune = idx[..n_tune].to_vec();
    tune.sort_unstable();
    let mut rest = idx[n_tune..].to_vec();
    rest.sort_unstable();
    // With nothing held out, evaluate on the tuning set.
    let eval_set = if rest.is_empty() { tune.clone() } else { rest };
    let mut tuned = model.clone();
    let history = train(&mut tuned, dataset, contexts, &tune, config)?;
    let metrics = evaluate(&tuned, dataset, contexts, &eval_set)?;
    Ok(FineTuneReport {
        fraction,
        tuned_samples: tune.iter().map(|&i| dataset.samples[i].id.clone()).collect(),
        history,
        metrics,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationArm {
    Full,
    PhysicsLoss,
    Edge,
    Skip,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] =
        [AblationArm::Full, AblationArm::PhysicsLoss, AblationArm::Edge, AblationArm::Skip];

    pub fn name(&self) -> &'static str {
        match self {
            AblationArm::Full => "full",
            AblationArm::PhysicsLoss => "physics-loss",
            AblationArm::Edge => "edge",
            AblationArm::Skip => "skip",
        }
    }

    /// The arm's configuration: the full one with one flag switched off.
    pub fn apply(&self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let (mut m, mut t) = (model.clone(), train.clone());
        match self {
            AblationArm::Full => {}
            AblationArm::PhysicsLoss => t.loss = LossMode::Mse,
            AblationArm::Edge => m.edge_constraint = false,
            AblationArm::Skip => m.skip_connections = false,
        }
        (m, t)
    }
}

/// Leaf paths at which two serializable values differ.
pub fn config_diff<T: Serialize>(a: &T, b: &T) -> Vec<String> {
    fn walk(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        use serde_json::Value;
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    walk(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
                }
            }
            _ if a != b => out.push(path.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    let a = serde_json::to_value(a).expect("serializable");
    let b = serde_json::to_value(b).expect("serializable");
    walk("", &a, &b, &mut out);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: AblationArm,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub history: LossHistory,
    pub metrics: MetricsReport,
    pub mean_relative_residual: f64,
    pub max_relative_residual: f64,
}

/// Trains and evaluates every arm from the same seed on the same split.
pub fn ablation_suite(
    dataset: &Dataset,
    model: &ModelConfig,
    train_config: &TrainConfig,
    wavelength: f64,
) -> Result<Vec<ArmReport>> {
    let (train_idx, test_idx) = dataset.split(train_config.test_fraction, train_config.seed);
    let contexts = dataset.contexts(model, wavelength)?;
    let mut out = Vec::new();
    for arm in AblationArm::ALL {
        let (m, t) = arm.apply(model, train_config);
        let mut net = Model::new(m.clone())?;
        let history = train(&mut net, dataset, &contexts, &train_idx, &t)?;
        let eval_idx = if test_idx.is_empty() { &train_idx } else { &test_idx };
        let metrics = evaluate(&net, dataset, &contexts, eval_idx)?;
        let res = &metrics.relative_residuals;
        let mean = res.iter().sum::<f64>() / res.len() as f64;
        let max = res.iter().copied().fold(0.0, f64::max);
        out.push(ArmReport {
            arm,
            model: m,
            train: t,
            history,
            metrics,
            mean_relative_residual: mean,
            max_relative_residual: max,
        });
    }
    Ok(out)
}

/// Worst violation of `L(λa + (1−λ)b) ≤ λL(a) + (1−λ)L(b)` over random
/// current pairs, relative to the right-hand side. Non-positive means convex.
pub fn convexity_violation(impedance: &DMatrix<C64>, v: &DVector<C64>, scale: f64, pairs: usize, seed: u64) -> f64 {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = v.len();
    let random = |rng: &mut ChaCha8Rng| {
        DVector::from_iterator(n, (0..n).map(|_| C64::new(rng.gen_range(-scale..scale), rng.gen_range(-scale..scale))))
    };
    let loss = |x: &DVector<C64>| (impedance * x - v).norm_squared() / (n / 3) as f64;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..pairs {
        let (a, b) = (random(&mut rng), random(&mut rng));
        let lambda: f64 = rng.gen_range(0.0..=1.0);
        let mix = &a * C64::from(lambda) + &b * C64::from(1.0 - lambda);
        let rhs = lambda * loss(&a) + (1.0 - lambda) * loss(&b);
        worst = worst.max((loss(&mix) - rhs) / rhs);
    }
    worst
}
