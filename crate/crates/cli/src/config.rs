//! Run configuration: one TOML document per experiment.

use std::path::{Path, PathBuf};

use scatternet::em::IncidentWave;
use scatternet::geometry::{generate_shape, load_mesh, MeshFormat, ShapeSpec, TriangleMesh};
use scatternet::train::{AngleGrid, TrainConfig};
use scatternet::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Relative paths are taken from the config file's directory.
    pub output_dir: PathBuf,
    /// Overrides `model.seed` and `train.seed`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub wave: WaveConfig,
    #[serde(default)]
    pub mesh: MeshConfig,
    pub shapes: Vec<ShapeEntry>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaveConfig {
    pub frequency_hz: f64,
    pub amplitude: f64,
    pub theta_start_deg: f64,
    pub theta_stop_deg: f64,
    pub theta_step_deg: f64,
    pub phi_deg: f64,
}

impl Default for WaveConfig {
    fn default() -> Self {
        Self {
            frequency_hz: 1e9,
            amplitude: 1.0,
            theta_start_deg: 0.0,
            theta_stop_deg: 180.0,
            theta_step_deg: 10.0,
            phi_deg: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    /// Target edge length of generated shapes, in wavelengths.
    pub edge_wavelengths: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self { edge_wavelengths: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeEntry {
    pub name: String,
    /// Generated shape. Exactly one of `shape` and `file` must be given.
    pub shape: Option<ShapeSpec>,
    /// OFF or OBJ mesh file.
    pub file: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub timing_repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { timing_repeats: 3 }
    }
}

/// A parsed config with its hash and resolved paths.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub run: RunConfig,
    pub hash: String,
    pub output_dir: PathBuf,
    pub base_dir: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base_dir)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut run: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        run.model.seed = run.seed;
        run.train.seed = run.seed;
        run.validate(base_dir)?;
        let canonical = serde_json::to_vec(&run).expect("config serializes");
        let hash = sha256_hex(&canonical)[..16].to_string();
        let output_dir = base_dir.join(&run.output_dir);
        Ok(Self { run, hash, output_dir, base_dir: base_dir.to_path_buf() })
    }

    pub fn template_wave(&self) -> Result<IncidentWave, CliError> {
        let w = &self.run.wave;
        IncidentWave::new(w.frequency_hz, w.amplitude, w.theta_start_deg, w.phi_deg)
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn angle_grid(&self) -> AngleGrid {
        let w = &self.run.wave;
        AngleGrid {
            theta_start_deg: w.theta_start_deg,
            theta_stop_deg: w.theta_stop_deg,
            theta_step_deg: w.theta_step_deg,
            phi_deg: w.phi_deg,
        }
    }

    /// Meshes named in the config, generated or read from disk.
    pub fn build_meshes(&self) -> Result<Vec<(String, TriangleMesh)>, CliError> {
        let edge = self.template_wave()?.wavelength() * self.run.mesh.edge_wavelengths;
        self.run
            .shapes
            .iter()
            .map(|s| {
                let mesh = match (&s.shape, &s.file) {
                    (Some(spec), None) => generate_shape(spec, edge),
                    (None, Some(file)) => {
                        let path = self.base_dir.join(file);
                        MeshFormat::from_path(&path).and_then(|f| load_mesh(&path, f))
                    }
                    _ => unreachable!("checked in validate"),
                }
                .map_err(|e| CliError::Config(format!("shape `{}`: {e}", s.name)))?;
                Ok((s.name.clone(), mesh))
            })
            .collect()
    }
}

impl RunConfig {
    fn validate(&self, base_dir: &Path) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.shapes.is_empty() {
            return bad("at least one [[shapes]] entry is required".into());
        }
        for (i, s) in self.shapes.iter().enumerate() {
            let safe = !s.name.is_empty() && s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
            if !safe {
                return bad(format!("shapes[{i}].name `{}` must be non-empty and use only [A-Za-z0-9_-]", s.name));
            }
            if self.shapes[..i].iter().any(|o| o.name == s.name) {
                return bad(format!("duplicate shape name `{}`", s.name));
            }
            match (&s.shape, &s.file) {
                (Some(_), None) => {}
                (None, Some(f)) => {
                    let path = base_dir.join(f);
                    if !path.is_file() {
                        return bad(format!("shapes[{i}].file: {} does not exist", path.display()));
                    }
                }
                _ => return bad(format!("shapes[{i}] needs exactly one of `shape` and `file`")),
            }
        }
        if !(self.mesh.edge_wavelengths > 0.0 && self.mesh.edge_wavelengths.is_finite()) {
            return bad(format!("mesh.edge_wavelengths must be positive, got {}", self.mesh.edge_wavelengths));
        }
        if self.eval.timing_repeats == 0 {
            return bad("eval.timing_repeats must be at least 1".into());
        }
        let w = &self.wave;
        IncidentWave::new(w.frequency_hz, w.amplitude, w.theta_start_deg, w.phi_deg)
            .map_err(|e| CliError::Config(format!("wave: {e}")))?;
        AngleGrid {
            theta_start_deg: w.theta_start_deg,
            theta_stop_deg: w.theta_stop_deg,
            theta_step_deg: w.theta_step_deg,
            phi_deg: w.phi_deg,
        }
        .angles()
        .map_err(|e| CliError::Config(format!("wave: {e}")))?;
        self.model.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        self.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "out"
[[shapes]]
name = "cube"
shape = { kind = "cube", side = 0.1 }
"#;

    #[test]
    fn defaults_fill_in() {
        let c = LoadedConfig::parse(MINIMAL, Path::new("/tmp/x")).unwrap();
        assert_eq!(c.output_dir, Path::new("/tmp/x/out"));
        assert_eq!(c.run.wave, WaveConfig::default());
        assert_eq!(c.hash.len(), 16);
    }

    #[test]
    fn hash_tracks_content_not_formatting() {
        let a = LoadedConfig::parse(MINIMAL, Path::new(".")).unwrap();
        let b = LoadedConfig::parse(&format!("# comment\n{MINIMAL}\n"), Path::new(".")).unwrap();
        let c = LoadedConfig::parse(&format!("seed = 3\n{MINIMAL}"), Path::new(".")).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_ne!(a.hash, c.hash);
        assert_eq!((c.run.model.seed, c.run.train.seed), (3, 3));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err =
            LoadedConfig::parse(&format!("{MINIMAL}\n[train]\nlearning_rat = 1.0\n"), Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        let err = LoadedConfig::parse(&format!("colour = 1\n{MINIMAL}"), Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }

    #[test]
    fn shape_entries_need_one_source() {
        let both =
            "output_dir = \"o\"\n[[shapes]]\nname = \"a\"\nfile = \"a.off\"\nshape = { kind = \"cube\", side = 1.0 }\n";
        assert!(LoadedConfig::parse(both, Path::new(".")).is_err());
        let missing = "output_dir = \"o\"\n[[shapes]]\nname = \"a\"\nfile = \"nowhere.off\"\n";
        assert!(LoadedConfig::parse(missing, Path::new(".")).unwrap_err().to_string().contains("nowhere.off"));
        let bad_name = "output_dir = \"o\"\n[[shapes]]\nname = \"a/b\"\nshape = { kind = \"cube\", side = 1.0 }\n";
        assert!(LoadedConfig::parse(bad_name, Path::new(".")).is_err());
    }
}
