//! Fixtures shared by the benchmarks.

use scatternet::em::IncidentWave;
use scatternet::{generate_shape, GeometryContext, Model, ModelConfig, ShapeSpec, TriangleMesh};

pub fn wave() -> IncidentWave {
    IncidentWave::new(1e9, 1.0, 30.0, 0.0).expect("valid wave")
}

/// Cube of side `side` meshed at λ/8.
pub fn cube(side: f64) -> TriangleMesh {
    generate_shape(&ShapeSpec::Cube { side }, wave().wavelength() / 8.0).expect("cube meshes")
}

pub fn model_config() -> ModelConfig {
    ModelConfig { width: 8, heads: 2, density_hidden: 8, normal_hidden: 4, ..ModelConfig::default() }
}

pub fn model_and_context(mesh: &TriangleMesh) -> (Model, GeometryContext) {
    let config = model_config();
    let ctx = GeometryContext::new(mesh, wave().wavelength(), &config).expect("context builds");
    (Model::new(config).expect("valid config"), ctx)
}
