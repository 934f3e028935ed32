use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{generate_shape, ShapeSpec};
use crate::nn::{check_gradients, GradCheck};

fn small_config() -> ModelConfig {
    ModelConfig { levels: 2, width: 4, heads: 2, density_hidden: 3, normal_hidden: 3, ..ModelConfig::default() }
}

/// Bent 4×4-vertex sheet: 18 faces with varying normals.
fn tent() -> TriangleMesh {
    let mut vertices = Vec::new();
    for i in 0..4 {
        for j in 0..4 {
            let (x, y) = (i as f64 * 0.1, j as f64 * 0.1);
            vertices.push(Vec3::new(x, y, 0.05 * (x * 20.0).sin() + 0.03 * y * y * 30.0));
        }
    }
    let mut faces = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            let a = i * 4 + j;
            faces.push([a, a + 4, a + 5]);
            faces.push([a, a + 5, a + 1]);
        }
    }
    TriangleMesh::new(vertices, faces).unwrap()
}

fn wave(theta: f64, phi: f64) -> IncidentWave {
    IncidentWave::new(1e9, 1.0, theta, phi).unwrap()
}

fn run(model: &Model, ctx: &GeometryContext, features: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let t = model.forward(&mut tape, ctx, x, false).unwrap();
    tape.value(t.output).clone()
}

fn cube_setup(config: &ModelConfig) -> (GeometryContext, Model) {
    let mesh = generate_shape(&ShapeSpec::Cube { side: 0.3 }, 0.1).unwrap();
    let ctx = GeometryContext::new(&mesh, 0.3, config).unwrap();
    (ctx, Model::new(config.clone()).unwrap())
}

#[test]
fn output_is_tangential_and_shaped() {
    let config = ModelConfig { width: 8, ..small_config() };
    let (ctx, model) = cube_setup(&config);
    assert_eq!(ctx.depth(), 2);
    let field = model.predict(&ctx, &wave(40.0, 10.0)).unwrap();
    assert_eq!(field.len(), ctx.mesh.face_count());
    let scale = field.magnitudes().into_iter().fold(0.0, f64::max);
    assert!(scale > 0.0);
    for (j, n) in field.currents().iter().zip(ctx.mesh.normals()) {
        let nc = n.map(|x| crate::em::C64::new(x, 0.0));
        assert!(j.dot(&nc).norm() <= 1e-15 * scale);
    }
}

#[test]
fn config_validation() {
    assert!(Model::new(ModelConfig { width: 6, heads: 4, ..ModelConfig::default() }).is_err());
    assert!(Model::new(ModelConfig { levels: 0, ..ModelConfig::default() }).is_err());
    let parsed: Result<ModelConfig, _> = serde_json::from_str(r#"{"width": 8, "bogus": 1}"#);
    assert!(parsed.is_err());
    let (ctx, _) = cube_setup(&small_config());
    let one_level = Model::new(ModelConfig { levels: 1, ..small_config() }).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(ctx.features(&wave(0.0, 0.0), false));
    assert!(matches!(one_level.forward(&mut tape, &ctx, x, false), Err(ModelError::Inconsistent(_))));
}

#[test]
fn flat_plate_normal_attention_is_uniform() {
    let config = small_config();
    let mesh = generate_shape(&ShapeSpec::Plate { width: 0.4, depth: 0.4 }, 0.1).unwrap();
    let ctx = GeometryContext::new(&mesh, 0.3, &config).unwrap();
    let model = Model::new(config).unwrap();
    let g = &ctx.tensors[0];
    assert!(g.normal_delta.data().iter().all(|v| *v == 0.0));
    let mut tape = Tape::new();
    let dn = tape.constant(g.normal_delta.clone());
    let logits = model.blocks[0].normal.forward(&mut tape, &model.store, dn).unwrap();
    let alpha = tape.segment_softmax(logits, g.attention.clone()).unwrap();
    let a = tape.value(alpha);
    for i in 0..g.node_count() {
        let seg = g.attention.segment(i);
        let expect = 1.0 / seg.len() as f64;
        for e in seg {
            assert!((a.data()[e] - expect).abs() < 1e-15);
        }
    }
}

#[test]
fn constant_density_gives_constant_scaling() {
    let model = Model::new(small_config()).unwrap();
    let mut tape = Tape::new();
    let d = tape.constant(Tensor::filled(9, 1, 1.0));
    let s = model.blocks[1].density.forward(&mut tape, &model.store, d).unwrap();
    let v = tape.value(s).data();
    assert!(v.iter().all(|x| *x == v[0]));
}

#[test]
fn zero_inputs_give_constant_features_on_complete_graph() {
    // One level whose graph is complete: every node has the same degree.
    let config = ModelConfig { levels: 1, width: 4, heads: 2, ..ModelConfig::default() };
    let mesh = tent();
    let ctx = GeometryContext::new(&mesh, 10.0, &config).unwrap();
    assert!(ctx.hierarchy.levels[0].near.iter().all(|nb| nb.len() == mesh.face_count() - 1));
    let model = Model::new(config.clone()).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(mesh.face_count(), config.input_features()));
    let trace = model.forward(&mut tape, &ctx, x, false).unwrap();
    let f = tape.value(trace.far[0]);
    for r in 1..f.rows() {
        for c in 0..f.cols() {
            assert!((f.get(r, c) - f.get(0, c)).abs() < 1e-14);
        }
    }
    let silent = IncidentWave::new(1e9, 0.0, 30.0, 0.0).unwrap();
    let feats = ctx.features(&silent, false);
    assert!((0..feats.rows()).all(|r| feats.row(r)[..6].iter().all(|v| *v == 0.0)));
}

#[test]
fn permutation_equivariance() {
    let config = small_config();
    let mesh = generate_shape(&ShapeSpec::Cone { radius: 0.12, height: 0.25 }, 0.08).unwrap();
    let ctx = GeometryContext::new(&mesh, 0.3, &config).unwrap();
    let model = Model::new(config.clone()).unwrap();
    let n = mesh.face_count();
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for i in (1..n).rev() {
        order.swap(i, r.gen_range(0..=i));
    }
    let permuted_mesh = mesh.permuted_faces(&order).unwrap();
    let permuted_h = ctx.hierarchy.permuted_base(&order).unwrap();
    let pctx = GeometryContext::with_hierarchy(&permuted_mesh, permuted_h, &config).unwrap();
    let w = wave(70.0, 200.0);
    let out = run(&model, &ctx, &ctx.features(&w, false));
    let pout = run(&model, &pctx, &pctx.features(&w, false));
    let scale = out.norm();
    for (new, &old) in order.iter().enumerate() {
        for c in 0..6 {
            assert!((pout.get(new, c) - out.get(old, c)).abs() <= 1e-10 * scale);
        }
    }
}

#[test]
fn rotation_leaves_frame_relative_inputs_unchanged() {
    let config = small_config();
    let mesh = generate_shape(&ShapeSpec::Cube { side: 0.3 }, 0.1).unwrap();
    // 90° about z, exact entries.
    let rot = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let rmesh = mesh.rotated(&rot);
    let ctx = GeometryContext::new(&mesh, 0.3, &config).unwrap();
    // The octree grid is axis-aligned, so the rotated body reuses the same partition.
    let rctx = GeometryContext::with_hierarchy(&rmesh, ctx.hierarchy.clone(), &config).unwrap();
    let (w, rw) = (wave(60.0, 30.0), wave(60.0, 120.0));
    let f = ctx.features(&w, false);
    let rf = rctx.features(&rw, false);
    for r in 0..f.rows() {
        let (a, b) = (f.row(r), rf.row(r));
        for block in [0, 3, 6, 11, 14] {
            let v = rot.transpose() * Vec3::new(b[block], b[block + 1], b[block + 2]);
            for k in 0..3 {
                assert!((v[k] - a[block + k]).abs() < 1e-12, "row {r} block {block}");
            }
        }
        assert!((a[9] - b[9]).abs() < 1e-12 && (a[10] - b[10]).abs() < 1e-12);
    }
    for l in 0..ctx.depth() {
        for (e, re) in ctx.graphs[l].edges.iter().zip(&rctx.graphs[l].edges) {
            assert!((e.weight - re.weight).abs() < 1e-12);
        }
    }
}

#[test]
fn edge_ablation_matches_unit_weights_bitwise() {
    let full = small_config();
    let ablated = ModelConfig { edge_constraint: false, ..full.clone() };
    let (ctx, _) = cube_setup(&full);
    let unit = ctx.with_unit_edge_weights().unwrap();
    let feats = ctx.features(&wave(20.0, 0.0), false);
    let a = run(&Model::new(ablated).unwrap(), &ctx, &feats);
    let b = run(&Model::new(full.clone()).unwrap(), &unit, &feats);
    let c = run(&Model::new(full).unwrap(), &ctx, &feats);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn skip_ablation_removes_near_addition() {
    let full = small_config();
    let (ctx, model) = cube_setup(&full);
    let no_skip = Model { config: ModelConfig { skip_connections: false, ..full }, ..model.clone() };
    let feats = ctx.features(&wave(100.0, 45.0), false);
    let zeroed = {
        let mut tape = Tape::new();
        let x = tape.constant(feats.clone());
        let t = model.forward_inner(&mut tape, &ctx, x, false, true).unwrap();
        tape.value(t.output).clone()
    };
    assert_eq!(run(&no_skip, &ctx, &feats), zeroed);
    assert_ne!(run(&model, &ctx, &feats), zeroed);
}

#[test]
fn both_kv_sources_run() {
    let (ctx, sum) = cube_setup(&small_config());
    let expanded = Model { config: ModelConfig { kv_source: KvSource::Expanded, ..small_config() }, ..sum.clone() };
    let feats = ctx.features(&wave(45.0, 0.0), false);
    let a = run(&sum, &ctx, &feats);
    let b = run(&expanded, &ctx, &feats);
    assert!(a.is_finite() && b.is_finite());
    assert_ne!(a, b);
}

#[test]
fn single_point_level_attends_to_itself() {
    let config = ModelConfig { levels: 4, ..small_config() };
    let (ctx, model) = {
        let mesh = generate_shape(&ShapeSpec::Cube { side: 0.3 }, 0.1).unwrap();
        (GeometryContext::new(&mesh, 0.3, &config).unwrap(), Model::new(config.clone()).unwrap())
    };
    let top = ctx.depth() - 1;
    assert_eq!(ctx.hierarchy.levels[top].len(), 1);
    let mut tape = Tape::new();
    let x = tape.constant(ctx.features(&wave(10.0, 0.0), false));
    let trace = model.forward(&mut tape, &ctx, x, true).unwrap();
    let (_, weights) =
        model.blocks[top].attention.forward(&mut tape, &model.store, trace.near[top], trace.near[top]).unwrap();
    assert!(weights.iter().all(|w| tape.value(*w).data() == [1.0]));
    assert_eq!(tape.value(trace.far[top]).rows(), 1);
}

#[test]
fn checkpoint_round_trip_and_determinism() {
    let model = Model::new(small_config()).unwrap();
    let mut buf = Vec::new();
    model.save(&mut buf).unwrap();
    let loaded = Model::load(buf.as_slice()).unwrap();
    assert_eq!(loaded.store, model.store);
    assert_eq!(loaded.config, model.config);
    assert_eq!(Model::new(small_config()).unwrap().store, model.store);
}

pub(crate) fn full_forward_gradcheck() -> Vec<GradCheck> {
    let config = small_config();
    let mesh = tent();
    let ctx = GeometryContext::new(&mesh, 0.4, &config).unwrap();
    assert_eq!(ctx.depth(), 2);
    assert!(ctx.point_count() <= 30);
    let mut model = Model::new(config.clone()).unwrap();
    let feats = ctx.features(&wave(30.0, 60.0), false);
    let r = Tensor::matrix(mesh.face_count(), 6, {
        let mut g = ChaCha8Rng::seed_from_u64(3);
        (0..mesh.face_count() * 6).map(|_| g.gen_range(-1.0..1.0)).collect()
    })
    .unwrap();
    let mut store = std::mem::take(&mut model.store);
    let report = check_gradients(&mut store, &[feats], 6, 1e-6, |tape, store, v| {
        let m = Model { store: store.clone(), ..model.clone() };
        let t = m.forward(tape, &ctx, v[0], true).map_err(|e| crate::nn::NnError::Config(e.to_string()))?;
        let scaled = tape.scale(t.output, FREE_SPACE_IMPEDANCE);
        let rc = tape.constant(r.clone());
        let p = tape.mul(scaled, rc)?;
        Ok(tape.sum(p))
    })
    .unwrap();
    model.store = store;
    report
}

#[test]
fn full_forward_gradient_check() {
    for c in full_forward_gradcheck() {
        assert!(c.relative_error < 1e-4, "{}: {:.3e}", c.name, c.relative_error);
    }
}
