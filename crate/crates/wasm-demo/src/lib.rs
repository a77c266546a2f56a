//! Browser bindings for the static demo page in `www/`.
//!
//! Each exported function has a plain-Rust twin returning `Result<_, String>`
//! so the logic can be tested natively; the `#[wasm_bindgen]` wrappers only
//! convert errors.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

use s3dcnn::retrieval::{evaluate_all, EmbeddingSet, RankBy};
use s3dcnn::synth::ShapeKind;
use s3dcnn::voxelizer::voxel_sites;
use s3dcnn::{Network, NetworkSpec, RenderConfig, SparseGrid, TriangleMesh};

/// Largest render size the page offers; keeps the voxel view responsive.
pub const MAX_RESOLUTION: usize = 64;

fn shape(name: &str) -> Result<TriangleMesh, String> {
    let kind = ShapeKind::from_name(name).ok_or_else(|| format!("unknown shape `{name}`"))?;
    kind.base_mesh().normalized().map_err(|e| e.to_string())
}

fn render(resolution: usize, pad: usize, rotation_deg: f64) -> Result<RenderConfig, String> {
    if resolution > MAX_RESOLUTION {
        return Err(format!("resolution {resolution} exceeds {MAX_RESOLUTION}"));
    }
    let cfg = RenderConfig::new(resolution, pad).map_err(|e| e.to_string())?;
    Ok(RenderConfig {
        rotation: rotation_deg.to_radians(),
        ..cfg
    })
}

/// Active voxels of a synthetic shape as flat `x, y, z` triples inside an
/// `r^3` block.
pub fn voxel_coords(name: &str, resolution: usize, rotation_deg: f64) -> Result<Vec<u16>, String> {
    let mesh = shape(name)?;
    let sites = voxel_sites(&mesh, &render(resolution, resolution, rotation_deg)?).map_err(|e| e.to_string())?;
    Ok(sites.into_iter().flatten().collect())
}

/// Per-layer statistics of the default network on a synthetic shape
/// rendered at `resolution` in the 126^3 field, as a JSON array.
pub fn layer_table(name: &str, resolution: usize, rotation_deg: f64, seed: u32) -> Result<String, String> {
    let spec = NetworkSpec::default_embedding();
    let cfg = render(resolution, spec.input_spatial(), rotation_deg)?;
    let grid: SparseGrid<f32> = s3dcnn::voxelizer::voxelize(&shape(name)?, &cfg).map_err(|e| e.to_string())?;
    let net = Network::<f32>::build(spec, seed as u64).map_err(|e| e.to_string())?;
    let trace = net.forward(&grid).map_err(|e| e.to_string())?;
    let rows: Vec<_> = trace
        .stats()
        .iter()
        .zip(net.geometry())
        .map(|(s, g)| {
            let volume = (s.spatial as f64).powi(3);
            json!({
                "layer": s.layer,
                "kind": s.kind,
                "spatial": s.spatial,
                "channels": g.channels,
                "sites": s.sites,
                "rules": s.rules,
                "density": s.sites as f64 / volume,
            })
        })
        .collect();
    Ok(json!(rows).to_string())
}

/// Retrieval on three synthetic clusters in 16-d. `separation` scales the
/// distance between cluster centers relative to unit noise. Returns mAP,
/// AUC and the 11-point PR curve as JSON.
pub fn cluster_retrieval(separation: f64, per_class: usize, seed: u32) -> Result<String, String> {
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(format!("separation {separation} must be >= 0"));
    }
    if !(2..=200).contains(&per_class) {
        return Err(format!("per-class count {per_class} must lie in 2..=200"));
    }
    const DIM: usize = 16;
    const CLASSES: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let centers: Vec<[f64; DIM]> = (0..CLASSES)
        .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
        .collect();
    let n = CLASSES * per_class;
    let mut vectors = Array2::<f32>::zeros((n, DIM));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % CLASSES;
        for d in 0..DIM {
            // sum of uniforms: cheap, roughly Gaussian noise with unit variance
            let noise: f64 = (0..3).map(|_| rng.gen_range(-1.0..1.0)).sum();
            vectors[[i, d]] = (separation * centers[class][d] + noise) as f32;
        }
        labels.push(format!("c{class}"));
    }
    let set = EmbeddingSet::new((0..n).map(|i| i.to_string()).collect(), labels, vectors).map_err(|e| e.to_string())?;
    let result = evaluate_all(&set, RankBy::Cosine).map_err(|e| e.to_string())?;
    Ok(json!({
        "map": result.map,
        "auc": result.auc,
        "curve": result.pr_curve.to_vec(),
    })
    .to_string())
}

#[wasm_bindgen(js_name = voxelize)]
pub fn voxelize_js(shape: &str, resolution: usize, rotation_deg: f64) -> Result<Vec<u16>, JsError> {
    voxel_coords(shape, resolution, rotation_deg).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = layerTable)]
pub fn layer_table_js(shape: &str, resolution: usize, rotation_deg: f64, seed: u32) -> Result<String, JsError> {
    layer_table(shape, resolution, rotation_deg, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = clusterRetrieval)]
pub fn cluster_retrieval_js(separation: f64, per_class: usize, seed: u32) -> Result<String, JsError> {
    cluster_retrieval(separation, per_class, seed).map_err(|e| JsError::new(&e))
}
