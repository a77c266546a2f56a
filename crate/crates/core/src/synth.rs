//! Procedural meshes and small synthetic corpora in the ModelNet layout.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::mesh::TriangleMesh;

/// Surface of the unit cube [0,1]³ as 12 triangles.
pub fn cube() -> TriangleMesh {
    let mut vertices = Vec::with_capacity(8);
    for x in 0..2 {
        for y in 0..2 {
            for z in 0..2 {
                vertices.push([x as f64, y as f64, z as f64]);
            }
        }
    }
    let idx = |x: u32, y: u32, z: u32| x * 4 + y * 2 + z;
    let quads = [
        [idx(0, 0, 0), idx(0, 1, 0), idx(0, 1, 1), idx(0, 0, 1)],
        [idx(1, 0, 0), idx(1, 0, 1), idx(1, 1, 1), idx(1, 1, 0)],
        [idx(0, 0, 0), idx(0, 0, 1), idx(1, 0, 1), idx(1, 0, 0)],
        [idx(0, 1, 0), idx(1, 1, 0), idx(1, 1, 1), idx(0, 1, 1)],
        [idx(0, 0, 0), idx(1, 0, 0), idx(1, 1, 0), idx(0, 1, 0)],
        [idx(0, 0, 1), idx(0, 1, 1), idx(1, 1, 1), idx(1, 0, 1)],
    ];
    let faces = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    TriangleMesh { vertices, faces }
}

/// Latitude/longitude sphere of radius 0.5 centered at (0.5, 0.5, 0.5).
pub fn uv_sphere(stacks: usize, slices: usize) -> TriangleMesh {
    let stacks = stacks.max(2);
    let slices = slices.max(3);
    let mut vertices = vec![[0.5, 0.5, 1.0]];
    for i in 1..stacks {
        let theta = PI * i as f64 / stacks as f64;
        for j in 0..slices {
            let phi = TAU * j as f64 / slices as f64;
            vertices.push([
                0.5 + 0.5 * theta.sin() * phi.cos(),
                0.5 + 0.5 * theta.sin() * phi.sin(),
                0.5 + 0.5 * theta.cos(),
            ]);
        }
    }
    vertices.push([0.5, 0.5, 0.0]);
    let south = (vertices.len() - 1) as u32;
    let ring = |i: usize, j: usize| (1 + (i - 1) * slices + j % slices) as u32;
    let mut faces = Vec::new();
    for j in 0..slices {
        faces.push([0, ring(1, j), ring(1, j + 1)]);
        faces.push([south, ring(stacks - 1, j + 1), ring(stacks - 1, j)]);
    }
    for i in 1..stacks - 1 {
        for j in 0..slices {
            let (a, b) = (ring(i, j), ring(i, j + 1));
            let (c, d) = (ring(i + 1, j), ring(i + 1, j + 1));
            faces.push([a, c, d]);
            faces.push([a, d, b]);
        }
    }
    TriangleMesh { vertices, faces }
}

/// Square pyramid with its base on z = 0 and apex at (0.5, 0.5, 1).
pub fn pyramid() -> TriangleMesh {
    let vertices = vec![
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [1.0, 1.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.5, 0.5, 1.0],
    ];
    let faces = vec![
        [0, 2, 1],
        [0, 3, 2],
        [0, 1, 4],
        [1, 2, 4],
        [2, 3, 4],
        [3, 0, 4],
    ];
    TriangleMesh { vertices, faces }
}

/// Torus around the vertical axis, normalized into the unit cube.
pub fn torus(major: f64, minor: f64, rings: usize, sides: usize) -> TriangleMesh {
    let mut vertices = Vec::with_capacity(rings * sides);
    for i in 0..rings {
        let u = TAU * i as f64 / rings as f64;
        for j in 0..sides {
            let v = TAU * j as f64 / sides as f64;
            let r = major + minor * v.cos();
            vertices.push([r * u.cos(), r * u.sin(), minor * v.sin()]);
        }
    }
    let id = |i: usize, j: usize| ((i % rings) * sides + j % sides) as u32;
    let mut faces = Vec::with_capacity(2 * rings * sides);
    for i in 0..rings {
        for j in 0..sides {
            faces.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            faces.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    TriangleMesh { vertices, faces }
        .normalized()
        .expect("torus has vertices")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Pyramid,
    Torus,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Pyramid => "pyramid",
            ShapeKind::Torus => "torus",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "sphere" => Some(ShapeKind::Sphere),
            "cube" => Some(ShapeKind::Cube),
            "pyramid" => Some(ShapeKind::Pyramid),
            "torus" => Some(ShapeKind::Torus),
            _ => None,
        }
    }

    pub fn base_mesh(self) -> TriangleMesh {
        match self {
            ShapeKind::Sphere => uv_sphere(12, 24),
            ShapeKind::Cube => cube(),
            ShapeKind::Pyramid => pyramid(),
            ShapeKind::Torus => torus(0.35, 0.15, 32, 16),
        }
    }
}

/// A randomly stretched and turned instance of `kind`, so samples of one
/// class differ after normalization.
pub fn random_instance<R: Rng>(kind: ShapeKind, rng: &mut R) -> TriangleMesh {
    let scale = [
        rng.gen_range(0.6..1.0),
        rng.gen_range(0.6..1.0),
        rng.gen_range(0.6..1.0),
    ];
    let yaw: f64 = rng.gen_range(0.0..TAU);
    let tilt: f64 = rng.gen_range(-0.3..0.3);
    let (sy, cy) = yaw.sin_cos();
    let (st, ct) = tilt.sin_cos();
    kind.base_mesh().map_vertices(|v| {
        let p = [
            (v[0] - 0.5) * scale[0],
            (v[1] - 0.5) * scale[1],
            (v[2] - 0.5) * scale[2],
        ];
        // tilt about x, then yaw about z
        let q = [p[0], ct * p[1] - st * p[2], st * p[1] + ct * p[2]];
        [cy * q[0] - sy * q[1], sy * q[0] + cy * q[1], q[2]]
    })
}

/// Write a corpus `<root>/<kind>/{train,test}/<kind>_NNNN.off`.
pub fn write_corpus(
    root: &Path,
    kinds: &[ShapeKind],
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &kind in kinds {
        for (split, count) in [("train", train_per_class), ("test", test_per_class)] {
            let dir = root.join(kind.name()).join(split);
            fs::create_dir_all(&dir)?;
            for i in 0..count {
                let mesh = random_instance(kind, &mut rng);
                fs::write(dir.join(format!("{}_{split}_{i:04}.off", kind.name())), mesh.to_off())?;
            }
        }
    }
    Ok(())
}
