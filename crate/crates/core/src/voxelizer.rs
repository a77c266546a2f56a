//! Surface voxelization of triangle meshes.
//!
//! A voxel is active when its closed cube intersects any triangle of the
//! mesh, decided with the separating-axis test. The mesh is expected in
//! normalized form (see [`TriangleMesh::normalized`]); the unit cube is
//! split into `render_size`³ cells and that block is centered in a
//! `pad_to`³ input field.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mesh::{Point3, TriangleMesh};
use crate::real::Real;
use crate::sparse_grid::{Site, SparseGrid};

/// Input field edge length of the default network.
pub const DEFAULT_PAD: usize = 126;
pub const DEFAULT_MAX_JITTER: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub render_size: usize,
    pub pad_to: usize,
    /// Rotation about the vertical (z) axis through the unit-cube center,
    /// radians. The rotated mesh is refit into the unit cube.
    pub rotation: f64,
    /// Integer voxel offset of the render block, clamped so the block stays in the field.
    pub jitter: [i32; 3],
}

impl RenderConfig {
    pub fn new(render_size: usize, pad_to: usize) -> Result<Self> {
        let cfg = RenderConfig {
            render_size,
            pad_to,
            rotation: 0.0,
            jitter: [0; 3],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.render_size == 0 {
            return Err(Error::invalid("render size must be at least 1"));
        }
        if self.render_size > self.pad_to {
            return Err(Error::invalid(format!(
                "render size {} exceeds field size {}",
                self.render_size, self.pad_to
            )));
        }
        if self.pad_to > u16::MAX as usize {
            return Err(Error::invalid(format!("field size {} too large", self.pad_to)));
        }
        Ok(())
    }

    pub fn with_augmentation(self, aug: &Augmentation) -> Self {
        RenderConfig {
            rotation: aug.rotation,
            jitter: aug.jitter,
            ..self
        }
    }

    /// Per-axis offset of the render block inside the field, jitter included.
    pub fn block_offset(&self) -> [i64; 3] {
        let base = ((self.pad_to - self.render_size) / 2) as i64;
        let max = (self.pad_to - self.render_size) as i64;
        self.jitter.map(|j| (base + j as i64).clamp(0, max))
    }
}

/// Random rotation about z plus integer voxel jitter, drawn from a seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub rotation: f64,
    pub jitter: [i32; 3],
}

impl Augmentation {
    pub fn identity() -> Self {
        Augmentation {
            rotation: 0.0,
            jitter: [0; 3],
        }
    }

    /// Angle uniform in [0, 2π), jitter uniform in [-max_jitter, max_jitter] per axis.
    pub fn sample(seed: u64, max_jitter: i32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rotation = rng.gen_range(0.0..std::f64::consts::TAU);
        let m = max_jitter.max(0);
        let jitter = [
            rng.gen_range(-m..=m),
            rng.gen_range(-m..=m),
            rng.gen_range(-m..=m),
        ];
        Augmentation { rotation, jitter }
    }
}

/// Rotate a normalized mesh about the vertical axis through (0.5, 0.5).
pub fn rotate_about_vertical(mesh: &TriangleMesh, angle: f64) -> TriangleMesh {
    if angle == 0.0 {
        return mesh.clone();
    }
    let (s, c) = angle.sin_cos();
    mesh.map_vertices(|[x, y, z]| {
        let (dx, dy) = (x - 0.5, y - 0.5);
        [0.5 + c * dx - s * dy, 0.5 + s * dx + c * dy, z]
    })
}

/// Mesh-level part of an augmentation: rotate, then refit into the unit
/// cube. The jitter is applied as an exact integer site offset by
/// [`voxelize`] through [`RenderConfig::jitter`].
pub fn augment(mesh: &TriangleMesh, aug: &Augmentation) -> Result<TriangleMesh> {
    if aug.rotation == 0.0 || mesh.vertices.is_empty() {
        return Ok(mesh.clone());
    }
    rotate_about_vertical(mesh, aug.rotation).normalized()
}

#[inline]
fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Separating-axis triangle/box test. Touching counts as overlapping.
pub fn triangle_box_overlap(tri: &[Point3; 3], center: Point3, half: f64) -> bool {
    let v = [sub(tri[0], center), sub(tri[1], center), sub(tri[2], center)];

    // box face normals
    for a in 0..3 {
        let lo = v[0][a].min(v[1][a]).min(v[2][a]);
        let hi = v[0][a].max(v[1][a]).max(v[2][a]);
        if lo > half || hi < -half {
            return false;
        }
    }

    // triangle normal
    let e = [sub(v[1], v[0]), sub(v[2], v[1]), sub(v[0], v[2])];
    let n = cross(e[0], e[1]);
    let radius = half * (n[0].abs() + n[1].abs() + n[2].abs());
    if dot(n, v[0]).abs() > radius {
        return false;
    }

    // edge x box-axis cross products
    for edge in &e {
        for a in 0..3 {
            let mut unit = [0.0; 3];
            unit[a] = 1.0;
            let axis = cross(unit, *edge);
            let p = [dot(axis, v[0]), dot(axis, v[1]), dot(axis, v[2])];
            let radius = half * (axis[0].abs() + axis[1].abs() + axis[2].abs());
            let lo = p[0].min(p[1]).min(p[2]);
            let hi = p[0].max(p[1]).max(p[2]);
            if lo > radius || hi < -radius {
                return false;
            }
        }
    }
    true
}

/// Active voxel coordinates in the field, sorted and unique. Only the r³
/// cells of the render block are candidates, so geometry outside the unit
/// cube is clipped.
pub fn voxel_sites(mesh: &TriangleMesh, cfg: &RenderConfig) -> Result<Vec<[u16; 3]>> {
    cfg.validate()?;
    let rotated = if cfg.rotation == 0.0 {
        std::borrow::Cow::Borrowed(mesh)
    } else {
        std::borrow::Cow::Owned(augment(mesh, &Augmentation { rotation: cfg.rotation, jitter: cfg.jitter })?)
    };
    let r = cfg.render_size as f64;
    let off = cfg.block_offset().map(|o| o as f64);
    let block = cfg.block_offset();
    let last = block.map(|o| o + cfg.render_size as i64 - 1);
    let mut sites = Vec::new();
    for tri in rotated.triangles() {
        let t = tri.map(|p| [p[0] * r + off[0], p[1] * r + off[1], p[2] * r + off[2]]);
        if t.iter().flatten().any(|c| !c.is_finite()) {
            continue;
        }
        let mut lo = [0i64; 3];
        let mut hi = [0i64; 3];
        for a in 0..3 {
            let min = t[0][a].min(t[1][a]).min(t[2][a]);
            let max = t[0][a].max(t[1][a]).max(t[2][a]);
            lo[a] = (min.ceil() as i64 - 1).max(block[a]);
            hi[a] = (max.floor() as i64).min(last[a]);
        }
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    let center = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                    if triangle_box_overlap(&t, center, 0.5) {
                        sites.push([x as u16, y as u16, z as u16]);
                    }
                }
            }
        }
    }
    sites.sort_unstable();
    sites.dedup();
    Ok(sites)
}

/// Voxelize into a single-sample, one-channel grid with feature 1.0 per active voxel.
pub fn voxelize<T: Real>(mesh: &TriangleMesh, cfg: &RenderConfig) -> Result<SparseGrid<T>> {
    let coords = voxel_sites(mesh, cfg)?;
    let sites = coords
        .iter()
        .map(|&[x, y, z]| Site::new(0, x, y, z))
        .collect::<Vec<_>>();
    let features = Array2::from_elem((sites.len(), 1), T::one());
    SparseGrid::from_parts(cfg.pad_to, 1, sites, features)
}
