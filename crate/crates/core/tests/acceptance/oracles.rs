//! Reference implementations that share no code with the library.

/// Dense `S^3 x C` grid of one sample with an explicit activity mask.
#[derive(Clone, Debug)]
pub struct Dense {
    pub s: usize,
    pub c: usize,
    pub active: Vec<bool>,
    pub values: Vec<f64>,
}

impl Dense {
    pub fn new(s: usize, c: usize) -> Self {
        Dense {
            s,
            c,
            active: vec![false; s * s * s],
            values: vec![0.0; s * s * s * c],
        }
    }

    pub fn cell(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.s + y) * self.s + z
    }

    pub fn at(&self, cell: usize) -> &[f64] {
        &self.values[cell * self.c..(cell + 1) * self.c]
    }

    /// Size-`f` stride-1 window concatenation, offsets ordered x, y, z.
    pub fn conv_gather(&self, f: usize) -> Dense {
        let so = self.s - f + 1;
        let mut out = Dense::new(so, self.c * f * f * f);
        for x in 0..so {
            for y in 0..so {
                for z in 0..so {
                    let o = out.cell(x, y, z);
                    for ox in 0..f {
                        for oy in 0..f {
                            for oz in 0..f {
                                let i = self.cell(x + ox, y + oy, z + oz);
                                if !self.active[i] {
                                    continue;
                                }
                                out.active[o] = true;
                                let k = (ox * f + oy) * f + oz;
                                for ch in 0..self.c {
                                    out.values[o * out.c + k * self.c + ch] = self.values[i * self.c + ch];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Max over the active cells of each window; inactive outputs stay zero.
    pub fn max_pool(&self, f: usize, stride: usize) -> Dense {
        let so = (self.s - f) / stride + 1;
        let mut out = Dense::new(so, self.c);
        for x in 0..so {
            for y in 0..so {
                for z in 0..so {
                    let o = out.cell(x, y, z);
                    let mut best = vec![f64::NEG_INFINITY; self.c];
                    for ox in 0..f {
                        for oy in 0..f {
                            for oz in 0..f {
                                let i = self.cell(stride * x + ox, stride * y + oy, stride * z + oz);
                                if self.active[i] {
                                    out.active[o] = true;
                                    for ch in 0..self.c {
                                        best[ch] = best[ch].max(self.values[i * self.c + ch]);
                                    }
                                }
                            }
                        }
                    }
                    if out.active[o] {
                        out.values[o * self.c..(o + 1) * self.c].copy_from_slice(&best);
                    }
                }
            }
        }
        out
    }

    /// `lrelu(x W + b)` on active cells; `w` is `c_in x c_out` row-major.
    pub fn linear_lrelu(&self, w: &[f64], b: &[f64], alpha: f64) -> Dense {
        let c_out = b.len();
        let mut out = Dense::new(self.s, c_out);
        for cell in 0..self.active.len() {
            if !self.active[cell] {
                continue;
            }
            out.active[cell] = true;
            for j in 0..c_out {
                let mut t = b[j];
                for i in 0..self.c {
                    t += self.values[cell * self.c + i] * w[i * c_out + j];
                }
                out.values[cell * c_out + j] = if t >= 0.0 { t } else { alpha * t };
            }
        }
        out
    }
}

/// 13-axis separating test by projecting all triangle vertices and all 8
/// box corners; closed intervals, so touching counts as overlap.
pub fn sat_corner_projection(tri: &[[f64; 3]; 3], lo: [f64; 3], hi: [f64; 3]) -> bool {
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    };
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let edges = [sub(tri[1], tri[0]), sub(tri[2], tri[1]), sub(tri[0], tri[2])];
    let units = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut axes = units.to_vec();
    axes.push(cross(edges[0], edges[1]));
    for e in edges {
        for u in units {
            axes.push(cross(e, u));
        }
    }
    let mut corners = Vec::with_capacity(8);
    for i in 0..8 {
        corners.push([
            if i & 1 == 0 { lo[0] } else { hi[0] },
            if i & 2 == 0 { lo[1] } else { hi[1] },
            if i & 4 == 0 { lo[2] } else { hi[2] },
        ]);
    }
    for axis in axes {
        if axis == [0.0; 3] {
            continue;
        }
        let t: Vec<f64> = tri.iter().map(|&p| dot(p, axis)).collect();
        let b: Vec<f64> = corners.iter().map(|&p| dot(p, axis)).collect();
        let (tmin, tmax) = (t.iter().copied().fold(f64::INFINITY, f64::min), t.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let (bmin, bmax) = (b.iter().copied().fold(f64::INFINITY, f64::min), b.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        if tmax < bmin || bmax < tmin {
            return false;
        }
    }
    true
}

/// Every cell of the `r^3` block (in block coordinates) touched by a triangle
/// given in unit-cube coordinates.
pub fn brute_force_voxels(triangles: &[[[f64; 3]; 3]], r: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for x in 0..r {
        for y in 0..r {
            for z in 0..r {
                let lo = [x as f64, y as f64, z as f64];
                let hi = [x as f64 + 1.0, y as f64 + 1.0, z as f64 + 1.0];
                let hit = triangles.iter().any(|t| {
                    let scaled = t.map(|p| p.map(|c| c * r as f64));
                    sat_corner_projection(&scaled, lo, hi)
                });
                if hit {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Brute-force retrieval metrics straight from the definitions.
pub struct BruteMetrics {
    pub aps: Vec<Option<f64>>,
    pub map: f64,
    pub curve: [f64; 11],
    pub auc: f64,
}

pub fn brute_metrics(vectors: &[Vec<f64>], labels: &[usize]) -> BruteMetrics {
    let n = vectors.len();
    let unit: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut aps = Vec::new();
    let mut curves = Vec::new();
    for q in 0..n {
        let mut cands: Vec<(f64, usize)> = (0..n)
            .filter(|&i| i != q)
            .map(|i| (1.0 - unit[q].iter().zip(&unit[i]).map(|(a, b)| a * b).sum::<f64>(), i))
            .collect();
        // insertion sort: stable, ties stay in index order
        for a in 1..cands.len() {
            let mut b = a;
            while b > 0 && cands[b - 1].0 > cands[b].0 {
                cands.swap(b - 1, b);
                b -= 1;
            }
        }
        let rel: Vec<bool> = cands.iter().map(|&(_, i)| labels[i] == labels[q]).collect();
        let total = rel.iter().filter(|&&r| r).count();
        if total == 0 {
            aps.push(None);
            continue;
        }
        let precision_at = |k: usize| rel[..k].iter().filter(|&&r| r).count() as f64 / k as f64;
        let recall_at = |k: usize| rel[..k].iter().filter(|&&r| r).count() as f64 / total as f64;
        let ap = (1..=rel.len()).filter(|&k| rel[k - 1]).map(precision_at).sum::<f64>() / total as f64;
        aps.push(Some(ap));
        let mut curve = [0.0; 11];
        for (level, slot) in curve.iter_mut().enumerate() {
            let r = level as f64 / 10.0;
            *slot = (1..=rel.len())
                .filter(|&k| recall_at(k) + 1e-12 >= r)
                .map(precision_at)
                .fold(0.0, f64::max);
        }
        curves.push(curve);
    }
    let kept: Vec<f64> = aps.iter().flatten().copied().collect();
    let map = kept.iter().sum::<f64>() / kept.len() as f64;
    let mut curve = [0.0; 11];
    for c in &curves {
        for l in 0..11 {
            curve[l] += c[l];
        }
    }
    for v in curve.iter_mut() {
        *v /= curves.len() as f64;
    }
    let auc = (0..10).map(|l| (curve[l] + curve[l + 1]) / 2.0 * 0.1).sum();
    BruteMetrics { aps, map, curve, auc }
}

/// Relative disagreement between analytic and numeric gradients, with an
/// absolute floor for entries that are numerically zero.
pub fn rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}
