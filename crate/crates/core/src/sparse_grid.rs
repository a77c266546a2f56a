//! Sparse voxel tensors.
//!
//! A [`SparseGrid`] stores only active sites and one feature row per site.
//! Inactive sites are implicitly the zero vector. Several samples can share
//! one grid (minibatch packing); each [`Site`] carries its sample index.

use std::collections::HashMap;
use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::real::Real;

/// Largest edge length representable in the 16-bit coordinate fields.
pub const MAX_SPATIAL_SIZE: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub sample: u32,
    pub x: u16,
    pub y: u16,
    pub z: u16,
}

impl Site {
    pub fn new(sample: u32, x: u16, y: u16, z: u16) -> Self {
        Site { sample, x, y, z }
    }

    #[inline]
    pub fn coords(&self) -> [usize; 3] {
        [self.x as usize, self.y as usize, self.z as usize]
    }
}

#[derive(Debug, Clone)]
pub struct SparseGrid<T = f32> {
    spatial_size: usize,
    channels: usize,
    num_samples: usize,
    sites: Vec<Site>,
    index: HashMap<Site, usize>,
    features: Array2<T>,
}

impl<T: Real> SparseGrid<T> {
    /// Empty grid holding one (empty) sample.
    pub fn new(spatial_size: usize, channels: usize) -> Result<Self> {
        if spatial_size == 0 || spatial_size > MAX_SPATIAL_SIZE {
            return Err(Error::invalid(format!(
                "spatial size must be in 1..={MAX_SPATIAL_SIZE}, got {spatial_size}"
            )));
        }
        if channels == 0 {
            return Err(Error::invalid("channel count must be at least 1"));
        }
        Ok(SparseGrid {
            spatial_size,
            channels,
            num_samples: 1,
            sites: Vec::new(),
            index: HashMap::new(),
            features: Array2::zeros((0, channels)),
        })
    }

    /// Assemble a grid from already-consistent parts. Sites must be unique
    /// and in bounds, and `features` must have one row per site.
    pub fn from_parts(
        spatial_size: usize,
        num_samples: usize,
        sites: Vec<Site>,
        features: Array2<T>,
    ) -> Result<Self> {
        if features.nrows() != sites.len() {
            return Err(Error::DimensionMismatch {
                expected: sites.len(),
                actual: features.nrows(),
            });
        }
        let channels = features.ncols();
        let mut grid = SparseGrid::new(spatial_size, channels.max(1))?;
        if channels == 0 {
            return Err(Error::invalid("channel count must be at least 1"));
        }
        grid.num_samples = num_samples;
        let mut index = HashMap::with_capacity(sites.len());
        for (row, site) in sites.iter().enumerate() {
            grid.check_bounds(site)?;
            if site.sample as usize >= num_samples {
                return Err(Error::invalid(format!(
                    "site sample index {} >= sample count {num_samples}",
                    site.sample
                )));
            }
            if index.insert(*site, row).is_some() {
                return Err(Error::invalid(format!("duplicate site {site:?}")));
            }
        }
        grid.sites = sites;
        grid.index = index;
        grid.features = features;
        Ok(grid)
    }

    fn check_bounds(&self, site: &Site) -> Result<()> {
        let [x, y, z] = site.coords();
        if x >= self.spatial_size || y >= self.spatial_size || z >= self.spatial_size {
            return Err(Error::OutOfBounds {
                sample: site.sample,
                x,
                y,
                z,
                spatial_size: self.spatial_size,
            });
        }
        Ok(())
    }

    /// Activate `site` with `feature`, overwriting any previous value.
    pub fn set_site(&mut self, site: Site, feature: &[T]) -> Result<()> {
        self.check_bounds(&site)?;
        if feature.len() != self.channels {
            return Err(Error::DimensionMismatch {
                expected: self.channels,
                actual: feature.len(),
            });
        }
        match self.index.get(&site) {
            Some(&row) => {
                self.features
                    .row_mut(row)
                    .iter_mut()
                    .zip(feature)
                    .for_each(|(dst, &src)| *dst = src);
            }
            None => {
                self.features
                    .push_row(ArrayView1::from(feature))
                    .expect("feature row width matches channel count");
                self.index.insert(site, self.sites.len());
                self.sites.push(site);
                self.num_samples = self.num_samples.max(site.sample as usize + 1);
            }
        }
        Ok(())
    }

    /// Feature of `site`, or `None` when the site is inactive.
    pub fn get(&self, site: &Site) -> Option<ArrayView1<'_, T>> {
        self.index.get(site).map(|&row| self.features.row(row))
    }

    pub fn row_of(&self, site: &Site) -> Option<usize> {
        self.index.get(site).copied()
    }

    pub fn spatial_size(&self) -> usize {
        self.spatial_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn features(&self) -> ArrayView2<'_, T> {
        self.features.view()
    }

    pub fn into_features(self) -> Array2<T> {
        self.features
    }

    /// Declare the number of samples the grid covers (trailing samples may be empty).
    pub fn set_num_samples(&mut self, num_samples: usize) -> Result<()> {
        let needed = self.sites.iter().map(|s| s.sample as usize + 1).max().unwrap_or(0);
        if num_samples < needed.max(1) {
            return Err(Error::invalid(format!(
                "sample count {num_samples} below the highest sample index in use ({needed})"
            )));
        }
        self.num_samples = num_samples;
        Ok(())
    }

    /// Active sites divided by `num_samples * per_sample_volume`.
    pub fn sparsity(&self, per_sample_volume: usize) -> Result<f64> {
        if per_sample_volume == 0 {
            return Err(Error::invalid("per-sample volume must be positive"));
        }
        Ok(self.sites.len() as f64 / (self.num_samples as f64 * per_sample_volume as f64))
    }

    /// Number of active sites for each sample index.
    pub fn sites_per_sample(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_samples];
        for s in &self.sites {
            counts[s.sample as usize] += 1;
        }
        counts
    }

    /// Copy of the grid with every feature cast to another element type.
    pub fn cast<U: Real>(&self) -> SparseGrid<U> {
        SparseGrid {
            spatial_size: self.spatial_size,
            channels: self.channels,
            num_samples: self.num_samples,
            sites: self.sites.clone(),
            index: self.index.clone(),
            features: self.features.mapv(|v| U::from_f64_lossy(v.to_f64_lossy())),
        }
    }

    /// Copy of the grid with the same site set and new features.
    pub fn with_features(&self, features: Array2<T>) -> Result<Self> {
        if features.nrows() != self.sites.len() {
            return Err(Error::DimensionMismatch {
                expected: self.sites.len(),
                actual: features.nrows(),
            });
        }
        if features.ncols() == 0 {
            return Err(Error::invalid("channel count must be at least 1"));
        }
        Ok(SparseGrid {
            spatial_size: self.spatial_size,
            channels: features.ncols(),
            num_samples: self.num_samples,
            sites: self.sites.clone(),
            index: self.index.clone(),
            features,
        })
    }

    /// Extract one sample as a standalone single-sample grid.
    pub fn sample(&self, sample: usize) -> SparseGrid<T> {
        let rows: Vec<usize> = (0..self.sites.len())
            .filter(|&r| self.sites[r].sample as usize == sample)
            .collect();
        let sites = rows
            .iter()
            .map(|&r| Site { sample: 0, ..self.sites[r] })
            .collect();
        let features = self.features.select(Axis(0), &rows);
        SparseGrid::from_parts(self.spatial_size, 1, sites, features)
            .expect("subset of a valid grid is valid")
    }
}

/// Pack single-sample grids into one batch grid; grid `i` becomes sample `i`.
pub fn merge_batch<T: Real>(grids: &[SparseGrid<T>]) -> Result<SparseGrid<T>> {
    let first = grids
        .first()
        .ok_or_else(|| Error::invalid("cannot merge an empty list of grids"))?;
    let (spatial, channels) = (first.spatial_size, first.channels);
    let total: usize = grids.iter().map(|g| g.num_sites()).sum();
    let mut sites = Vec::with_capacity(total);
    let mut features = Array2::zeros((total, channels));
    let mut row = 0;
    for (i, g) in grids.iter().enumerate() {
        if g.spatial_size != spatial || g.channels != channels {
            return Err(Error::invalid(format!(
                "grid {i} has geometry {}^3 x {} but batch expects {spatial}^3 x {channels}",
                g.spatial_size, g.channels
            )));
        }
        let sample = u32::try_from(i).map_err(|_| Error::invalid("too many grids in batch"))?;
        sites.extend(g.sites.iter().map(|s| Site { sample, ..*s }));
        features
            .slice_mut(ndarray::s![row..row + g.num_sites(), ..])
            .assign(&g.features);
        row += g.num_sites();
    }
    SparseGrid::from_parts(spatial, grids.len(), sites, features)
}

const SVOX_MAGIC: &[u8; 4] = b"SVOX";
const SVOX_VERSION: u8 = 1;

/// Serialize a grid in the `.svox` layout. With `geometry_only` the channel
/// count is written as 0 and feature payloads are omitted.
pub fn write_svox<T: Real, W: Write>(grid: &SparseGrid<T>, geometry_only: bool, mut w: W) -> Result<()> {
    let channels = if geometry_only { 0 } else { grid.channels };
    w.write_all(SVOX_MAGIC)?;
    w.write_all(&[SVOX_VERSION])?;
    w.write_all(&(grid.spatial_size as u32).to_le_bytes())?;
    w.write_all(&(channels as u32).to_le_bytes())?;
    w.write_all(&(grid.sites.len() as u32).to_le_bytes())?;
    let mut record = Vec::with_capacity(10 + 4 * channels);
    for (row, site) in grid.sites.iter().enumerate() {
        record.clear();
        record.extend_from_slice(&site.sample.to_le_bytes());
        record.extend_from_slice(&site.x.to_le_bytes());
        record.extend_from_slice(&site.y.to_le_bytes());
        record.extend_from_slice(&site.z.to_le_bytes());
        if !geometry_only {
            for v in grid.features.row(row) {
                record.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
            }
        }
        w.write_all(&record)?;
    }
    Ok(())
}

pub fn svox_bytes<T: Real>(grid: &SparseGrid<T>, geometry_only: bool) -> Vec<u8> {
    let mut buf = Vec::new();
    write_svox(grid, geometry_only, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

/// Parse a `.svox` stream. Geometry-only files load with one channel of 1.0.
pub fn read_svox<T: Real, R: Read>(mut r: R) -> Result<SparseGrid<T>> {
    let mut header = [0u8; 17];
    r.read_exact(&mut header)
        .map_err(|_| Error::format("svox header truncated"))?;
    if &header[0..4] != SVOX_MAGIC {
        return Err(Error::format("bad svox magic"));
    }
    if header[4] != SVOX_VERSION {
        return Err(Error::format(format!("unsupported svox version {}", header[4])));
    }
    let u32_at = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
    let spatial = u32_at(5);
    let channels = u32_at(9);
    let count = u32_at(13);
    let stored = channels.max(1);
    let mut sites = Vec::with_capacity(count);
    let mut features = Array2::from_elem((count, stored), T::one());
    let mut record = vec![0u8; 10 + 4 * channels];
    let mut num_samples = 1;
    for row in 0..count {
        r.read_exact(&mut record)
            .map_err(|_| Error::format(format!("svox truncated at record {row} of {count}")))?;
        let sample = u32::from_le_bytes(record[0..4].try_into().unwrap());
        let c = |i: usize| u16::from_le_bytes(record[i..i + 2].try_into().unwrap());
        sites.push(Site::new(sample, c(4), c(6), c(8)));
        num_samples = num_samples.max(sample as usize + 1);
        for ch in 0..channels {
            let o = 10 + 4 * ch;
            let v = f32::from_le_bytes(record[o..o + 4].try_into().unwrap());
            features[[row, ch]] = T::from_f32_exact(v);
        }
    }
    SparseGrid::from_parts(spatial, num_samples, sites, features)
}
