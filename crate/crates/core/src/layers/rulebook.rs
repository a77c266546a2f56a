use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::sparse_grid::{Site, SparseGrid};

/// Input-to-output incidences of a strided `f³` window layer.
///
/// `rules[k]` holds `(input_row, output_row)` pairs for filter offset `k`,
/// where offsets are numbered x-major: `k = (ox * f + oy) * f + oz`.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleBook {
    pub filter_size: usize,
    pub stride: usize,
    pub in_spatial: usize,
    pub out_spatial: usize,
    pub num_samples: usize,
    pub num_inputs: usize,
    pub out_sites: Vec<Site>,
    pub rules: Vec<Vec<(u32, u32)>>,
}

/// `(in - f) / s + 1`, rejecting windows that would leave trailing inputs uncovered.
pub fn output_spatial_size(in_spatial: usize, filter_size: usize, stride: usize) -> Result<usize> {
    if filter_size == 0 || stride == 0 {
        return Err(Error::invalid("filter size and stride must be positive"));
    }
    if filter_size > in_spatial {
        return Err(Error::invalid(format!(
            "filter size {filter_size} exceeds spatial size {in_spatial}"
        )));
    }
    let span = in_spatial - filter_size;
    if span % stride != 0 {
        return Err(Error::invalid(format!(
            "spatial size {in_spatial} with filter {filter_size} and stride {stride} \
             leaves inputs uncovered ({span} not divisible by {stride})"
        )));
    }
    Ok(span / stride + 1)
}

#[inline]
fn key(sample: u32, x: usize, y: usize, z: usize) -> u64 {
    ((sample as u64) << 48) | ((x as u64) << 32) | ((y as u64) << 16) | z as u64
}

impl RuleBook {
    pub fn num_offsets(&self) -> usize {
        self.rules.len()
    }

    pub fn num_outputs(&self) -> usize {
        self.out_sites.len()
    }

    pub fn num_rules(&self) -> usize {
        self.rules.iter().map(Vec::len).sum()
    }

    /// Build from a bare site list. Output rows are created in order of first
    /// encounter while scanning inputs, then offsets, so the output site set
    /// and its order depend only on the input site list.
    pub fn from_sites(
        sites: &[Site],
        in_spatial: usize,
        num_samples: usize,
        filter_size: usize,
        stride: usize,
    ) -> Result<RuleBook> {
        let out_spatial = output_spatial_size(in_spatial, filter_size, stride)?;
        let f = filter_size;
        let n_offsets = f * f * f;
        let mut rules: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n_offsets];
        let mut out_sites = Vec::new();
        let mut lookup: HashMap<u64, u32> = HashMap::with_capacity(sites.len() * 2);

        // candidate window starts along one axis for input coordinate c
        let starts = |c: usize| {
            (0..f).filter_map(move |o| {
                let q = c.checked_sub(o)?;
                (q % stride == 0 && q / stride < out_spatial).then_some((o, q / stride))
            })
        };

        for (row, site) in sites.iter().enumerate() {
            let [x, y, z] = site.coords();
            if x >= in_spatial || y >= in_spatial || z >= in_spatial {
                return Err(Error::OutOfBounds {
                    sample: site.sample,
                    x,
                    y,
                    z,
                    spatial_size: in_spatial,
                });
            }
            for (ox, u) in starts(x) {
                for (oy, v) in starts(y) {
                    for (oz, w) in starts(z) {
                        let next = out_sites.len() as u32;
                        let out_row = *lookup.entry(key(site.sample, u, v, w)).or_insert_with(|| {
                            out_sites.push(Site::new(site.sample, u as u16, v as u16, w as u16));
                            next
                        });
                        rules[(ox * f + oy) * f + oz].push((row as u32, out_row));
                    }
                }
            }
        }

        Ok(RuleBook {
            filter_size,
            stride,
            in_spatial,
            out_spatial,
            num_samples,
            num_inputs: sites.len(),
            out_sites,
            rules,
        })
    }

    pub(crate) fn check_input<T: Real>(&self, input: &SparseGrid<T>) -> Result<()> {
        if input.num_sites() != self.num_inputs || input.spatial_size() != self.in_spatial {
            return Err(Error::invalid(format!(
                "rule book built for {} sites at {}^3, grid has {} sites at {}^3",
                self.num_inputs,
                self.in_spatial,
                input.num_sites(),
                input.spatial_size()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_output_sites(&self, sites: &[Site]) -> Result<()> {
        if sites != self.out_sites.as_slice() {
            return Err(Error::invalid(
                "upstream gradient site set differs from the forward output",
            ));
        }
        Ok(())
    }
}

pub fn build_rulebook<T: Real>(
    input: &SparseGrid<T>,
    filter_size: usize,
    stride: usize,
) -> Result<RuleBook> {
    RuleBook::from_sites(
        input.sites(),
        input.spatial_size(),
        input.num_samples(),
        filter_size,
        stride,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(spatial: usize, coords: &[[u16; 3]]) -> SparseGrid<f64> {
        let mut g = SparseGrid::new(spatial, 1).unwrap();
        for &[x, y, z] in coords {
            g.set_site(Site::new(0, x, y, z), &[1.0]).unwrap();
        }
        g
    }

    #[test]
    fn single_site() {
        let rb = build_rulebook(&grid(2, &[[0, 0, 0]]), 2, 1).unwrap();
        assert_eq!(rb.out_spatial, 1);
        assert_eq!(rb.out_sites, vec![Site::new(0, 0, 0, 0)]);
        assert_eq!(rb.num_rules(), 1);
        assert_eq!(rb.rules[0], vec![(0, 0)]);
    }

    #[test]
    fn dense_cube_pool() {
        let mut coords = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                for z in 0..3 {
                    coords.push([x, y, z]);
                }
            }
        }
        let rb = build_rulebook(&grid(3, &coords), 3, 2).unwrap();
        assert_eq!(rb.out_spatial, 1);
        assert_eq!(rb.num_rules(), 27);
        assert!(rb.rules.iter().all(|r| r.len() == 1));
    }

    #[test]
    fn table_geometry_chain() {
        let mut size = 126;
        let mut chain = vec![size];
        for _ in 0..5 {
            size = output_spatial_size(size, 2, 1).unwrap();
            chain.push(size);
            size = output_spatial_size(size, 3, 2).unwrap();
            chain.push(size);
        }
        chain.push(output_spatial_size(size, 2, 1).unwrap());
        assert_eq!(chain, vec![126, 125, 62, 61, 30, 29, 14, 13, 6, 5, 2, 1]);
    }

    #[test]
    fn geometry_errors() {
        assert!(output_spatial_size(2, 3, 1).is_err());
        assert!(output_spatial_size(124, 3, 2).is_err());
        assert!(output_spatial_size(4, 0, 1).is_err());
        assert!(build_rulebook(&grid(2, &[[0, 0, 0]]), 3, 1).is_err());
    }

    #[test]
    fn boundary_site_feeds_edge_windows() {
        // x = 4 in a 5-wide field with f=3, s=2 lies in windows starting at 2 only
        let rb = build_rulebook(&grid(5, &[[4, 0, 0]]), 3, 2).unwrap();
        assert_eq!(rb.out_sites, vec![Site::new(0, 1, 0, 0)]);
        // x = 2 lies in windows starting at 0 and 2
        let rb = build_rulebook(&grid(5, &[[2, 2, 2]]), 3, 2).unwrap();
        assert_eq!(rb.num_outputs(), 8);
    }
}
