use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::sparse_grid::SparseGrid;

use super::RuleBook;

/// Winning input row per (output row, channel).
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub argmax: Array2<u32>,
}

/// Channel-wise max over the active inputs of each window. Inactive sites
/// take no part, so an all-negative window yields its largest negative value.
/// Ties keep the first input in offset order.
pub fn maxpool_rows<T: Real>(input: ArrayView2<'_, T>, rb: &RuleBook) -> (Array2<T>, PoolCache) {
    let c = input.ncols();
    let mut out = Array2::from_elem((rb.num_outputs(), c), T::neg_infinity());
    let mut argmax = Array2::from_elem((rb.num_outputs(), c), u32::MAX);
    for rules in &rb.rules {
        for &(i, j) in rules {
            let src = input.row(i as usize);
            let mut dst = out.row_mut(j as usize);
            let mut arg = argmax.row_mut(j as usize);
            for ch in 0..c {
                if src[ch] > dst[ch] || arg[ch] == u32::MAX {
                    dst[ch] = src[ch];
                    arg[ch] = i;
                }
            }
        }
    }
    (out, PoolCache { argmax })
}

pub fn maxpool_backward_rows<T: Real>(grad_out: ArrayView2<'_, T>, cache: &PoolCache, num_inputs: usize) -> Array2<T> {
    let c = grad_out.ncols();
    let mut grad_in = Array2::zeros((num_inputs, c));
    for (j, row) in grad_out.rows().into_iter().enumerate() {
        for ch in 0..c {
            let i = cache.argmax[[j, ch]] as usize;
            grad_in[[i, ch]] += row[ch];
        }
    }
    grad_in
}

pub fn maxpool_forward<T: Real>(input: &SparseGrid<T>, rb: &RuleBook) -> Result<(SparseGrid<T>, PoolCache)> {
    rb.check_input(input)?;
    let (features, cache) = maxpool_rows(input.features(), rb);
    let grid = SparseGrid::from_parts(rb.out_spatial, rb.num_samples, rb.out_sites.clone(), features)?;
    Ok((grid, cache))
}

pub fn maxpool_backward<T: Real>(
    grad_out: &SparseGrid<T>,
    rb: &RuleBook,
    cache: &PoolCache,
    input: &SparseGrid<T>,
) -> Result<SparseGrid<T>> {
    rb.check_input(input)?;
    rb.check_output_sites(grad_out.sites())?;
    if grad_out.channels() != input.channels() {
        return Err(Error::DimensionMismatch {
            expected: input.channels(),
            actual: grad_out.channels(),
        });
    }
    input.with_features(maxpool_backward_rows(grad_out.features(), cache, input.num_sites()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::build_rulebook;
    use crate::sparse_grid::Site;

    fn grid(entries: &[([u16; 3], &[f64])]) -> SparseGrid<f64> {
        let mut g = SparseGrid::new(3, entries[0].1.len()).unwrap();
        for (c, f) in entries {
            g.set_site(Site::new(0, c[0], c[1], c[2]), f).unwrap();
        }
        g
    }

    #[test]
    fn single_active_site_passes_through() {
        let g = grid(&[([1, 2, 0], &[4.0, -1.5])]);
        let rb = build_rulebook(&g, 3, 2).unwrap();
        let (out, _) = maxpool_forward(&g, &rb).unwrap();
        assert_eq!(out.num_sites(), 1);
        assert_eq!(out.features().row(0).to_vec(), vec![4.0, -1.5]);
    }

    #[test]
    fn channel_wise_max() {
        let g = grid(&[([0, 0, 0], &[1.0, -2.0]), ([2, 2, 2], &[0.0, 5.0])]);
        let rb = build_rulebook(&g, 3, 2).unwrap();
        let (out, _) = maxpool_forward(&g, &rb).unwrap();
        assert_eq!(out.features().row(0).to_vec(), vec![1.0, 5.0]);
    }

    #[test]
    fn all_negative_window_ignores_inactive_sites() {
        let g = grid(&[([0, 0, 0], &[-3.0]), ([1, 0, 0], &[-1.0])]);
        let rb = build_rulebook(&g, 3, 2).unwrap();
        let (out, _) = maxpool_forward(&g, &rb).unwrap();
        assert_eq!(out.features()[[0, 0]], -1.0);
    }

    #[test]
    fn gradient_routes_to_argmax() {
        let g = grid(&[([0, 0, 0], &[1.0]), ([1, 1, 1], &[0.0])]);
        let rb = build_rulebook(&g, 3, 2).unwrap();
        let (out, cache) = maxpool_forward(&g, &rb).unwrap();
        let upstream = out.with_features(ndarray::array![[1.0]]).unwrap();
        let grad = maxpool_backward(&upstream, &rb, &cache, &g).unwrap();
        assert_eq!(grad.features().column(0).to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn backward_rejects_foreign_site_set() {
        let g = grid(&[([0, 0, 0], &[1.0])]);
        let rb = build_rulebook(&g, 3, 2).unwrap();
        let (_, cache) = maxpool_forward(&g, &rb).unwrap();
        let mut other = SparseGrid::<f64>::new(1, 1).unwrap();
        other.set_site(Site::new(1, 0, 0, 0), &[1.0]).unwrap();
        assert!(maxpool_backward(&other, &rb, &cache, &g).is_err());
    }
}
