use ndarray::{s, Array2, ArrayView2, Axis};
use ndarray::parallel::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::sparse_grid::SparseGrid;

use super::RuleBook;

/// Concatenate the `f³` neighbourhood of every output site. Offset `k`
/// occupies columns `k*c .. (k+1)*c`; offsets without an active input stay zero.
pub fn gather_rows<T: Real>(input: ArrayView2<'_, T>, rb: &RuleBook) -> Array2<T> {
    let c = input.ncols();
    let mut out = Array2::zeros((rb.num_outputs(), c * rb.num_offsets()));
    // each offset writes a disjoint column block
    out.axis_chunks_iter_mut(Axis(1), c)
        .into_par_iter()
        .zip(rb.rules.par_iter())
        .for_each(|(mut block, rules)| {
            for &(i, j) in rules {
                block.row_mut(j as usize).assign(&input.row(i as usize));
            }
        });
    out
}

/// Transpose of [`gather_rows`]: scatter-add each segment back to its input row.
pub fn gather_backward_rows<T: Real>(grad_out: ArrayView2<'_, T>, rb: &RuleBook, in_channels: usize) -> Array2<T> {
    let mut grad_in = Array2::zeros((rb.num_inputs, in_channels));
    for (k, rules) in rb.rules.iter().enumerate() {
        let cols = k * in_channels..(k + 1) * in_channels;
        for &(i, j) in rules {
            let seg = grad_out.slice(s![j as usize, cols.clone()]);
            grad_in.row_mut(i as usize).zip_mut_with(&seg, |g, &v| *g += v);
        }
    }
    grad_in
}

pub fn conv_gather_forward<T: Real>(input: &SparseGrid<T>, rb: &RuleBook) -> Result<SparseGrid<T>> {
    rb.check_input(input)?;
    let features = gather_rows(input.features(), rb);
    SparseGrid::from_parts(rb.out_spatial, rb.num_samples, rb.out_sites.clone(), features)
}

/// Gradient w.r.t. the gather input, on the input's site set.
pub fn conv_gather_backward<T: Real>(
    grad_out: &SparseGrid<T>,
    rb: &RuleBook,
    input: &SparseGrid<T>,
) -> Result<SparseGrid<T>> {
    rb.check_input(input)?;
    rb.check_output_sites(grad_out.sites())?;
    let expected = input.channels() * rb.num_offsets();
    if grad_out.channels() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: grad_out.channels(),
        });
    }
    input.with_features(gather_backward_rows(grad_out.features(), rb, input.channels()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::build_rulebook;
    use crate::sparse_grid::Site;

    #[test]
    fn single_site_zero_padding() {
        let mut g = SparseGrid::<f64>::new(4, 1).unwrap();
        g.set_site(Site::new(0, 1, 1, 1), &[1.0]).unwrap();
        let rb = build_rulebook(&g, 2, 1).unwrap();
        // (1,1,1) feeds the 8 windows starting at (0|1)^3
        assert_eq!(rb.num_outputs(), 8);
        let out = conv_gather_forward(&g, &rb).unwrap();
        assert_eq!(out.channels(), 8);
        for (row, site) in out.sites().iter().enumerate() {
            let [u, v, w] = site.coords();
            let k = ((1 - u) * 2 + (1 - v)) * 2 + (1 - w);
            for col in 0..8 {
                let expect = if col == k { 1.0 } else { 0.0 };
                assert_eq!(out.features()[[row, col]], expect);
            }
        }
    }

    #[test]
    fn dense_window_flattens_in_offset_order() {
        let mut g = SparseGrid::<f64>::new(2, 1).unwrap();
        for x in 0..2u16 {
            for y in 0..2u16 {
                for z in 0..2u16 {
                    let v = (x * 4 + y * 2 + z) as f64 + 10.0;
                    g.set_site(Site::new(0, x, y, z), &[v]).unwrap();
                }
            }
        }
        let rb = build_rulebook(&g, 2, 1).unwrap();
        let out = conv_gather_forward(&g, &rb).unwrap();
        let row: Vec<f64> = out.features().row(0).to_vec();
        assert_eq!(row, (10..18).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn empty_input() {
        let g = SparseGrid::<f32>::new(5, 3).unwrap();
        let rb = build_rulebook(&g, 2, 1).unwrap();
        let out = conv_gather_forward(&g, &rb).unwrap();
        assert!(out.is_empty());
        assert_eq!(out.channels(), 24);
    }

    #[test]
    fn backward_returns_segment() {
        let mut g = SparseGrid::<f64>::new(2, 1).unwrap();
        g.set_site(Site::new(0, 0, 0, 0), &[1.0]).unwrap();
        let rb = build_rulebook(&g, 2, 1).unwrap();
        let out = conv_gather_forward(&g, &rb).unwrap();
        let upstream = ndarray::Array2::from_shape_vec((1, 8), (1..=8).map(f64::from).collect()).unwrap();
        let grad = conv_gather_backward(&out.with_features(upstream).unwrap(), &rb, &g).unwrap();
        assert_eq!(grad.features()[[0, 0]], 1.0);
        assert_eq!(grad.sites(), g.sites());
    }

    #[test]
    fn mismatched_rulebook_rejected() {
        let mut g = SparseGrid::<f64>::new(3, 1).unwrap();
        g.set_site(Site::new(0, 0, 0, 0), &[1.0]).unwrap();
        let rb = build_rulebook(&g, 2, 1).unwrap();
        g.set_site(Site::new(0, 1, 0, 0), &[1.0]).unwrap();
        assert!(conv_gather_forward(&g, &rb).is_err());
    }
}
