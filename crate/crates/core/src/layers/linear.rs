use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::sparse_grid::SparseGrid;

/// Leaky ReLU negative slope used throughout the default architecture.
pub const DEFAULT_ALPHA: f64 = 0.33;

#[inline]
pub fn leaky_relu<T: Real>(t: T, alpha: T) -> T {
    if t >= T::zero() {
        t
    } else {
        alpha * t
    }
}

/// Per-site projection `y = LReLU(W^T x + b)`; `weight` is `c_in x c_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub alpha: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> LinearGrads<T> {
    pub fn zeros_like(p: &LinearParams<T>) -> Self {
        LinearGrads {
            weight: Array2::zeros(p.weight.raw_dim()),
            bias: Array1::zeros(p.bias.raw_dim()),
        }
    }
}

/// Pre-activation values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LinearCache<T> {
    pub pre_activation: Array2<T>,
}

impl<T: Real> LinearParams<T> {
    pub fn new(weight: Array2<T>, bias: Array1<T>, alpha: T) -> Result<Self> {
        if bias.len() != weight.ncols() {
            return Err(Error::DimensionMismatch {
                expected: weight.ncols(),
                actual: bias.len(),
            });
        }
        Ok(LinearParams { weight, bias, alpha })
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)), zero bias.
    pub fn init<R: Rng>(c_in: usize, c_out: usize, alpha: f64, rng: &mut R) -> Self {
        let limit = (6.0 / (c_in + c_out) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((c_in, c_out), || {
            T::from_f64_lossy(rng.gen_range(-limit..=limit))
        });
        LinearParams {
            weight,
            bias: Array1::zeros(c_out),
            alpha: T::from_f64_lossy(alpha),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.ncols()
    }

    pub fn num_parameters(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Returns (activations, cache). With `activate == false` the layer is purely affine.
pub fn linear_forward_rows<T: Real>(
    x: ArrayView2<'_, T>,
    p: &LinearParams<T>,
    activate: bool,
) -> Result<(Array2<T>, LinearCache<T>)> {
    if x.ncols() != p.in_channels() {
        return Err(Error::DimensionMismatch {
            expected: p.in_channels(),
            actual: x.ncols(),
        });
    }
    let mut pre = x.dot(&p.weight);
    pre += &p.bias;
    let y = if activate {
        pre.mapv(|t| leaky_relu(t, p.alpha))
    } else {
        pre.clone()
    };
    Ok((y, LinearCache { pre_activation: pre }))
}

/// Accumulates parameter gradients into `grads` and returns the input gradient.
pub fn linear_backward_rows<T: Real>(
    x: ArrayView2<'_, T>,
    grad_out: ArrayView2<'_, T>,
    p: &LinearParams<T>,
    cache: &LinearCache<T>,
    activate: bool,
    grads: &mut LinearGrads<T>,
) -> Result<Array2<T>> {
    if grad_out.dim() != cache.pre_activation.dim() || x.nrows() != grad_out.nrows() {
        return Err(Error::invalid(format!(
            "upstream gradient shape {:?} does not match forward output {:?}",
            grad_out.dim(),
            cache.pre_activation.dim()
        )));
    }
    let g_pre = if activate {
        let mut g = grad_out.to_owned();
        // derivative at exactly 0 is taken as 1
        Zip::from(&mut g)
            .and(&cache.pre_activation)
            .for_each(|g, &t| {
                if t < T::zero() {
                    *g *= p.alpha;
                }
            });
        g
    } else {
        grad_out.to_owned()
    };
    grads.weight += &x.t().dot(&g_pre);
    grads.bias += &g_pre.sum_axis(Axis(0));
    Ok(g_pre.dot(&p.weight.t()))
}

pub fn linear_leakyrelu_forward<T: Real>(
    input: &SparseGrid<T>,
    p: &LinearParams<T>,
) -> Result<(SparseGrid<T>, LinearCache<T>)> {
    let (y, cache) = linear_forward_rows(input.features(), p, true)?;
    Ok((input.with_features(y)?, cache))
}

/// Returns (input gradient grid, parameter gradients).
pub fn linear_leakyrelu_backward<T: Real>(
    input: &SparseGrid<T>,
    grad_out: &SparseGrid<T>,
    p: &LinearParams<T>,
    cache: &LinearCache<T>,
) -> Result<(SparseGrid<T>, LinearGrads<T>)> {
    if grad_out.sites() != input.sites() {
        return Err(Error::invalid(
            "upstream gradient site set differs from the forward output",
        ));
    }
    let mut grads = LinearGrads::zeros_like(p);
    let gx = linear_backward_rows(input.features(), grad_out.features(), p, cache, true, &mut grads)?;
    Ok((input.with_features(gx)?, grads))
}
