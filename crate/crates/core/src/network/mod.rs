//! Layer-stack assembly, batched forward/backward and checkpoints.

mod checkpoint;
mod spec;

pub use checkpoint::{Checkpoint, CheckpointMeta, TaskKind, CHECKPOINT_VERSION};
pub use spec::{
    LayerGeometry, LayerSpec, NetworkSpec, CONV_SIZE, DEFAULT_INPUT_SPATIAL, DEFAULT_WIDTHS, POOL_SIZE,
    POOL_STRIDE,
};

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    gather_backward_rows, gather_rows, linear_backward_rows, linear_forward_rows, maxpool_backward_rows,
    maxpool_rows, LinearCache, LinearGrads, LinearParams, PoolCache, RuleBook,
};
use crate::real::Real;
use crate::sparse_grid::{Site, SparseGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    spec: NetworkSpec,
    geometry: Vec<LayerGeometry>,
    /// Indexed by layer; `Some` for projection and classifier layers.
    params: Vec<Option<LinearParams<T>>>,
}

#[derive(Debug)]
enum LayerCache<T> {
    Input,
    Conv { rulebook: RuleBook, in_channels: usize },
    Linear { input: Array2<T>, cache: LinearCache<T> },
    Pool { cache: PoolCache, num_inputs: usize },
}

/// Per-layer site and rule counts of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerStats {
    pub layer: usize,
    pub kind: &'static str,
    pub spatial: usize,
    pub sites: usize,
    pub rules: usize,
}

/// Cached forward pass, consumed by [`Network::backward_embeddings`] and
/// [`Network::backward_logits`].
#[derive(Debug)]
pub struct Trace<T> {
    caches: Vec<LayerCache<T>>,
    stats: Vec<LayerStats>,
    /// Final-layer row of each sample, `None` for samples without active input.
    sample_rows: Vec<Option<usize>>,
    embeddings: Array2<T>,
    head: Option<(Array2<T>, LinearCache<T>)>,
    fingerprint: u64,
}

impl<T: Real> Trace<T> {
    /// `num_samples x embedding_dim`; samples without active sites are zero rows.
    pub fn embeddings(&self) -> ArrayView2<'_, T> {
        self.embeddings.view()
    }

    pub fn logits(&self) -> Option<ArrayView2<'_, T>> {
        self.head.as_ref().map(|(l, _)| l.view())
    }

    pub fn stats(&self) -> &[LayerStats] {
        &self.stats
    }

    pub fn total_rules(&self) -> usize {
        self.stats.iter().map(|s| s.rules).sum()
    }

    pub fn empty_samples(&self) -> Vec<usize> {
        self.sample_rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.is_none().then_some(i))
            .collect()
    }
}

/// Parameter gradients, aligned with the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Option<LinearGrads<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Weight then bias of every parameterized layer, in layer order.
    pub fn slices(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|g| {
                [
                    g.weight.as_slice().expect("standard layout"),
                    g.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn max_abs(&self) -> T {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl<T: Real> Network<T> {
    /// Validate the spec and initialize every projection from `seed`.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let geometry = spec.geometry()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| match *layer {
                LayerSpec::LinearLeakyRelu { channels, alpha } => Some(LinearParams::init(
                    geometry[i - 1].channels,
                    channels,
                    alpha,
                    &mut rng,
                )),
                LayerSpec::Classifier { classes } => {
                    Some(LinearParams::init(geometry[i - 1].channels, classes, 0.0, &mut rng))
                }
                _ => None,
            })
            .collect();
        Ok(Network { spec, geometry, params })
    }

    pub(crate) fn from_params(spec: NetworkSpec, params: Vec<Option<LinearParams<T>>>) -> Result<Self> {
        let geometry = spec.geometry()?;
        if params.len() != spec.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: spec.layers.len(),
                actual: params.len(),
            });
        }
        for (i, (layer, p)) in spec.layers.iter().zip(&params).enumerate() {
            match (layer.has_parameters(), p) {
                (true, Some(p)) => {
                    if p.weight.dim() != (geometry[i - 1].channels, geometry[i].channels) {
                        return Err(Error::format(format!(
                            "layer {i}: weight shape {:?} does not match spec",
                            p.weight.dim()
                        )));
                    }
                }
                (false, None) => {}
                _ => return Err(Error::format(format!("layer {i}: parameter presence mismatch"))),
            }
        }
        Ok(Network { spec, geometry, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn geometry(&self) -> &[LayerGeometry] {
        &self.geometry
    }

    pub fn embedding_dim(&self) -> usize {
        self.geometry[self.spec.embedding_layer()].channels
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().flatten().map(|p| p.num_parameters()).sum()
    }

    pub fn layer_params(&self, layer: usize) -> Option<&LinearParams<T>> {
        self.params.get(layer).and_then(Option::as_ref)
    }

    pub fn layer_params_mut(&mut self, layer: usize) -> Option<&mut LinearParams<T>> {
        self.params.get_mut(layer).and_then(Option::as_mut)
    }

    pub fn parameter_lengths(&self) -> Vec<usize> {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| [p.weight.len(), p.bias.len()])
            .collect()
    }

    /// Weight then bias of every parameterized layer, in layer order.
    pub fn parameter_slices(&self) -> Vec<&[T]> {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| {
                [
                    p.weight.as_slice().expect("standard layout"),
                    p.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn parameter_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.params
            .iter_mut()
            .flatten()
            .flat_map(|p| {
                [
                    p.weight.as_slice_mut().expect("standard layout"),
                    p.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    /// Same network with parameters converted to another element type.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let conv = |v: T| U::from_f64_lossy(v.to_f64_lossy());
        Network {
            spec: self.spec.clone(),
            geometry: self.geometry.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| LinearParams {
                        weight: p.weight.mapv(conv),
                        bias: p.bias.mapv(conv),
                        alpha: conv(p.alpha),
                    })
                })
                .collect(),
        }
    }

    fn check_input(&self, batch: &SparseGrid<T>) -> Result<()> {
        let (spatial, channels) = (self.spec.input_spatial(), self.spec.input_channels());
        if batch.spatial_size() != spatial || batch.channels() != channels {
            return Err(Error::invalid(format!(
                "network expects {spatial}^3 x {channels} input, got {}^3 x {}",
                batch.spatial_size(),
                batch.channels()
            )));
        }
        Ok(())
    }

    /// Run layers `1..=last`, optionally recording caches for backward.
    fn run(
        &self,
        batch: &SparseGrid<T>,
        last: usize,
        record: bool,
    ) -> Result<(Vec<Site>, usize, Array2<T>, Vec<LayerCache<T>>, Vec<LayerStats>)> {
        self.check_input(batch)?;
        let num_samples = batch.num_samples();
        let mut sites: Vec<Site> = batch.sites().to_vec();
        let mut spatial = batch.spatial_size();
        let mut x = batch.features().to_owned();
        let mut caches = Vec::with_capacity(last + 1);
        let mut stats = Vec::with_capacity(last + 1);
        if record {
            caches.push(LayerCache::Input);
        }
        stats.push(LayerStats {
            layer: 0,
            kind: "input",
            spatial,
            sites: sites.len(),
            rules: 0,
        });
        for (i, layer) in self.spec.layers.iter().enumerate().take(last + 1).skip(1) {
            let mut rules = 0;
            match *layer {
                LayerSpec::Conv { size, stride } => {
                    let rb = RuleBook::from_sites(&sites, spatial, num_samples, size, stride)?;
                    let in_channels = x.ncols();
                    x = gather_rows(x.view(), &rb);
                    sites = rb.out_sites.clone();
                    spatial = rb.out_spatial;
                    rules = rb.num_rules();
                    if record {
                        caches.push(LayerCache::Conv { rulebook: rb, in_channels });
                    }
                }
                LayerSpec::MaxPool { size, stride } => {
                    let rb = RuleBook::from_sites(&sites, spatial, num_samples, size, stride)?;
                    let num_inputs = x.nrows();
                    let (y, cache) = maxpool_rows(x.view(), &rb);
                    x = y;
                    sites = rb.out_sites.clone();
                    spatial = rb.out_spatial;
                    rules = rb.num_rules();
                    if record {
                        caches.push(LayerCache::Pool { cache, num_inputs });
                    }
                }
                LayerSpec::LinearLeakyRelu { .. } => {
                    let p = self.params[i].as_ref().expect("projection has parameters");
                    let (y, cache) = linear_forward_rows(x.view(), p, true)?;
                    let input = std::mem::replace(&mut x, y);
                    if record {
                        caches.push(LayerCache::Linear { input, cache });
                    }
                }
                LayerSpec::Input { .. } | LayerSpec::Classifier { .. } => {
                    return Err(Error::IncompatibleSpec(format!("layer {i} cannot run on a sparse grid")))
                }
            }
            stats.push(LayerStats {
                layer: i,
                kind: layer.kind(),
                spatial,
                sites: sites.len(),
                rules,
            });
        }
        Ok((sites, spatial, x, caches, stats))
    }

    fn scatter_embeddings(&self, sites: &[Site], x: &Array2<T>, num_samples: usize) -> (Array2<T>, Vec<Option<usize>>) {
        let mut emb = Array2::zeros((num_samples, x.ncols()));
        let mut rows = vec![None; num_samples];
        for (row, site) in sites.iter().enumerate() {
            let s = site.sample as usize;
            emb.row_mut(s).assign(&x.row(row));
            rows[s] = Some(row);
        }
        (emb, rows)
    }

    /// Activation grid after layer `layer` (0 = the input itself). The
    /// classifier head is dense and has no sparse activation.
    pub fn layer_activations(&self, batch: &SparseGrid<T>, layer: usize) -> Result<SparseGrid<T>> {
        if layer > self.spec.embedding_layer() {
            return Err(Error::invalid(format!(
                "layer index {layer} out of range 0..={}",
                self.spec.embedding_layer()
            )));
        }
        let (sites, spatial, x, _, _) = self.run(batch, layer, false)?;
        SparseGrid::from_parts(spatial, batch.num_samples(), sites, x)
    }

    /// Per-sample embedding (`num_samples x embedding_dim`), zero for samples
    /// without active input.
    pub fn embed(&self, batch: &SparseGrid<T>) -> Result<Array2<T>> {
        let (sites, _, x, _, _) = self.run(batch, self.spec.embedding_layer(), false)?;
        let (emb, rows) = self.scatter_embeddings(&sites, &x, batch.num_samples());
        if rows.iter().any(Option::is_none) {
            log::warn!("{} sample(s) without active voxels embed to zero", rows.iter().filter(|r| r.is_none()).count());
        }
        Ok(emb)
    }

    /// Classifier logits (`num_samples x classes`).
    pub fn logits(&self, batch: &SparseGrid<T>) -> Result<Array2<T>> {
        let head = self.head()?;
        let emb = self.embed(batch)?;
        Ok(linear_forward_rows(emb.view(), head, false)?.0)
    }

    fn head(&self) -> Result<&LinearParams<T>> {
        self.params
            .last()
            .and_then(Option::as_ref)
            .filter(|_| self.spec.num_classes().is_some())
            .ok_or_else(|| Error::IncompatibleSpec("network has no classifier head".into()))
    }

    /// Forward pass recording everything the backward pass needs.
    pub fn forward(&self, batch: &SparseGrid<T>) -> Result<Trace<T>> {
        let (sites, _, x, caches, stats) = self.run(batch, self.spec.embedding_layer(), true)?;
        let (embeddings, sample_rows) = self.scatter_embeddings(&sites, &x, batch.num_samples());
        let head = match self.spec.num_classes() {
            Some(_) => {
                let (logits, cache) = linear_forward_rows(embeddings.view(), self.head()?, false)?;
                Some((logits, cache))
            }
            None => None,
        };
        Ok(Trace {
            caches,
            stats,
            sample_rows,
            embeddings,
            head,
            fingerprint: self.spec.fingerprint(),
        })
    }

    fn zero_grads(&self) -> Gradients<T> {
        Gradients {
            layers: self
                .params
                .iter()
                .map(|p| p.as_ref().map(LinearGrads::zeros_like))
                .collect(),
        }
    }

    fn check_trace(&self, trace: &Trace<T>) -> Result<()> {
        if trace.fingerprint != self.spec.fingerprint() || trace.caches.len() != self.spec.embedding_layer() + 1 {
            return Err(Error::invalid("trace was not produced by this network"));
        }
        Ok(())
    }

    /// Backpropagate a gradient on the classifier logits.
    pub fn backward_logits(&self, trace: &Trace<T>, grad_logits: ArrayView2<'_, T>) -> Result<Gradients<T>> {
        self.check_trace(trace)?;
        let head = self.head()?;
        let (_, cache) = trace
            .head
            .as_ref()
            .ok_or_else(|| Error::invalid("trace has no classifier output"))?;
        let mut grads = self.zero_grads();
        let last = self.params.len() - 1;
        let head_grads = grads.layers[last].as_mut().expect("head has parameters");
        let g_emb = linear_backward_rows(trace.embeddings.view(), grad_logits, head, cache, false, head_grads)?;
        self.backward_into(trace, g_emb.view(), grads)
    }

    /// Backpropagate a gradient on the per-sample embeddings.
    pub fn backward_embeddings(&self, trace: &Trace<T>, grad_embeddings: ArrayView2<'_, T>) -> Result<Gradients<T>> {
        self.check_trace(trace)?;
        self.backward_into(trace, grad_embeddings, self.zero_grads())
    }

    fn backward_into(&self, trace: &Trace<T>, g_emb: ArrayView2<'_, T>, mut grads: Gradients<T>) -> Result<Gradients<T>> {
        if g_emb.dim() != trace.embeddings.dim() {
            return Err(Error::invalid(format!(
                "embedding gradient shape {:?} does not match {:?}",
                g_emb.dim(),
                trace.embeddings.dim()
            )));
        }
        let n_rows = trace.sample_rows.iter().flatten().count();
        let mut g = Array2::zeros((n_rows, g_emb.ncols()));
        for (sample, row) in trace.sample_rows.iter().enumerate() {
            if let Some(row) = row {
                g.row_mut(*row).assign(&g_emb.row(sample));
            }
        }
        for i in (1..trace.caches.len()).rev() {
            g = match &trace.caches[i] {
                LayerCache::Linear { input, cache } => {
                    let p = self.params[i].as_ref().expect("projection has parameters");
                    let lg = grads.layers[i].as_mut().expect("projection has gradients");
                    linear_backward_rows(input.view(), g.view(), p, cache, true, lg)?
                }
                // the input gradient of layer 1 is never needed
                _ if i == 1 => break,
                LayerCache::Conv { rulebook, in_channels } => gather_backward_rows(g.view(), rulebook, *in_channels),
                LayerCache::Pool { cache, num_inputs, .. } => maxpool_backward_rows(g.view(), cache, *num_inputs),
                LayerCache::Input => unreachable!("input cache only at index 0"),
            };
        }
        Ok(grads)
    }
}
