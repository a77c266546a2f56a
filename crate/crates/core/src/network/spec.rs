use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{output_spatial_size, DEFAULT_ALPHA};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Input { channels: usize, spatial: usize },
    /// Neighbourhood gather; multiplies channels by `size³`.
    Conv { size: usize, stride: usize },
    LinearLeakyRelu { channels: usize, alpha: f64 },
    MaxPool { size: usize, stride: usize },
    /// Dense affine head over the per-sample embedding, trained with softmax.
    Classifier { classes: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Input { .. } => "input",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::LinearLeakyRelu { .. } => "lrelu",
            LayerSpec::MaxPool { .. } => "pool",
            LayerSpec::Classifier { .. } => "head",
        }
    }

    pub fn has_parameters(&self) -> bool {
        matches!(self, LayerSpec::LinearLeakyRelu { .. } | LayerSpec::Classifier { .. })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Input { channels, spatial } => write!(f, "input {channels} {spatial}"),
            LayerSpec::Conv { size, stride } => write!(f, "conv {size} {stride}"),
            LayerSpec::LinearLeakyRelu { channels, alpha } => write!(f, "lrelu {channels} {alpha}"),
            LayerSpec::MaxPool { size, stride } => write!(f, "pool {size} {stride}"),
            LayerSpec::Classifier { classes } => write!(f, "head {classes}"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let tokens: Vec<&str> = s.split_whitespace().collect();
        let bad = || Error::format(format!("cannot parse layer `{s}`"));
        let int = |i: usize| -> Result<usize> { tokens.get(i).and_then(|t| t.parse().ok()).ok_or_else(bad) };
        let expect_len = |n: usize| if tokens.len() == n { Ok(()) } else { Err(bad()) };
        let layer = match tokens.first().copied() {
            Some("input") => {
                expect_len(3)?;
                LayerSpec::Input { channels: int(1)?, spatial: int(2)? }
            }
            Some("conv") => {
                expect_len(3)?;
                LayerSpec::Conv { size: int(1)?, stride: int(2)? }
            }
            Some("lrelu") => {
                expect_len(3)?;
                let alpha = tokens[2].parse::<f64>().map_err(|_| bad())?;
                LayerSpec::LinearLeakyRelu { channels: int(1)?, alpha }
            }
            Some("pool") => {
                expect_len(3)?;
                LayerSpec::MaxPool { size: int(1)?, stride: int(2)? }
            }
            Some("head") => {
                expect_len(2)?;
                LayerSpec::Classifier { classes: int(1)? }
            }
            _ => return Err(bad()),
        };
        Ok(layer)
    }
}

/// Spatial size and channel count of a layer's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGeometry {
    pub spatial: usize,
    pub channels: usize,
}

/// Ordered layer stack. Layer `i` of the list is layer `i` of the network;
/// layer 0 is always the input.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

/// Per-block projection widths of the default architecture.
pub const DEFAULT_WIDTHS: [usize; 6] = [32, 64, 96, 128, 160, 192];
pub const DEFAULT_INPUT_SPATIAL: usize = 126;
pub const CONV_SIZE: usize = 2;
pub const POOL_SIZE: usize = 3;
pub const POOL_STRIDE: usize = 2;

impl NetworkSpec {
    /// `conv 2/1 -> lrelu(w) -> pool 3/2` for every width but the last, which
    /// ends in `conv 2/1 -> lrelu(w)`.
    pub fn from_blocks(input_spatial: usize, widths: &[usize], classes: Option<usize>) -> Self {
        let mut layers = vec![LayerSpec::Input { channels: 1, spatial: input_spatial }];
        for (i, &w) in widths.iter().enumerate() {
            layers.push(LayerSpec::Conv { size: CONV_SIZE, stride: 1 });
            layers.push(LayerSpec::LinearLeakyRelu { channels: w, alpha: DEFAULT_ALPHA });
            if i + 1 < widths.len() {
                layers.push(LayerSpec::MaxPool { size: POOL_SIZE, stride: POOL_STRIDE });
            }
        }
        if let Some(classes) = classes {
            layers.push(LayerSpec::Classifier { classes });
        }
        NetworkSpec { layers }
    }

    /// The 18-row sparse architecture (input 126³, embedding width 192).
    pub fn default_embedding() -> Self {
        Self::from_blocks(DEFAULT_INPUT_SPATIAL, &DEFAULT_WIDTHS, None)
    }

    /// Default architecture with a dense softmax head.
    pub fn default_classifier(classes: usize) -> Self {
        Self::from_blocks(DEFAULT_INPUT_SPATIAL, &DEFAULT_WIDTHS, Some(classes))
    }

    pub fn with_classifier(&self, classes: usize) -> Self {
        let mut spec = self.without_classifier();
        spec.layers.push(LayerSpec::Classifier { classes });
        spec
    }

    pub fn without_classifier(&self) -> Self {
        NetworkSpec {
            layers: self
                .layers
                .iter()
                .filter(|l| !matches!(l, LayerSpec::Classifier { .. }))
                .cloned()
                .collect(),
        }
    }

    /// Output geometry of every layer, validating the whole stack.
    pub fn geometry(&self) -> Result<Vec<LayerGeometry>> {
        let incompatible = |msg: String| Error::IncompatibleSpec(msg);
        let mut out = Vec::with_capacity(self.layers.len());
        let mut current = match self.layers.first() {
            Some(&LayerSpec::Input { channels, spatial }) if channels > 0 && spatial > 0 => {
                LayerGeometry { spatial, channels }
            }
            _ => return Err(incompatible("layer 0 must be an input with positive size".into())),
        };
        out.push(current);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            current = match *layer {
                LayerSpec::Input { .. } => {
                    return Err(incompatible(format!("layer {i}: input allowed only at layer 0")))
                }
                LayerSpec::Conv { size, stride } | LayerSpec::MaxPool { size, stride } => {
                    let spatial = output_spatial_size(current.spatial, size, stride)
                        .map_err(|e| incompatible(format!("layer {i} ({layer}): {e}")))?;
                    let channels = if let LayerSpec::Conv { .. } = layer {
                        current.channels * size * size * size
                    } else {
                        current.channels
                    };
                    LayerGeometry { spatial, channels }
                }
                LayerSpec::LinearLeakyRelu { channels, alpha } => {
                    if channels == 0 || !alpha.is_finite() {
                        return Err(incompatible(format!("layer {i}: invalid projection {layer}")));
                    }
                    LayerGeometry { spatial: current.spatial, channels }
                }
                LayerSpec::Classifier { classes } => {
                    if i != last {
                        return Err(incompatible(format!("layer {i}: classifier must be the last layer")));
                    }
                    if classes == 0 {
                        return Err(incompatible("classifier needs at least one class".into()));
                    }
                    if current.spatial != 1 {
                        return Err(incompatible(format!(
                            "classifier needs spatial size 1, stack ends at {}",
                            current.spatial
                        )));
                    }
                    LayerGeometry { spatial: 1, channels: classes }
                }
            };
            out.push(current);
        }
        let embed = out[self.embedding_layer()];
        if embed.spatial != 1 {
            return Err(incompatible(format!(
                "stack must reduce the input to spatial size 1, ends at {}",
                embed.spatial
            )));
        }
        Ok(out)
    }

    pub fn input_spatial(&self) -> usize {
        match self.layers.first() {
            Some(LayerSpec::Input { spatial, .. }) => *spatial,
            _ => 0,
        }
    }

    pub fn input_channels(&self) -> usize {
        match self.layers.first() {
            Some(LayerSpec::Input { channels, .. }) => *channels,
            _ => 0,
        }
    }

    /// Index of the last non-classifier layer, whose output is the embedding.
    pub fn embedding_layer(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Classifier { .. }) => self.layers.len() - 2,
            _ => self.layers.len().saturating_sub(1),
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.layers.last() {
            Some(LayerSpec::Classifier { classes }) => Some(*classes),
            _ => None,
        }
    }

    pub fn embedding_dim(&self) -> Result<usize> {
        Ok(self.geometry()?[self.embedding_layer()].channels)
    }

    /// `(c_in, c_out)` of every parameterized layer, in layer order.
    pub fn parameter_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let geo = self.geometry()?;
        Ok(self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_parameters())
            .map(|(i, _)| (i, geo[i - 1].channels, geo[i].channels))
            .collect())
    }

    pub fn num_parameters(&self) -> Result<usize> {
        Ok(self
            .parameter_shapes()?
            .iter()
            .map(|&(_, c_in, c_out)| c_in * c_out + c_out)
            .sum())
    }

    /// Canonical single-line text form, stored in checkpoints.
    pub fn to_text(&self) -> String {
        self.layers
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join("; ")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let layers = text
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<LayerSpec>>>()?;
        if layers.is_empty() {
            return Err(Error::format("empty network spec"));
        }
        Ok(NetworkSpec { layers })
    }

    /// 64-bit FNV-1a of the canonical text.
    pub fn fingerprint(&self) -> u64 {
        self.to_text().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}
