//! Binary checkpoint format.
//!
//! ```text
//! "S3DC"  u16 version
//! u32 len, spec text (UTF-8)
//! u32 len, metadata JSON
//! u32 blob count, then per blob: u64 value count, f32 LE values
//! u32 CRC32 of every preceding byte
//! ```
//! Blobs hold weight then bias of each parameterized layer in layer order,
//! followed by the matching optimizer velocity buffers when present.
//! All integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{LayerSpec, Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::layers::LinearParams;
use crate::optimizer::SgdConfig;

pub const CHECKPOINT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"S3DC";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Triplet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Last completed epoch (0-based).
    pub epoch: usize,
    /// Optimizer steps taken so far.
    #[serde(default)]
    pub step: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
    pub task: TaskKind,
    pub spec_fingerprint: u64,
    pub has_velocity: bool,
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default)]
    pub best_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub meta: CheckpointMeta,
    pub velocity: Option<Vec<Vec<f32>>>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("checkpoint string is not UTF-8"))
    }

    fn blob(&mut self) -> Result<Vec<f32>> {
        let n = usize::try_from(self.u64()?).map_err(|_| Error::format("blob too large"))?;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format("blob too large"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_blob(out: &mut Vec<u8>, values: &[f32]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn new(network: Network<f32>, meta: CheckpointMeta, velocity: Option<Vec<Vec<f32>>>) -> Self {
        let mut meta = meta;
        meta.spec_fingerprint = network.spec().fingerprint();
        meta.has_velocity = velocity.is_some();
        Checkpoint { network, meta, velocity }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.network.spec().to_text());
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::format(e.to_string()))?;
        put_str(&mut out, &meta);
        let params = self.network.parameter_slices();
        let velocity = self.velocity.as_deref().unwrap_or(&[]);
        if !velocity.is_empty() && velocity.len() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: params.len(),
                actual: velocity.len(),
            });
        }
        out.extend_from_slice(&((params.len() + velocity.len()) as u32).to_le_bytes());
        for p in &params {
            put_blob(&mut out, p);
        }
        for v in velocity {
            put_blob(&mut out, v);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + 4 || &bytes[..4] != MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let spec = NetworkSpec::parse(&r.string()?)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&r.string()?).map_err(|e| Error::format(format!("checkpoint metadata: {e}")))?;
        if meta.spec_fingerprint != spec.fingerprint() {
            return Err(Error::format("stored spec fingerprint does not match spec text"));
        }
        let count = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            blobs.push(r.blob()?);
        }
        if r.pos != body.len() {
            return Err(Error::format("trailing bytes after last blob"));
        }

        let shapes = spec.parameter_shapes()?;
        let n_param = 2 * shapes.len();
        let expected = if meta.has_velocity { 2 * n_param } else { n_param };
        if blobs.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: blobs.len(),
            });
        }
        let velocity = meta.has_velocity.then(|| blobs.split_off(n_param));
        let mut params: Vec<Option<LinearParams<f32>>> = vec![None; spec.layers.len()];
        let mut it = blobs.into_iter();
        for &(layer, c_in, c_out) in &shapes {
            let (w, b) = (it.next().unwrap(), it.next().unwrap());
            let weight = Array2::from_shape_vec((c_in, c_out), w)
                .map_err(|_| Error::format(format!("layer {layer}: weight blob has the wrong length")))?;
            let bias = Array1::from_vec(b);
            let alpha = match spec.layers[layer] {
                LayerSpec::LinearLeakyRelu { alpha, .. } => alpha as f32,
                _ => 0.0,
            };
            params[layer] = Some(LinearParams::new(weight, bias, alpha)?);
        }
        if let Some(v) = &velocity {
            let lens: Vec<usize> = params.iter().flatten().flat_map(|p| [p.weight.len(), p.bias.len()]).collect();
            if v.iter().map(Vec::len).ne(lens.iter().copied()) {
                return Err(Error::format("velocity blobs do not match parameter shapes"));
            }
        }
        let network = Network::from_params(spec, params)?;
        Ok(Checkpoint { network, meta, velocity })
    }

    /// Write via a temporary file and rename, so a crash never leaves a
    /// half-written checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let write = || -> Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)?;
            Ok(())
        };
        write().map_err(|e| e.in_file(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::from_bytes(&bytes).map_err(|e| e.in_file(path))
    }

    /// Load and require the stored architecture to equal `spec`.
    pub fn load_with_spec(path: impl AsRef<Path>, spec: &NetworkSpec) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.network.spec() != spec {
            return Err(Error::SpecMismatch {
                expected: spec.to_text(),
                found: ckpt.network.spec().to_text(),
            });
        }
        Ok(ckpt)
    }
}
