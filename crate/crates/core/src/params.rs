//! Flat parameter vectors with layer shape metadata, plus the shared binary
//! checkpoint format used for both the generator and the reward models.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::rng::RngStream;

/// Ordered list of `(fan_in, fan_out)` pairs describing a dense network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeSpec {
    layers: Vec<(usize, usize)>,
}

impl ShapeSpec {
    pub fn new(layers: Vec<(usize, usize)>) -> Self {
        assert!(!layers.is_empty(), "a network needs at least one layer");
        for w in layers.windows(2) {
            assert_eq!(
                w[0].1, w[1].0,
                "layer output {} does not feed layer input {}",
                w[0].1, w[1].0
            );
        }
        Self { layers }
    }

    /// Builds the spec for `input -> hidden... -> output`.
    pub fn chain(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        Self::new(dims.windows(2).map(|w| (w[0], w[1])).collect())
    }

    pub fn layers(&self) -> &[(usize, usize)] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].1
    }

    /// Weights + biases: Σ (in + 1) · out.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|&(i, o)| (i + 1) * o).sum()
    }

    /// Offset of layer `l`'s block (weights then biases) in the flat vector.
    pub fn layer_offset(&self, l: usize) -> usize {
        self.layers[..l].iter().map(|&(i, o)| (i + 1) * o).sum()
    }
}

/// Flat f64 parameter storage for one network.
///
/// Layer `l` with shape `(in, out)` occupies a contiguous block: `in · out`
/// weights in output-major order (`w[o * in + i]`) followed by `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    shape: ShapeSpec,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, shape: ShapeSpec) -> Self {
        assert_eq!(
            values.len(),
            shape.param_count(),
            "parameter length does not match shape spec"
        );
        Self { values, shape }
    }

    pub fn zeros(shape: ShapeSpec) -> Self {
        let n = shape.param_count();
        Self {
            values: vec![0.0; n],
            shape,
        }
    }

    /// Scaled uniform init: each layer drawn from ±√(6 / (fan_in + fan_out)),
    /// biases zero.
    pub fn init(shape: ShapeSpec, rng: &mut RngStream) -> Self {
        let mut p = Self::zeros(shape);
        for l in 0..p.shape.num_layers() {
            let (fan_in, fan_out) = p.shape.layers()[l];
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let off = p.shape.layer_offset(l);
            for w in &mut p.values[off..off + fan_in * fan_out] {
                *w = rng.uniform_in(-bound, bound);
            }
        }
        p
    }

    pub fn shape(&self) -> &ShapeSpec {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `(weights, biases)` slices of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (fan_in, fan_out) = self.shape.layers()[l];
        let off = self.shape.layer_offset(l);
        let w_end = off + fan_in * fan_out;
        (&self.values[off..w_end], &self.values[w_end..w_end + fan_out])
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn zeros_like(&self) -> ParamVector {
        ParamVector::zeros(self.shape.clone())
    }

    /// self += scale · other.
    pub fn add_scaled(&mut self, other: &ParamVector, scale: f64) {
        assert_eq!(self.values.len(), other.values.len(), "length mismatch");
        for (a, b) in self.values.iter_mut().zip(other.values.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(32 + self.values.len() * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.shape.num_layers() as u32).to_le_bytes());
        for &(i, o) in self.shape.layers() {
            buf.extend_from_slice(&(i as u32).to_le_bytes());
            buf.extend_from_slice(&(o as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        // Write via a temp file so a crashed run never leaves a torn checkpoint.
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamVector> {
        let mut f = std::fs::File::open(path)?;
        let mut data = Vec::new();
        f.read_to_end(&mut data)?;
        Self::from_bytes(&data)
    }

    pub fn from_bytes(data: &[u8]) -> Result<ParamVector> {
        let mut cur = Cursor { data, pos: 0 };
        let magic = cur.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CoreError::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                &magic[..magic.len().min(8)],
                CHECKPOINT_MAGIC
            )));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CoreError::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let n_layers = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let i = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            let o = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            layers.push((i, o));
        }
        let shape = ShapeSpec::new(layers);
        let count = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        if count != shape.param_count() {
            return Err(CoreError::Checkpoint(format!(
                "payload count {count} does not match shape ({})",
                shape.param_count()
            )));
        }
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        if cur.pos != data.len() {
            return Err(CoreError::Checkpoint(format!(
                "{} trailing bytes after payload",
                data.len() - cur.pos
            )));
        }
        Ok(ParamVector::new(values, shape))
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PFLOWCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(CoreError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}
