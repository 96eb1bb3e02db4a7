//! Flat, named parameter storage shared by every layer, plus gradients and
//! the binary checkpoint container.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CocaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Trainable tensors plus non-trainable buffers (batch-norm running stats).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    pub tensors: Vec<Tensor>,
    pub buffers: Vec<Tensor>,
}

impl ModelParams {
    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].data
    }

    #[inline]
    pub fn buffer(&self, id: BufferId) -> &[f64] {
        &self.buffers[id.0].data
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut [f64] {
        &mut self.buffers[id.0].data
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .chain(self.buffers.iter())
            .find(|t| t.name == name)
    }

    /// Scalar `k` of the parameters flattened in tensor order.
    pub fn flat_index(&self, mut k: usize) -> (usize, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            if k < t.data.len() {
                return (i, k);
            }
            k -= t.data.len();
        }
        panic!("flat index out of range");
    }

    /// SHA-256 over all tensors and buffers, in order.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in self.tensors.iter().chain(self.buffers.iter()) {
            h.update(t.name.as_bytes());
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// Gradients aligned with [`ModelParams::tensors`]. Slots are allocated on
/// first write so per-sample partial gradients stay cheap.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    pub tensors: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn new(params: &ModelParams) -> Self {
        Grads {
            tensors: vec![None; params.tensors.len()],
        }
    }

    pub fn for_len(n: usize) -> Self {
        Grads {
            tensors: vec![None; n],
        }
    }

    pub fn slot(&mut self, id: ParamId, len: usize) -> &mut [f64] {
        self.tensors[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.tensors[id.0].as_deref()
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (mine, theirs) in self.tensors.iter_mut().zip(&other.tensors) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.iter_mut().zip(t).for_each(|(a, b)| *a += b),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    /// Merge chunk accumulators in order.
    pub fn merge_all(&mut self, parts: &[Grads]) {
        for p in parts {
            self.add_assign(p);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .flat_map(|t| t.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors.iter_mut().flatten() {
            t.iter_mut().for_each(|g| *g *= s);
        }
    }

    /// Dense copy, zeros for untouched tensors.
    pub fn dense(&self, params: &ModelParams) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .zip(&params.tensors)
            .map(|(g, p)| g.clone().unwrap_or_else(|| vec![0.0; p.data.len()]))
            .collect()
    }
}

/// Registers tensors while an architecture is being built.
pub struct ParamBuilder<'r, R: Rng> {
    pub params: ModelParams,
    rng: &'r mut R,
}

impl<'r, R: Rng> ParamBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        ParamBuilder {
            params: ModelParams::default(),
            rng,
        }
    }

    /// Uniform(-bound, bound) initialisation.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.push(name, shape, data)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let n: usize = shape.iter().product();
        self.push(name, shape, vec![value; n])
    }

    fn push(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> ParamId {
        self.params.tensors.push(Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        ParamId(self.params.tensors.len() - 1)
    }

    pub fn buffer(&mut self, name: &str, len: usize, value: f64) -> BufferId {
        self.params.buffers.push(Tensor {
            name: name.to_string(),
            shape: vec![len],
            data: vec![value; len],
        });
        BufferId(self.params.buffers.len() - 1)
    }
}

const MAGIC: &[u8; 8] = b"COCACKPT";
const FORMAT_VERSION: u32 = 1;

/// Checkpoint layout (little endian):
/// magic, version u32, metadata length u64 + UTF-8 JSON, tensor count u32,
/// buffer count u32, then per tensor: name length u32 + bytes, rank u32,
/// dims u64 each, data as f64 bits.
pub fn write_checkpoint(
    path: impl AsRef<Path>,
    metadata_json: &str,
    params: &ModelParams,
) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(metadata_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(metadata_json.as_bytes());
    buf.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(params.buffers.len() as u32).to_le_bytes());
    for t in params.tensors.iter().chain(params.buffers.iter()) {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    let mut f = File::create(path).map_err(|e| CocaError::io(path, e))?;
    f.write_all(&buf).map_err(|e| CocaError::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CocaError::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(String, ModelParams)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CocaError::io(path, e))?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if c.take(8)? != MAGIC {
        return Err(CocaError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(CocaError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let meta_len = c.u64()? as usize;
    let meta = String::from_utf8(c.take(meta_len)?.to_vec())
        .map_err(|_| CocaError::Checkpoint("metadata is not UTF-8".into()))?;
    let n_tensors = c.u32()? as usize;
    let n_buffers = c.u32()? as usize;
    let mut all = Vec::with_capacity(n_tensors + n_buffers);
    for _ in 0..n_tensors + n_buffers {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| CocaError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| c.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        all.push(Tensor { name, shape, data });
    }
    if c.pos != bytes.len() {
        return Err(CocaError::Checkpoint("trailing bytes".into()));
    }
    let buffers = all.split_off(n_tensors);
    Ok((
        meta,
        ModelParams {
            tensors: all,
            buffers,
        },
    ))
}
