//! Versioned binary checkpoint: a JSON metadata block followed by a table
//! of named tensors with raw little-endian f64 payloads, so round trips are
//! bit-exact.

use crate::data::NormStats;
use crate::discriminator::{DiscriminatorParams, DiscriminatorShape};
use crate::generator::GeneratorParams;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"STDP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("metadata error: {0}")]
    Meta(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Everything needed to rebuild the models and denormalize their output.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub n_nodes: usize,
    /// Time length of one generated sample (window_len + horizon).
    pub sample_len: usize,
    pub window_len: usize,
    pub horizon: usize,
    pub m_dim: usize,
    pub h_dim: usize,
    pub kd_len: usize,
    pub attention_enabled: bool,
    pub node_ids: Vec<String>,
    pub norm: Option<NormStats>,
}

impl CheckpointMeta {
    pub fn discriminator_shape(&self) -> DiscriminatorShape {
        DiscriminatorShape {
            n_nodes: self.n_nodes,
            t_len: self.sample_len,
            m_dim: self.m_dim,
            h_dim: self.h_dim,
            kd_len: self.kd_len,
            attention_enabled: self.attention_enabled,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_models(
        meta: CheckpointMeta,
        generator: &GeneratorParams,
        discriminator: &DiscriminatorParams,
    ) -> Self {
        let mut tensors = Vec::new();
        for (name, t) in generator.tensors() {
            tensors.push((name.to_string(), t.clone()));
        }
        for (name, t) in discriminator.all_tensors() {
            tensors.push((name.to_string(), t.clone()));
        }
        Checkpoint { meta, tensors }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Format(format!("missing tensor '{}'", name)))
    }

    pub fn generator(&self) -> Result<GeneratorParams> {
        Ok(GeneratorParams {
            w: self.tensor("gen.w")?.clone(),
            b: self.tensor("gen.b")?.clone(),
            kernel: self.tensor("gen.kernel")?.clone(),
        })
    }

    pub fn discriminator(&self) -> Result<DiscriminatorParams> {
        Ok(DiscriminatorParams {
            shape: self.meta.discriminator_shape(),
            ws_q: self.tensor("disc.ws_q")?.clone(),
            ws_k: self.tensor("disc.ws_k")?.clone(),
            vs_kernel: self.tensor("disc.vs_kernel")?.clone(),
            wt_q: self.tensor("disc.wt_q")?.clone(),
            wt_k: self.tensor("disc.wt_k")?.clone(),
            vt_kernel: self.tensor("disc.vt_kernel")?.clone(),
            alpha: self.tensor("disc.alpha")?.clone(),
            beta: self.tensor("disc.beta")?.clone(),
            kd: self.tensor("disc.kd")?.clone(),
            wd: self.tensor("disc.wd")?.clone(),
            bd: self.tensor("disc.bd")?.clone(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        out.write_all(&(meta.len() as u32).to_le_bytes())?;
        out.write_all(&meta)?;
        out.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.tensors {
            let name_bytes = name.as_bytes();
            out.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
            out.write_all(name_bytes)?;
            out.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
            for &dim in tensor.shape() {
                out.write_all(&(dim as u32).to_le_bytes())?;
            }
            for &v in tensor.data() {
                out.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = read_u32(&mut input)?;
        if version != VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported checkpoint version {}",
                version
            )));
        }
        let meta_len = read_u32(&mut input)? as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        input.read_exact(&mut meta_bytes)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)?;

        let count = read_u32(&mut input)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut input)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            input.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(&mut input)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut input)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                input.read_exact(&mut buf)?;
                data.push(f64::from_bits(u64::from_le_bytes(buf)));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { meta, tensors })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
