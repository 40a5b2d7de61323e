//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "EINSELD\0" | u32 version | u64 header_len | header JSON
//! u32 n_arrays | n_arrays x (u32 name_len | name | u8 dtype | u32 ndim | ndim x u64 dim | payload)
//! ```
//!
//! The header holds the model configuration and an opaque training state.
//! Arrays are model parameters (`param/<name>`), batch-norm running
//! statistics (`stat/<name>/mean`, `stat/<name>/var`) and optionally Adam
//! moments (`adam/m/<name>`, `adam/v/<name>`).

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{DType, Float};
use crate::model::{Model, ModelConfig, ModelError, RunningStats};
use crate::optim::{Adam, AdamConfig};

pub const MAGIC: &[u8; 8] = b"EINSELD\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint format or version: {0}")]
    Version(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint is missing array {0}")]
    Missing(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Values widened to `f64`; exact for `f32` sources.
    pub data: Vec<f64>,
}

impl NamedArray {
    fn from_array<F: Float>(name: String, a: &ArrayD<F>) -> Self {
        Self {
            name,
            dtype: F::DTYPE,
            shape: a.shape().to_vec(),
            data: a.iter().map(|v| v.f64()).collect(),
        }
    }

    fn from_vec<F: Float>(name: String, v: &[F]) -> Self {
        Self {
            name,
            dtype: F::DTYPE,
            shape: vec![v.len()],
            data: v.iter().map(|x| x.f64()).collect(),
        }
    }

    fn to_array<F: Float>(&self) -> ArrayD<F> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.iter().map(|&v| F::of(v)).collect())
            .expect("shape validated on read")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    state: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Caller-defined training state.
    pub state: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_model<F: Float>(model: &Model<F>, optimizer: Option<&Adam<F>>, state: serde_json::Value) -> Self {
        let mut arrays = Vec::new();
        for (name, p) in model.param_names().iter().zip(model.params()) {
            arrays.push(NamedArray::from_array(format!("param/{name}"), p));
        }
        for st in model.running_stats() {
            arrays.push(NamedArray::from_vec(format!("stat/{}/mean", st.name), &st.mean));
            arrays.push(NamedArray::from_vec(format!("stat/{}/var", st.name), &st.var));
        }
        if let Some(opt) = optimizer {
            for (name, m) in model.param_names().iter().zip(&opt.m) {
                arrays.push(NamedArray::from_array(format!("adam/m/{name}"), m));
            }
            for (name, v) in model.param_names().iter().zip(&opt.v) {
                arrays.push(NamedArray::from_array(format!("adam/v/{name}"), v));
            }
        }
        let mut state = state;
        if let (Some(opt), Some(obj)) = (optimizer, state.as_object_mut()) {
            obj.insert("adam_step".into(), opt.step.into());
            obj.insert("adam_config".into(), serde_json::to_value(opt.config).expect("plain struct"));
        }
        Self {
            model: model.config().clone(),
            state,
            arrays,
        }
    }

    fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    /// Rebuilds the model in precision `F`, converting if the stored dtype differs.
    pub fn to_model<F: Float>(&self) -> Result<Model<F>> {
        let template = Model::<F>::init(self.model.clone(), 0)?;
        let params = template
            .param_names()
            .iter()
            .map(|n| Ok((n.clone(), self.array(&format!("param/{n}"))?.to_array::<F>())))
            .collect::<Result<Vec<_>>>()?;
        let stats = template
            .running_stats()
            .iter()
            .map(|s| {
                let mean = self.array(&format!("stat/{}/mean", s.name))?;
                let var = self.array(&format!("stat/{}/var", s.name))?;
                Ok(RunningStats {
                    name: s.name.clone(),
                    mean: mean.data.iter().map(|&v| F::of(v)).collect(),
                    var: var.data.iter().map(|&v| F::of(v)).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model::from_parts(self.model.clone(), params, stats)?)
    }

    /// Optimizer state, if the checkpoint carries one.
    pub fn to_adam<F: Float>(&self, model: &Model<F>) -> Result<Option<Adam<F>>> {
        let Some(step) = self.state.get("adam_step").and_then(|v| v.as_u64()) else {
            return Ok(None);
        };
        let config: AdamConfig = match self.state.get("adam_config") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => AdamConfig::default(),
        };
        let mut adam = Adam::new(config, model.params());
        adam.step = step;
        for (i, (name, p)) in model.param_names().iter().zip(model.params()).enumerate() {
            let m = self.array(&format!("adam/m/{name}"))?;
            let v = self.array(&format!("adam/v/{name}"))?;
            if m.shape != p.shape() || v.shape != p.shape() {
                return Err(CheckpointError::Malformed(format!("optimizer state shape for {name}")));
            }
            adam.m[i] = m.to_array();
            adam.v[i] = v.to_array();
        }
        Ok(Some(adam))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            state: self.state.clone(),
        })?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(match a.dtype {
                DType::F32 => 0,
                DType::F64 => 1,
            });
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match a.dtype {
                DType::F32 => a.data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
                DType::F64 => a.data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Version("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(format!("found version {version}, expected {VERSION}")));
        }
        let header_len = read_u64(&mut r)? as usize;
        if header_len > r.len() {
            return Err(CheckpointError::Malformed("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..header_len])?;
        r = &r[header_len..];
        let n = read_u32(&mut r)? as usize;
        let mut arrays = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > r.len() {
                return Err(CheckpointError::Malformed("truncated name".into()));
            }
            let name = String::from_utf8(r[..name_len].to_vec())
                .map_err(|_| CheckpointError::Malformed("array name is not UTF-8".into()))?;
            r = &r[name_len..];
            let mut tag = [0u8; 1];
            read_exact(&mut r, &mut tag)?;
            let dtype = match tag[0] {
                0 => DType::F32,
                1 => DType::F64,
                t => return Err(CheckpointError::Malformed(format!("unknown dtype tag {t} for {name}"))),
            };
            let ndim = read_u32(&mut r)? as usize;
            if ndim > 8 {
                return Err(CheckpointError::Malformed(format!("{name} has {ndim} dimensions")));
            }
            let shape = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed(format!("{name} is too large")))?;
            let width = if dtype == DType::F32 { 4 } else { 8 };
            let nbytes = count
                .checked_mul(width)
                .filter(|&b| b <= r.len())
                .ok_or_else(|| CheckpointError::Malformed(format!("truncated payload for {name}")))?;
            let data = r[..nbytes]
                .chunks_exact(width)
                .map(|c| match dtype {
                    DType::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                    DType::F64 => f64::from_le_bytes(c.try_into().unwrap()),
                })
                .collect();
            r = &r[nbytes..];
            arrays.push(NamedArray { name, dtype, shape, data });
        }
        if !r.is_empty() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            model: header.model,
            state: header.state,
            arrays,
        })
    }

    /// Writes via a temporary file and rename so readers never see a partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| CheckpointError::Malformed("unexpected end of data".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_mels: 8,
            conv_channels: vec![2, 3],
            gru_hidden: 2,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_with_optimizer() {
        let model = Model::<f32>::init(tiny(), 11).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), model.params());
        adam.step = 7;
        adam.m[0].fill(0.25);
        let ck = Checkpoint::from_model(&model, Some(&adam), serde_json::json!({"epoch": 3}));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let m2 = back.to_model::<f32>().unwrap();
        assert_eq!(m2.params(), model.params());
        assert_eq!(m2.running_stats(), model.running_stats());
        let a2 = back.to_adam(&m2).unwrap().unwrap();
        assert_eq!(a2, adam);
        assert_eq!(back.state["epoch"], 3);
    }

    #[test]
    fn widens_to_f64() {
        let model = Model::<f32>::init(tiny(), 1).unwrap();
        let ck = Checkpoint::from_model(&model, None, serde_json::json!({}));
        let wide = ck.to_model::<f64>().unwrap();
        for (a, b) in wide.params().iter().zip(model.params()) {
            assert!(a.iter().zip(b).all(|(x, y)| *x == *y as f64));
        }
        assert!(ck.to_adam(&wide).unwrap().is_none());
    }

    #[test]
    fn rejects_corruption() {
        let model = Model::<f32>::init(tiny(), 1).unwrap();
        let bytes = Checkpoint::from_model(&model, None, serde_json::json!({})).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Version(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Version(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Malformed(_))
        ));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::<f64>::init(tiny(), 4).unwrap();
        let ck = Checkpoint::from_model(&model, None, serde_json::json!({"note": "x"}));
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
