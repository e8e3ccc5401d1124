//! Self-describing binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LLAB" | u32 version | str model | u64 seed | u32 n_records
//! per record: str name | u32 ndim | u32 dims[ndim] | u8 dtype
//!   dtype 0: f32 values[numel]
//!   dtype 1: i16 codes[numel] | f32 scale | u8 bits
//! str config_echo (JSON)
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8.

use std::path::Path;

use llab_autodiff::ParamVector;
use llab_core::data::DatasetSpec;
use llab_core::model::{Model, ModelSpec};
use llab_core::quant::{QuantSpec, Quantization, QuantizedParams, QuantizedTensor, StoredSegment};
use llab_core::train::{TrainConfig, TrainedModel};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::manifest::write_atomic;

pub const MAGIC: &[u8; 4] = b"LLAB";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_CODES: u8 = 1;

/// Everything needed to rebuild the data and graph without the original config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    Codes { codes: Vec<i16>, scale: f32, bits: u32 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: String,
    pub seed: u64,
    pub records: Vec<Record>,
    pub echo: ConfigEcho,
}

impl Checkpoint {
    /// Stores the quantized weights as integer codes, everything else as f32.
    pub fn from_trained(t: &TrainedModel) -> Self {
        let n = t.params.layout().segments().len();
        let quant = t.model.quantization().cloned().unwrap_or_else(|| Quantization::new(vec![None; n]));
        let qp = QuantizedParams::new(&t.params, &quant);
        let records = qp
            .layout()
            .segments()
            .iter()
            .zip(qp.segments())
            .map(|(seg, stored)| Record {
                name: seg.name.clone(),
                shape: seg.shape.clone(),
                payload: match stored {
                    StoredSegment::Float(v) => Payload::F32(v.clone()),
                    StoredSegment::Quantized(q) => Payload::Codes {
                        codes: q.codes().to_vec(),
                        scale: q.spec().scale(),
                        bits: q.spec().bits(),
                    },
                },
            })
            .collect();
        Checkpoint {
            model: t.model.name().to_string(),
            seed: t.config.seed,
            records,
            echo: ConfigEcho { spec: t.model.spec().clone(), train: t.config.clone(), dataset: t.dataset },
        }
    }

    /// Stored parameters with their layout checked against the echoed spec.
    pub fn quantized_params(&self) -> std::result::Result<(Model, QuantizedParams), String> {
        if self.echo.spec.name != self.model {
            return Err(format!("model name '{}' does not match spec '{}'", self.model, self.echo.spec.name));
        }
        let model = Model::new(self.echo.spec.clone()).map_err(|e| e.to_string())?;
        let layout = model.layout().clone();
        if layout.segments().len() != self.records.len() {
            return Err(format!("{} records, model has {} segments", self.records.len(), layout.segments().len()));
        }
        let mut segs = Vec::with_capacity(self.records.len());
        for (seg, r) in layout.segments().iter().zip(&self.records) {
            if seg.name != r.name || seg.shape != r.shape {
                return Err(format!("record {} {:?} does not match segment {} {:?}", r.name, r.shape, seg.name, seg.shape));
            }
            segs.push(match &r.payload {
                Payload::F32(v) => StoredSegment::Float(v.clone()),
                Payload::Codes { codes, scale, bits } => {
                    let spec = QuantSpec::new(*bits, *scale).map_err(|e| e.to_string())?;
                    StoredSegment::Quantized(
                        QuantizedTensor::from_codes(r.shape.clone(), codes.clone(), spec).map_err(|e| e.to_string())?,
                    )
                }
            });
        }
        let qp = QuantizedParams::from_segments(ParamVector::zeros(layout), segs).map_err(|e| e.to_string())?;
        Ok((model, qp))
    }

    /// The graph with its frozen quantization and the effective parameters.
    pub fn restore(&self) -> std::result::Result<(Model, ParamVector), String> {
        let (model, qp) = self.quantized_params()?;
        let quant = qp.quantization();
        let quant = quant.specs().iter().any(|s| s.is_some()).then_some(quant);
        Ok((model.with_quantization(quant), qp.to_params()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut w, &self.model);
        w.extend_from_slice(&self.seed.to_le_bytes());
        w.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            put_str(&mut w, &r.name);
            w.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                w.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &r.payload {
                Payload::F32(v) => {
                    w.push(DTYPE_F32);
                    v.iter().for_each(|x| w.extend_from_slice(&x.to_le_bytes()));
                }
                Payload::Codes { codes, scale, bits } => {
                    w.push(DTYPE_CODES);
                    codes.iter().for_each(|c| w.extend_from_slice(&c.to_le_bytes()));
                    w.extend_from_slice(&scale.to_le_bytes());
                    w.push(*bits as u8);
                }
            }
        }
        put_str(&mut w, &serde_json::to_string(&self.echo).expect("echo serializes"));
        w
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported format version {}", version));
        }
        let model = r.string()?;
        let seed = r.u64()?;
        let n = r.u32()? as usize;
        let mut records = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let payload = match r.take(1)?[0] {
                DTYPE_F32 => Payload::F32(r.take(numel * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                DTYPE_CODES => {
                    let codes = r.take(numel * 2)?.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
                    let scale = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
                    let bits = r.take(1)?[0] as u32;
                    Payload::Codes { codes, scale, bits }
                }
                t => return Err(format!("unknown dtype tag {}", t)),
            };
            records.push(Record { name, shape, payload });
        }
        let echo = serde_json::from_str(&r.string()?).map_err(|e| format!("config echo: {}", e))?;
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Checkpoint { model, seed, records, echo })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes).map_err(|reason| CliError::Checkpoint { path: path.into(), reason })
    }

    /// Loads and rebuilds in one step, mapping layout problems to the file.
    pub fn open(path: &Path) -> Result<(Self, Model, ParamVector)> {
        let ck = Self::load(path)?;
        let (model, params) = ck.restore().map_err(|reason| CliError::Checkpoint { path: path.into(), reason })?;
        Ok((ck, model, params))
    }
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8".to_string())
    }
}
