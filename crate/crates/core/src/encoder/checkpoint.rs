//! Checkpoint container: a JSON header line with a tensor directory
//! (`name -> dtype, shape, byte offset`), then raw f32 little-endian
//! tensors in name order, then the optimizer moments with the same layout.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::params::Params;
use crate::error::{Error, Result};
use crate::io;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerSection {
    pub step: u64,
    pub tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader<C> {
    pub schema_version: u32,
    pub config: C,
    pub tensors: BTreeMap<String, TensorEntry>,
    #[serde(default)]
    pub optimizer: Option<OptimizerSection>,
}

fn directory(params: &Params, prefix: &str, offset: &mut usize) -> BTreeMap<String, TensorEntry> {
    params
        .tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset: *offset,
            };
            *offset += t.len() * 4;
            (format!("{prefix}{name}"), e)
        })
        .collect()
}

pub fn encode<C: Serialize + Clone>(config: &C, params: &Params, opt: Option<&AdamState>) -> Result<Vec<u8>> {
    let mut offset = 0;
    let tensors = directory(params, "", &mut offset);
    let mut payload = params.to_f32_bytes();
    let optimizer = opt.map(|o| {
        let mut dir = directory(&o.m, "m.", &mut offset);
        dir.extend(directory(&o.v, "v.", &mut offset));
        payload.extend(o.m.to_f32_bytes());
        payload.extend(o.v.to_f32_bytes());
        OptimizerSection {
            step: o.step,
            tensors: dir,
        }
    });
    let header = CheckpointHeader {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        tensors,
        optimizer,
    };
    io::encode_container(&header, &payload)
}

pub fn save<C: Serialize + Clone>(path: &Path, config: &C, params: &Params, opt: Option<&AdamState>) -> Result<()> {
    io::write_bytes(path, &encode(config, params, opt)?)
}

fn read_tensors(
    dir: &BTreeMap<String, TensorEntry>,
    payload: &[u8],
    strip: &str,
) -> Result<Params> {
    let mut tensors = BTreeMap::new();
    for (name, e) in dir {
        let Some(stripped) = name.strip_prefix(strip) else {
            continue;
        };
        if e.dtype != "f32" {
            return Err(Error::UnsupportedFormat(format!("tensor dtype {}", e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 4;
        if end > payload.len() {
            return Err(Error::Format(format!("tensor `{name}` extends past the payload")));
        }
        let values = io::f32_from_le(&payload[e.offset..end])?;
        tensors.insert(
            stripped.to_string(),
            ArrayD::from_shape_vec(IxDyn(&e.shape), values).expect("length checked"),
        );
    }
    Ok(Params { tensors })
}

pub struct Loaded<C> {
    pub config: C,
    pub params: Params,
    pub optimizer: Option<AdamState>,
}

pub fn decode<C: DeserializeOwned>(bytes: &[u8]) -> Result<Loaded<C>> {
    let (header, payload) = io::decode_container::<CheckpointHeader<C>>(bytes)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::UnsupportedFormat(format!(
            "checkpoint schema {} (expected {SCHEMA_VERSION})",
            header.schema_version
        )));
    }
    let params = read_tensors(&header.tensors, payload, "")?;
    let optimizer = header
        .optimizer
        .map(|o| -> Result<AdamState> {
            Ok(AdamState {
                step: o.step,
                m: read_tensors(&o.tensors, payload, "m.")?,
                v: read_tensors(&o.tensors, payload, "v.")?,
            })
        })
        .transpose()?;
    Ok(Loaded {
        config: header.config,
        params,
        optimizer,
    })
}

pub fn load<C: DeserializeOwned>(path: &Path) -> Result<Loaded<C>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
