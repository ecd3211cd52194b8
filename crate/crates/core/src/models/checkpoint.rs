//! Self-describing binary checkpoint.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! b"ODILCKPT" | u32 version | u64 header_len | header JSON
//! u64 array_count | { u32 name_len | name | u32 ndim | u64 dims.. | f64 data.. }*
//! ```
//!
//! The JSON header carries the model spec, statistics mode and optimizer
//! kind/step. Every floating-point value lives in the named arrays, so a
//! save/load round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};
use crate::batchnorm::{BatchNormState, StatsMode};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, CosineSchedule, OptKind, OptState};
use crate::tensor::{ParameterSet, Tensor};

const MAGIC: &[u8; 8] = b"ODILCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: ModelSpec,
    mode: StatsMode,
    params: Vec<String>,
    optimizer: Option<OptHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptHeader {
    kind: OptKind,
    step: u64,
    schedule_total_steps: Option<u64>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(out: W, model: &Model, opt: Option<&OptState>) -> Result<()> {
    let mut arrays: Vec<(String, Tensor)> = Vec::new();
    for (name, t) in model.params.iter() {
        arrays.push((name.to_string(), t.clone()));
    }
    for (i, s) in model.bn.iter().enumerate() {
        arrays.push((format!("bn{i}.running_mean"), Tensor::vector(s.running_mean.clone())));
        arrays.push((format!("bn{i}.running_var"), Tensor::vector(s.running_var.clone())));
        arrays.push((format!("bn{i}.hyper"), Tensor::vector(vec![s.momentum, s.eps])));
    }
    if let Some(o) = opt {
        let a = o.adam;
        arrays.push(("opt.adam".into(), Tensor::vector(vec![a.beta1, a.beta2, a.eps])));
        if let Some(s) = o.schedule {
            arrays.push(("opt.schedule".into(), Tensor::vector(vec![s.max_lr, s.min_lr])));
        }
        for (name, t) in o.first_moment.iter() {
            arrays.push((format!("opt.m.{name}"), t.clone()));
        }
        for (name, t) in o.second_moment.iter() {
            arrays.push((format!("opt.v.{name}"), t.clone()));
        }
    }

    let header = Header {
        spec: model.spec.clone(),
        mode: model.mode,
        params: model.params.names().map(str::to_string).collect(),
        optimizer: opt.map(|o| OptHeader {
            kind: o.kind,
            step: o.step,
            schedule_total_steps: o.schedule.map(|s| s.total_steps),
        }),
    };
    let header = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(out);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(arrays.len() as u64).to_le_bytes())?;
    for (name, t) in &arrays {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b).map_err(|e| corrupt(format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b).map_err(|e| corrupt(format!("truncated: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R, n: u64) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n).read_to_end(&mut buf)?;
    if buf.len() as u64 != n {
        return Err(corrupt("truncated"));
    }
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<(Model, Option<OptState>)> {
    let mut r = BufReader::new(input);
    let mut magic = [0; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt("file too short"))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let header_len = read_u64(&mut r)?;
    let header: Header = serde_json::from_slice(&read_bytes(&mut r, header_len)?)?;

    let count = read_u64(&mut r)?;
    let mut arrays: IndexMap<String, Tensor> = IndexMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)?;
        let name = String::from_utf8(read_bytes(&mut r, u64::from(name_len))?)
            .map_err(|_| corrupt("array name is not UTF-8"))?;
        let ndim = read_u32(&mut r)?;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = read_bytes(&mut r, numel as u64 * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if arrays.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(corrupt(format!("duplicate array `{name}`")));
        }
    }

    let mut take = |name: &str| arrays.shift_remove(name).ok_or_else(|| corrupt(format!("missing array `{name}`")));

    let mut params = ParameterSet::new();
    for name in &header.params {
        params.insert(name.clone(), take(name)?)?;
    }
    let mut bn = Vec::new();
    for i in 0..header.spec.num_bn_layers() {
        let hyper = take(&format!("bn{i}.hyper"))?;
        bn.push(BatchNormState {
            running_mean: take(&format!("bn{i}.running_mean"))?.into_data(),
            running_var: take(&format!("bn{i}.running_var"))?.into_data(),
            momentum: hyper.data()[0],
            eps: hyper.data()[1],
        });
    }
    let opt = match &header.optimizer {
        None => None,
        Some(h) => {
            let a = take("opt.adam")?;
            let schedule = match h.schedule_total_steps {
                None => None,
                Some(total_steps) => {
                    let s = take("opt.schedule")?;
                    Some(CosineSchedule {
                        max_lr: s.data()[0],
                        min_lr: s.data()[1],
                        total_steps,
                    })
                }
            };
            let mut first_moment = ParameterSet::new();
            let mut second_moment = ParameterSet::new();
            if h.kind == OptKind::Adam {
                for name in &header.params {
                    first_moment.insert(name.clone(), take(&format!("opt.m.{name}"))?)?;
                }
                for name in &header.params {
                    second_moment.insert(name.clone(), take(&format!("opt.v.{name}"))?)?;
                }
            }
            Some(OptState {
                kind: h.kind,
                step: h.step,
                first_moment,
                second_moment,
                adam: AdamConfig {
                    beta1: a.data()[0],
                    beta2: a.data()[1],
                    eps: a.data()[2],
                },
                schedule,
            })
        }
    };
    if let Some((name, _)) = arrays.first() {
        return Err(corrupt(format!("unexpected array `{name}`")));
    }
    let model = Model::from_parts(header.spec, params, bn, header.mode)?;
    Ok((model, opt))
}

pub fn save_checkpoint(path: &Path, model: &Model, opt: Option<&OptState>) -> Result<()> {
    write_checkpoint(File::create(path)?, model, opt)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<OptState>)> {
    let file = File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    read_checkpoint(file)
}
