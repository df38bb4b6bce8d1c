//! Checkpoint container.
//!
//! ```text
//! magic     8 bytes  "QPTCKPT\0"
//! length    u64 LE   manifest size in bytes
//! manifest  JSON     { format, version, model_config, optimizer?, tensors, extra }
//! data      f64 LE   every tensor back to back; `offset` and `len` in the
//!                    manifest count elements from the start of this section
//! ```
//!
//! Model parameters are stored under `model/<name>`. Optimizer moments go
//! under `optim/m/<name>` and `optim/v/<name>` when held in full precision,
//! or as the three arrays `.../int`, `.../scales`, `.../zero_points` when
//! quantized. Values round-trip bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GptModel, ModelConfig};
use crate::optim::{moment_config, AdamHyper, Moment, MomentKind, MomentStore};
use crate::quant::{QuantConfig, QuantizedTensor};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"QPTCKPT\0";
pub const FORMAT: &str = "qptrain-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub hyper: AdamHyper,
    pub m_quant: Option<QuantConfig>,
    pub v_quant: Option<QuantConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model_config: ModelConfig,
    pub optimizer: Option<OptimizerMeta>,
    pub tensors: Vec<TensorEntry>,
    pub extra: serde_json::Value,
}

/// Everything a training run needs to continue.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: GptModel,
    pub optimizer: Option<(AdamHyper, MomentStore)>,
    /// Caller-defined state (trainer counters, data position).
    pub extra: serde_json::Value,
}

fn moment_tensors(
    out: &mut Vec<(String, Tensor)>,
    prefix: &str,
    name: &str,
    moment: &Moment,
) -> Result<()> {
    match moment {
        Moment::Real(t) => out.push((format!("{prefix}/{name}"), t.clone())),
        Moment::Quantized(q) => {
            let ints = q.int_values().iter().map(|&v| v as f64).collect();
            out.push((format!("{prefix}/{name}/int"), Tensor::new(ints, q.source_shape())?));
            out.push((format!("{prefix}/{name}/scales"), Tensor::vector(q.scales())));
            let zps: Vec<f64> = q.zero_points().iter().map(|&z| z as f64).collect();
            out.push((format!("{prefix}/{name}/zero_points"), Tensor::vector(&zps)));
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> = self
            .model
            .params()
            .iter()
            .map(|p| (format!("model/{}", p.name), p.value.clone()))
            .collect();
        let optimizer = match &self.optimizer {
            None => None,
            Some((hyper, store)) => {
                for (kind, prefix) in [(MomentKind::M, "optim/m"), (MomentKind::V, "optim/v")] {
                    for (p, moment) in self.model.params().iter().zip(store.moments(kind)) {
                        moment_tensors(&mut tensors, prefix, &p.name, moment)?;
                    }
                }
                Some(OptimizerMeta {
                    hyper: *hyper,
                    m_quant: store.quant_config(MomentKind::M),
                    v_quant: store.quant_config(MomentKind::V),
                })
            }
        };

        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0;
        for (name, t) in &tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len(),
            });
            offset += t.len();
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            model_config: self.model.config().clone(),
            optimizer,
            tensors: entries,
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");

        let mut bytes = Vec::with_capacity(16 + json.len() + offset * 8);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }

        let tmp = path.with_extension("tmp");
        let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        file.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(file);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let (manifest, tensors) = parse(&bytes).map_err(corrupt)?;
        let bad = |e: Error| corrupt(e.to_string());

        let mut model_tensors = BTreeMap::new();
        for (name, t) in &tensors {
            if let Some(rest) = name.strip_prefix("model/") {
                model_tensors.insert(rest.to_string(), t.clone());
            }
        }
        let model = GptModel::from_named(manifest.model_config.clone(), &model_tensors).map_err(bad)?;

        let optimizer = match &manifest.optimizer {
            None => None,
            Some(meta) => {
                let read = |prefix: &str, cfg: Option<QuantConfig>| -> Result<Vec<Moment>> {
                    model
                        .params()
                        .iter()
                        .map(|p| read_moment(&tensors, prefix, &p.name, cfg, p.value.shape()))
                        .collect()
                };
                let m = read("optim/m", meta.m_quant).map_err(bad)?;
                let v = read("optim/v", meta.v_quant).map_err(bad)?;
                meta.hyper.validate().map_err(bad)?;
                let store = MomentStore::from_parts(m, v, meta.m_quant, meta.v_quant).map_err(bad)?;
                Some((meta.hyper, store))
            }
        };
        Ok(Self {
            model,
            optimizer,
            extra: manifest.extra,
        })
    }
}

fn read_moment(
    tensors: &BTreeMap<String, Tensor>,
    prefix: &str,
    name: &str,
    cfg: Option<QuantConfig>,
    shape: &[usize],
) -> Result<Moment> {
    let key = format!("{prefix}/{name}");
    let missing = || Error::Data(format!("missing tensor {key}"));
    let moment = match cfg {
        None => Moment::Real(tensors.get(&key).ok_or_else(missing)?.clone()),
        Some(cfg) => {
            let get = |suffix: &str| {
                tensors
                    .get(&format!("{key}/{suffix}"))
                    .ok_or_else(|| Error::Data(format!("missing tensor {key}/{suffix}")))
            };
            let as_int = |t: &Tensor| -> Result<Vec<i64>> {
                t.data()
                    .iter()
                    .map(|&v| {
                        if v.fract() == 0.0 && v.abs() < 2f64.powi(31) {
                            Ok(v as i64)
                        } else {
                            Err(Error::Data(format!("{key}: non-integer value {v}")))
                        }
                    })
                    .collect()
            };
            let ints = get("int")?;
            let int_values = as_int(ints)?
                .into_iter()
                .map(|v| i8::try_from(v).map_err(|_| Error::Data(format!("{key}: {v} exceeds int8"))))
                .collect::<Result<Vec<i8>>>()?;
            let zero_points = as_int(get("zero_points")?)?.into_iter().map(|v| v as i32).collect();
            let q = QuantizedTensor::from_parts(
                int_values,
                get("scales")?.data().to_vec(),
                zero_points,
                moment_config(&cfg, ints.shape()),
                ints.shape().to_vec(),
            )?;
            Moment::Quantized(q)
        }
    };
    if moment.shape() != shape {
        return Err(Error::Shape(format!(
            "{key} has shape {:?}, parameter has {shape:?}",
            moment.shape()
        )));
    }
    Ok(moment)
}

fn parse(bytes: &[u8]) -> std::result::Result<(Manifest, BTreeMap<String, Tensor>), String> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err("not a checkpoint".into());
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or("manifest length exceeds file")?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| format!("manifest: {e}"))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(format!(
            "unsupported format {} version {}",
            manifest.format, manifest.version
        ));
    }
    let data = &bytes[end..];
    if !data.len().is_multiple_of(8) {
        return Err("data section is not a whole number of f64 values".into());
    }
    let n_values = data.len() / 8;
    let mut tensors = BTreeMap::new();
    let mut covered = 0usize;
    for entry in &manifest.tensors {
        let stop = entry
            .offset
            .checked_add(entry.len)
            .filter(|&s| s <= n_values)
            .ok_or_else(|| format!("tensor {} runs past the data section", entry.name))?;
        let values: Vec<f64> = data[entry.offset * 8..stop * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(values, &entry.shape).map_err(|e| format!("tensor {}: {e}", entry.name))?;
        if tensors.insert(entry.name.clone(), t).is_some() {
            return Err(format!("duplicate tensor {}", entry.name));
        }
        covered += entry.len;
    }
    if covered != n_values {
        return Err(format!("{covered} values described, {n_values} present"));
    }
    Ok((manifest, tensors))
}
