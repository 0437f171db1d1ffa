//! On-disk model container: `model.json` (structure and tensor descriptors)
//! next to `model.bin` (little-endian payloads, one CRC32 per blob).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Graph, GraphError, GraphMeta, LayerNode, TensorData, ThresholdUnit};
use crate::qtensor::{QuantError, QuantTensor};
use crate::scalar::Scalar;
use crate::tensor::{FloatTensor, IntTensor, TensorError};

pub const FORMAT_NAME: &str = "quantflow-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed model.json: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("not a {FORMAT_NAME} manifest (format `{0}`)")]
    Format(String),
    #[error("unsupported model version {found}; this build reads version {FORMAT_VERSION}")]
    Version { found: u32 },
    #[error("checksum failure for tensor `{tensor}`: {detail}")]
    Checksum { tensor: String, detail: String },
    #[error("tensor `{tensor}` is inconsistent: {detail}")]
    Corrupt { tensor: String, detail: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest<T> {
    format: String,
    version: u32,
    meta: GraphMeta<T>,
    nodes: Vec<LayerNode<T>>,
    tensors: Vec<Descriptor>,
}

#[derive(Serialize, Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    id: String,
    #[serde(rename = "type")]
    kind: String,
    dims: Vec<usize>,
    offset: u64,
    len: u64,
    crc32: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bit_width: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    signed: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    channel_axis: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    zero_channels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_offset: Option<i32>,
}

impl Descriptor {
    fn new(id: &str, kind: &str, dims: Vec<usize>) -> Self {
        Self {
            id: id.to_owned(),
            kind: kind.to_owned(),
            dims,
            offset: 0,
            len: 0,
            crc32: 0,
            bit_width: None,
            signed: None,
            channel_axis: None,
            zero_channels: Vec::new(),
            out_offset: None,
        }
    }

    fn corrupt(&self, detail: impl Into<String>) -> ModelIoError {
        ModelIoError::Corrupt { tensor: self.id.clone(), detail: detail.into() }
    }

    fn need<V: Copy>(&self, v: Option<V>, field: &str) -> Result<V, ModelIoError> {
        v.ok_or_else(|| self.corrupt(format!("missing `{field}`")))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelIoError + '_ {
    move |source| ModelIoError::Io { path: path.to_owned(), source }
}

fn encode<T: Scalar>(id: &str, t: &TensorData<T>) -> (Descriptor, Vec<u8>) {
    let mut bytes = Vec::new();
    let d = match t {
        TensorData::Float(f) => {
            f.data().iter().for_each(|v| bytes.extend_from_slice(&v.as_f64().to_le_bytes()));
            Descriptor::new(id, "float", f.dims().to_vec())
        }
        TensorData::Quant(q) => {
            q.data().iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
            q.scales().iter().for_each(|v| bytes.extend_from_slice(&v.as_f64().to_le_bytes()));
            let mut d = Descriptor::new(id, "quant", q.dims().to_vec());
            d.bit_width = Some(q.bit_width());
            d.signed = Some(q.signed());
            d.channel_axis = Some(q.channel_axis());
            d.zero_channels = q.zero_channels().to_vec();
            d
        }
        TensorData::Int(i) => {
            i.data().iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
            Descriptor::new(id, "int", i.dims().to_vec())
        }
        TensorData::Thresholds(u) => {
            let levels = u.thresholds.first().map_or(0, Vec::len);
            u.thresholds.iter().flatten().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
            let mut d = Descriptor::new(id, "thresholds", vec![u.thresholds.len(), levels]);
            d.bit_width = Some(u.out_bits);
            d.signed = Some(u.out_signed);
            d.out_offset = Some(u.out_offset);
            d
        }
    };
    (d, bytes)
}

fn chunks<const N: usize>(bytes: &[u8]) -> impl Iterator<Item = [u8; N]> + '_ {
    bytes.chunks_exact(N).map(|c| c.try_into().expect("exact chunk"))
}

fn decode<T: Scalar>(d: &Descriptor, bytes: &[u8]) -> Result<TensorData<T>, ModelIoError> {
    let n: usize = d.dims.iter().product();
    let expect_len = |want: usize| {
        if bytes.len() == want {
            Ok(())
        } else {
            Err(d.corrupt(format!("{} payload bytes, expected {want}", bytes.len())))
        }
    };
    let tensor_err = |e: TensorError| d.corrupt(e.to_string());
    let quant_err = |e: QuantError| d.corrupt(e.to_string());
    match d.kind.as_str() {
        "float" => {
            expect_len(8 * n)?;
            let data = chunks::<8>(bytes).map(|c| T::lit(f64::from_le_bytes(c))).collect();
            Ok(TensorData::Float(FloatTensor::new(d.dims.clone(), data).map_err(tensor_err)?))
        }
        "quant" => {
            let axis = d.need(d.channel_axis, "channel_axis")?;
            let channels = *d.dims.get(axis).ok_or_else(|| d.corrupt("channel axis out of range"))?;
            expect_len(4 * n + 8 * channels)?;
            let (ints, scales) = bytes.split_at(4 * n);
            let data = chunks::<4>(ints).map(i32::from_le_bytes).collect();
            let scales = chunks::<8>(scales).map(|c| T::lit(f64::from_le_bytes(c))).collect();
            let q = QuantTensor::new(
                d.dims.clone(),
                data,
                scales,
                axis,
                d.need(d.bit_width, "bit_width")?,
                d.need(d.signed, "signed")?,
            )
            .map_err(quant_err)?;
            Ok(TensorData::Quant(q.with_zero_channels(d.zero_channels.clone())))
        }
        "int" => {
            expect_len(4 * n)?;
            let data = chunks::<4>(bytes).map(i32::from_le_bytes).collect();
            Ok(TensorData::Int(IntTensor::new(d.dims.clone(), data).map_err(tensor_err)?))
        }
        "thresholds" => {
            if d.dims.len() != 2 {
                return Err(d.corrupt("threshold dims must be [channels, levels]"));
            }
            expect_len(8 * n)?;
            let flat: Vec<i64> = chunks::<8>(bytes).map(i64::from_le_bytes).collect();
            let levels = d.dims[1];
            let thresholds =
                if levels == 0 { vec![Vec::new(); d.dims[0]] } else { flat.chunks(levels).map(<[i64]>::to_vec).collect() };
            Ok(TensorData::Thresholds(ThresholdUnit {
                thresholds,
                out_bits: d.need(d.bit_width, "bit_width")?,
                out_signed: d.need(d.signed, "signed")?,
                out_offset: d.need(d.out_offset, "out_offset")?,
            }))
        }
        other => Err(d.corrupt(format!("unknown tensor type `{other}`"))),
    }
}

/// Writes `dir/model.json` and `dir/model.bin`, creating `dir` if needed.
pub fn save_model<T: Scalar>(g: &Graph<T>, dir: &Path) -> Result<(), ModelIoError> {
    g.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut blob = Vec::new();
    let mut descriptors = Vec::with_capacity(g.tensors.len());
    for (id, t) in &g.tensors {
        let (mut d, bytes) = encode(id, t);
        d.offset = blob.len() as u64;
        d.len = bytes.len() as u64;
        d.crc32 = crc32fast::hash(&bytes);
        blob.extend_from_slice(&bytes);
        descriptors.push(d);
    }
    let manifest = Manifest {
        format: FORMAT_NAME.to_owned(),
        version: FORMAT_VERSION,
        meta: g.meta.clone(),
        nodes: g.nodes.clone(),
        tensors: descriptors,
    };
    let json_path = dir.join("model.json");
    let bin_path = dir.join("model.bin");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&json_path, text).map_err(io_err(&json_path))?;
    fs::write(&bin_path, blob).map_err(io_err(&bin_path))?;
    Ok(())
}

pub fn load_model<T: Scalar>(dir: &Path) -> Result<Graph<T>, ModelIoError> {
    let json_path = dir.join("model.json");
    let bin_path = dir.join("model.bin");
    let text = fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
    let header: serde_json::Value = serde_json::from_str(&text)?;
    let format = header.get("format").and_then(|v| v.as_str()).unwrap_or_default();
    if format != FORMAT_NAME {
        return Err(ModelIoError::Format(format.to_owned()));
    }
    let version = header.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(ModelIoError::Version { found: version });
    }
    let manifest: Manifest<T> = serde_json::from_value(header)?;
    let blob = fs::read(&bin_path).map_err(io_err(&bin_path))?;

    let mut tensors = std::collections::BTreeMap::new();
    for d in &manifest.tensors {
        let end = d.offset.checked_add(d.len).filter(|&e| e <= blob.len() as u64).ok_or_else(|| {
            ModelIoError::Checksum {
                tensor: d.id.clone(),
                detail: format!("blob [{}, +{}) extends past the {}-byte model.bin (truncated)", d.offset, d.len, blob.len()),
            }
        })?;
        let bytes = &blob[d.offset as usize..end as usize];
        let crc = crc32fast::hash(bytes);
        if crc != d.crc32 {
            return Err(ModelIoError::Checksum {
                tensor: d.id.clone(),
                detail: format!("crc32 {crc:08x}, manifest says {:08x}", d.crc32),
            });
        }
        tensors.insert(d.id.clone(), decode(d, bytes)?);
    }
    let g = Graph { nodes: manifest.nodes, tensors, meta: manifest.meta };
    g.validate()?;
    Ok(g)
}
