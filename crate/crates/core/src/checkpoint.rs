//! Model checkpoints.
//!
//! Layout:
//!
//! ```text
//! b"DKANCKPT"                8-byte magic
//! u64 little-endian          header length in bytes
//! header                     UTF-8 JSON: format version, spec, seed, tensor table
//! f64 little-endian blobs    every tensor in the table, in table order
//! ```
//!
//! The tensor table lists learnable parameters in [`Model::params`] order,
//! interleaved per layer with each KAN layer's knot matrix
//! (`[n_in, G + 2k + 1]`, not learnable).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bspline::KnotGrid;
use crate::error::{Error, Result};
use crate::model::{build_model, Layer, Model, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DKANCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub learnable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

fn knot_matrix(grids: &[KnotGrid]) -> Tensor {
    let len = grids[0].knots().len();
    let data = grids.iter().flat_map(|g| g.knots().iter().copied()).collect();
    Tensor::new(vec![grids.len(), len], data).expect("grids share a knot count")
}

fn layer_tensors(index: usize, layer: &Layer) -> Vec<(TensorEntry, Tensor)> {
    let entry = |field: &str, t: &Tensor, learnable| TensorEntry {
        name: format!("layers.{index}.{field}"),
        shape: t.shape().to_vec(),
        learnable,
    };
    match layer {
        Layer::Conv2d(c) => vec![
            (entry("weight", &c.weight, true), c.weight.clone()),
            (entry("bias", &c.bias, true), c.bias.clone()),
        ],
        Layer::Linear(l) => vec![
            (entry("weight", &l.weight, true), l.weight.clone()),
            (entry("bias", &l.bias, true), l.bias.clone()),
        ],
        Layer::KanLinear(k) => {
            let knots = knot_matrix(&k.grids);
            vec![
                (entry("spline_coeffs", &k.spline_coeffs, true), k.spline_coeffs.clone()),
                (entry("spline_scaler", &k.spline_scaler, true), k.spline_scaler.clone()),
                (entry("base_weight", &k.base_weight, true), k.base_weight.clone()),
                (entry("knots", &knots, false), knots),
            ]
        }
        _ => Vec::new(),
    }
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let tensors: Vec<(TensorEntry, Tensor)> = model
        .layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| layer_tensors(i, l))
        .collect();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        spec: model.spec.clone(),
        seed: model.seed,
        tensors: tensors.iter().map(|(e, _)| e.clone()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let blob_len: usize = tensors.iter().map(|(_, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(16 + json.len() + blob_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header runs past end of file"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..header_end])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let mut model = build_model(&header.spec, header.seed)?;
    let expected: Vec<TensorEntry> = model
        .layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| layer_tensors(i, l))
        .map(|(e, _)| e)
        .collect();
    if expected != header.tensors {
        return Err(bad("tensor table does not match the model spec"));
    }
    let total: usize = expected.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let blob = &bytes[header_end..];
    if blob.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            total * 8,
            blob.len()
        )));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut fill = |t: &mut Tensor| {
        for v in t.data_mut() {
            *v = values.next().expect("length checked");
        }
    };
    for layer in &mut model.layers {
        match layer {
            Layer::Conv2d(c) => {
                fill(&mut c.weight);
                fill(&mut c.bias);
            }
            Layer::Linear(l) => {
                fill(&mut l.weight);
                fill(&mut l.bias);
            }
            Layer::KanLinear(k) => {
                fill(&mut k.spline_coeffs);
                fill(&mut k.spline_scaler);
                fill(&mut k.base_weight);
                let mut knots = knot_matrix(&k.grids);
                fill(&mut knots);
                let degree = k.grids[0].degree();
                let width = knots.shape()[1];
                k.grids = knots
                    .data()
                    .chunks(width)
                    .map(|row| KnotGrid::from_knots(row.to_vec(), degree))
                    .collect::<Result<_>>()?;
            }
            _ => {}
        }
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelName;

    #[test]
    fn round_trip_with_adapted_grids() {
        let spec = ModelSpec::new(ModelName::ThreeLayerConvTwoLayerKAN, [1, 8, 8], 3);
        let mut model = build_model(&spec, 11).unwrap();
        let images = Tensor::from_fn(&[4, 1, 8, 8], |i| ((i * 7) % 13) as f64 / 6.5 - 1.0);
        model.update_kan_grids(&images).unwrap();
        let bytes = encode(&model).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn rejects_truncation_and_garbage() {
        let spec = ModelSpec::new(ModelName::TwoLayerConvNet, [1, 4, 4], 2);
        let bytes = encode(&build_model(&spec, 0).unwrap()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 8]).is_err());
        assert!(decode(b"not a checkpoint at all").is_err());
    }
}
