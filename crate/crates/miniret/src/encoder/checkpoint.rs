//! Checkpoint container: config plus named parameter tensors, as JSON.
//!
//! f64 storage round-trips bit-exactly (serde_json emits the shortest
//! representation that parses back to the same bits). f32 storage is a
//! lossy space option and is excluded from gradient-check suites.

use super::{EncoderConfig, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPrecision {
    #[default]
    F64,
    F32,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u32,
    precision: CheckpointPrecision,
    config: EncoderConfig,
    tensors: Vec<NamedTensor>,
}

const SCHEMA_VERSION: u32 = 1;

pub fn save_checkpoint(
    path: &Path,
    cfg: &EncoderConfig,
    params: &Parameters,
    precision: CheckpointPrecision,
) -> Result<()> {
    let tensors = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| {
            let data = match precision {
                CheckpointPrecision::F64 => t.data().to_vec(),
                CheckpointPrecision::F32 => t.data().iter().map(|&v| v as f32 as f64).collect(),
            };
            NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data,
            }
        })
        .collect();
    let ckpt = Checkpoint {
        schema_version: SCHEMA_VERSION,
        precision,
        config: cfg.clone(),
        tensors,
    };
    let json = serde_json::to_string(&ckpt)?;
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderConfig, Parameters)> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.schema_version != SCHEMA_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint schema version {}",
            ckpt.schema_version
        )));
    }
    ckpt.config.validate()?;

    let mut by_name: std::collections::HashMap<String, Tensor> = ckpt
        .tensors
        .into_iter()
        .map(|nt| Ok((nt.name, Tensor::new(nt.shape, nt.data)?)))
        .collect::<Result<_>>()?;
    let mut take = |name: &str| -> Result<Tensor> {
        by_name
            .remove(name)
            .ok_or_else(|| Error::Data(format!("checkpoint missing tensor {name}")))
    };

    let token_embedding = take("token_embedding")?;
    let mut layers = Vec::with_capacity(ckpt.config.num_layers);
    for i in 0..ckpt.config.num_layers {
        layers.push(super::LayerParams {
            attn_norm: take(&format!("layers.{i}.attn_norm"))?,
            wq: take(&format!("layers.{i}.wq"))?,
            wk: take(&format!("layers.{i}.wk"))?,
            wv: take(&format!("layers.{i}.wv"))?,
            wo: take(&format!("layers.{i}.wo"))?,
            ffn_norm: take(&format!("layers.{i}.ffn_norm"))?,
            w_gate: take(&format!("layers.{i}.w_gate"))?,
            w_up: take(&format!("layers.{i}.w_up"))?,
            w_down: take(&format!("layers.{i}.w_down"))?,
        });
    }
    let final_norm = take("final_norm")?;
    let params = Parameters {
        token_embedding,
        layers,
        final_norm,
    };
    check_shapes(&ckpt.config, &params)?;
    Ok((ckpt.config, params))
}

fn check_shapes(cfg: &EncoderConfig, params: &Parameters) -> Result<()> {
    let h = cfg.hidden_dim;
    let expect = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
        if t.shape() != shape {
            return Err(Error::Data(format!(
                "checkpoint tensor {name}: shape {:?}, expected {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(())
    };
    expect(
        "token_embedding",
        &params.token_embedding,
        &[cfg.vocab_size, h],
    )?;
    if params.layers.len() != cfg.num_layers {
        return Err(Error::Data(format!(
            "checkpoint has {} layers, config says {}",
            params.layers.len(),
            cfg.num_layers
        )));
    }
    for (i, l) in params.layers.iter().enumerate() {
        expect(&format!("layers.{i}.attn_norm"), &l.attn_norm, &[1, h])?;
        expect(&format!("layers.{i}.wq"), &l.wq, &[h, h])?;
        expect(&format!("layers.{i}.wk"), &l.wk, &[h, h])?;
        expect(&format!("layers.{i}.wv"), &l.wv, &[h, h])?;
        expect(&format!("layers.{i}.wo"), &l.wo, &[h, h])?;
        expect(&format!("layers.{i}.ffn_norm"), &l.ffn_norm, &[1, h])?;
        expect(
            &format!("layers.{i}.w_gate"),
            &l.w_gate,
            &[h, cfg.intermediate_dim],
        )?;
        expect(
            &format!("layers.{i}.w_up"),
            &l.w_up,
            &[h, cfg.intermediate_dim],
        )?;
        expect(
            &format!("layers.{i}.w_down"),
            &l.w_down,
            &[cfg.intermediate_dim, h],
        )?;
    }
    expect("final_norm", &params.final_norm, &[1, h])?;
    Ok(())
}
