//! Encoder checkpoints.
//!
//! ```text
//! 0..4    magic "LFTK"
//! 4..8    version (u32 LE, = 1)
//! 8..16   header length in bytes (u64 LE)
//! ..      header: JSON with the model config, optional training config and
//!         scalar state, and a manifest of (name, shape, offset) entries
//! ..      payload: float32 LE arrays; offsets are relative to payload start
//! ```
//!
//! Encoder parameters are stored under `params.<name>`; a full training
//! state adds the Adam moments as `adam_m.<name>` and `adam_v.<name>`.
//! Scalars (step, temperature, its Adam moments) live in the header, where
//! JSON keeps `f64` values exact.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LiftError, Result};
use crate::loss::Temperature;
use crate::train::{AdamState, LossStats, ScalarAdam, TrainConfig, TrainState};
use crate::util::write_atomic;
use crate::vit::{EncoderParams, ViTConfig};

const MAGIC: &[u8; 4] = b"LFTK";
const VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarState {
    pub step: u64,
    pub temperature: Temperature,
    pub temperature_adam: ScalarAdam,
    pub stats: LossStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ViTConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<ScalarState>,
    pub tensors: Vec<TensorEntry>,
}

fn encode(
    model: &ViTConfig,
    train: Option<&TrainConfig>,
    state: Option<ScalarState>,
    groups: &[(&str, &EncoderParams<f32>)],
) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (prefix, params) in groups {
        for (info, data) in params.tensors() {
            tensors.push(TensorEntry {
                name: format!("{prefix}.{}", info.name),
                shape: info.shape,
                offset: payload.len() as u64,
            });
            for x in data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let header = CheckpointHeader {
        model: model.clone(),
        train: train.cloned(),
        state,
        tensors,
    };
    let json = serde_json::to_vec_pretty(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn save_encoder(path: impl AsRef<Path>, params: &EncoderParams<f32>) -> Result<()> {
    let bytes = encode(&params.config, None, None, &[("params", params)]);
    write_atomic(path.as_ref(), &bytes)
}

pub fn save_state(
    path: impl AsRef<Path>,
    state: &TrainState,
    train: Option<&TrainConfig>,
) -> Result<()> {
    let scalars = ScalarState {
        step: state.step,
        temperature: state.temperature,
        temperature_adam: state.temperature_adam,
        stats: state.stats,
    };
    let bytes = encode(
        &state.params.config,
        train,
        Some(scalars),
        &[
            ("params", &state.params),
            ("adam_m", &state.adam.m),
            ("adam_v", &state.adam.v),
        ],
    );
    write_atomic(path.as_ref(), &bytes)
}

/// A parsed checkpoint file.
pub struct Checkpoint {
    pub header: CheckpointHeader,
    payload: Vec<u8>,
    index: HashMap<String, usize>,
}

impl Checkpoint {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| LiftError::io(path, e))?;
        let bad = |reason: String| LiftError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < PREFIX_LEN || &bytes[0..4] != MAGIC {
            return Err(bad("missing LFTK magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = PREFIX_LEN
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header extends past end of file".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])
            .map_err(|e| bad(e.to_string()))?;
        let payload = bytes[header_end..].to_vec();
        let mut index = HashMap::new();
        for (i, t) in header.tensors.iter().enumerate() {
            let len = t.shape.iter().product::<usize>() * 4;
            if t.offset as usize + len > payload.len() {
                return Err(bad(format!(
                    "tensor {} extends past end of payload",
                    t.name
                )));
            }
            index.insert(t.name.clone(), i);
        }
        Ok(Self {
            header,
            payload,
            index,
        })
    }

    fn fill(&self, prefix: &str, into: &mut EncoderParams<f32>) -> std::result::Result<(), String> {
        for (info, data) in into.tensors_mut() {
            let name = format!("{prefix}.{}", info.name);
            let entry = self
                .index
                .get(&name)
                .map(|&i| &self.header.tensors[i])
                .ok_or_else(|| format!("missing tensor {name}"))?;
            if entry.shape != info.shape {
                return Err(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    entry.shape, info.shape
                ));
            }
            let start = entry.offset as usize;
            for (dst, chunk) in data.iter_mut().zip(self.payload[start..].chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        Ok(())
    }

    pub fn encoder(&self) -> std::result::Result<EncoderParams<f32>, String> {
        let mut params =
            EncoderParams::<f32>::zeros(&self.header.model).map_err(|e| e.to_string())?;
        self.fill("params", &mut params)?;
        Ok(params)
    }

    pub fn train_state(&self) -> std::result::Result<TrainState, String> {
        let scalars = self
            .header
            .state
            .clone()
            .ok_or("checkpoint holds no training state")?;
        let params = self.encoder()?;
        let mut adam = AdamState::new(&params);
        self.fill("adam_m", &mut adam.m)?;
        self.fill("adam_v", &mut adam.v)?;
        Ok(TrainState {
            step: scalars.step,
            params,
            adam,
            temperature: scalars.temperature,
            temperature_adam: scalars.temperature_adam,
            stats: scalars.stats,
        })
    }
}

pub fn load_encoder(path: impl AsRef<Path>) -> Result<EncoderParams<f32>> {
    let path = path.as_ref();
    Checkpoint::read(path)?
        .encoder()
        .map_err(|reason| LiftError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
}

pub fn load_state(path: impl AsRef<Path>) -> Result<(TrainState, Option<TrainConfig>)> {
    let path = path.as_ref();
    let ckpt = Checkpoint::read(path)?;
    let state = ckpt.train_state().map_err(|reason| LiftError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })?;
    Ok((state, ckpt.header.train))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::init_params;

    fn cfg() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            width: 8,
            depth: 2,
            heads: 2,
            head_dim: 4,
            ff_width: 16,
            embed_dim: 4,
            head_hidden: Some(6),
        }
    }

    #[test]
    fn encoder_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_params::<f32>(&cfg(), 1).unwrap();
        let path = dir.path().join("e.lftk");
        save_encoder(&path, &p).unwrap();
        assert_eq!(load_encoder(&path).unwrap(), p);
        assert!(load_state(&path).is_err());
    }

    #[test]
    fn state_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let train = TrainConfig::default();
        let mut state = TrainState::new(&cfg(), &train).unwrap();
        state.step = 17;
        state.temperature.log_scale = 2.718281828459045;
        state.temperature_adam = ScalarAdam {
            m: 0.1 + 0.2,
            v: 1e-300,
        };
        state.stats.ema = std::f64::consts::PI;
        for (_, d) in state.adam.v.tensors_mut() {
            d.iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x = i as f32 * 1.1e-7);
        }
        let path = dir.path().join("s.lftk");
        save_state(&path, &state, Some(&train)).unwrap();
        let (back, train_back) = load_state(&path).unwrap();
        assert_eq!(back, state);
        assert_eq!(train_back, Some(train));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn scalars_roundtrip_bitwise(a in proptest::num::f64::NORMAL, b in proptest::num::f64::POSITIVE) {
            let dir = tempfile::tempdir().unwrap();
            let mut state = TrainState::new(&cfg(), &TrainConfig::default()).unwrap();
            state.temperature.log_scale = a;
            state.temperature_adam = ScalarAdam { m: a, v: b };
            let path = dir.path().join("s.lftk");
            save_state(&path, &state, None).unwrap();
            let (back, _) = load_state(&path).unwrap();
            proptest::prop_assert_eq!(back.temperature.log_scale.to_bits(), a.to_bits());
            proptest::prop_assert_eq!(back.temperature_adam.v.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.lftk");
        fs::write(&path, b"LFTX....").unwrap();
        assert!(matches!(
            load_encoder(&path),
            Err(LiftError::Checkpoint { .. })
        ));
        let p = init_params::<f32>(&cfg(), 1).unwrap();
        save_encoder(&path, &p).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_encoder(&path),
            Err(LiftError::Checkpoint { .. })
        ));
    }
}
