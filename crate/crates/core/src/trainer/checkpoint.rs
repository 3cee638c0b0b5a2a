//! Checkpoint files: one JSON header line, then every parameter array as
//! little-endian f64 in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::NormStats;
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig};

pub const FORMAT: &str = "modstream-checkpoint-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    Stage1,
    Stage2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

/// Which comparison arm produced a checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Control {
    #[default]
    None,
    /// All tokens share one sequence and one set of blocks.
    Fused,
    /// Streams and expert trained jointly in a single phase.
    SingleStage,
    /// No future-prediction loss.
    NoPred,
}

impl Control {
    pub const ALL: [Control; 4] = [Control::None, Control::Fused, Control::SingleStage, Control::NoPred];

    pub fn name(self) -> &'static str {
        match self {
            Control::None => "none",
            Control::Fused => "fused",
            Control::SingleStage => "single-stage",
            Control::NoPred => "no-pred",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown control `{s}` (expected none, fused, single-stage or no-pred)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub control: Control,
    pub lambda_phy: f64,
    pub config: ModelConfig,
    pub norm_stats: NormStats,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    stage: Stage,
    control: Control,
    lambda_phy: f64,
    config: ModelConfig,
    norm_stats: NormStats,
    arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for p in self.params.iter() {
            arrays.push(ArrayEntry { name: p.name.clone(), group: p.group.clone(), shape: p.value.shape().to_vec(), offset });
            offset += 8 * p.value.numel();
        }
        let header = Header {
            format: FORMAT.into(),
            stage: self.stage,
            control: self.control,
            lambda_phy: self.lambda_phy,
            config: self.config.clone(),
            norm_stats: self.norm_stats.clone(),
            arrays,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.reserve(offset);
        for p in self.params.iter() {
            for x in p.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses and validates a checkpoint. Array names, groups and shapes must
    /// be exactly those the stored model configuration defines.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{}`", header.format)));
        }
        header.config.validate().map_err(|e| Error::Checkpoint(format!("stored model config: {e}")))?;
        let data = &bytes[nl + 1..];
        let reference = init_params(&header.config, 0)?;
        if reference.len() != header.arrays.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} arrays, the model config defines {}",
                header.arrays.len(),
                reference.len()
            )));
        }
        let mut params = ParamStore::new();
        let mut expected_offset = 0;
        for (entry, r) in header.arrays.iter().zip(reference.iter()) {
            if entry.name != r.name || entry.group != r.group {
                return Err(Error::Checkpoint(format!("array `{}` ({}) where `{}` ({}) expected", entry.name, entry.group, r.name, r.group)));
            }
            if entry.shape != r.value.shape() {
                return Err(Error::Checkpoint(format!("array `{}` has shape {:?}, config requires {:?}", entry.name, entry.shape, r.value.shape())));
            }
            if entry.offset != expected_offset {
                return Err(Error::Checkpoint(format!("array `{}` at offset {}, expected {expected_offset}", entry.name, entry.offset)));
            }
            let n = r.value.numel();
            let end = entry.offset + 8 * n;
            let raw = data
                .get(entry.offset..end)
                .ok_or_else(|| Error::Checkpoint(format!("array `{}` runs past the end of the file", entry.name)))?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.insert(entry.name.clone(), entry.group.clone(), Tensor::new(entry.shape.clone(), values)?)?;
            expected_offset = end;
        }
        if data.len() != expected_offset {
            return Err(Error::Checkpoint(format!("{} trailing bytes after the last array", data.len() - expected_offset)));
        }
        Ok(Self {
            stage: header.stage,
            control: header.control,
            lambda_phy: header.lambda_phy,
            config: header.config,
            norm_stats: header.norm_stats,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
