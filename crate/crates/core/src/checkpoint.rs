//! On-disk checkpoints: a directory with `meta.json`, stage-1 tensors and optional prior tensors.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{PvqaeError, Result};
use crate::model::Pvqae;
use crate::prior::{PriorShape, PriorTransformer};

pub const FORMAT_VERSION: u32 = 1;
const META: &str = "meta.json";
const STAGE1: &str = "stage1.safetensors";
const PRIOR: &str = "prior.safetensors";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "stage1")]
    Stage1,
    #[serde(rename = "stage1+prior")]
    Stage1Prior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub stage: Stage,
    pub config: RunConfig,
    /// Category registry; CLS slot `k` belongs to `categories[k]` in per-class mode.
    pub categories: Vec<String>,
    /// Hash of the stage-1 parameters, checked on load.
    pub stage1_hash: String,
    pub prior: Option<PriorShape>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Pvqae,
    pub prior: Option<PriorTransformer>,
}

impl std::fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Checkpoint").field("meta", &self.meta).finish_non_exhaustive()
    }
}

fn write_tensors(map: impl IntoIterator<Item = (String, Tensor)>, path: &Path) -> Result<()> {
    let map: HashMap<String, Tensor> = map.into_iter().collect();
    candle_core::safetensors::save(&map, path).map_err(|e| match e {
        candle_core::Error::Io(io) => PvqaeError::io(path, io),
        other => PvqaeError::Candle(other),
    })
}

fn read_tensors(path: &Path, device: &Device) -> Result<HashMap<String, Tensor>> {
    if !path.is_file() {
        return Err(PvqaeError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing tensor file"),
        ));
    }
    candle_core::safetensors::load(path, device).map_err(|e| PvqaeError::Integrity(format!("{}: {e}", path.display())))
}

impl Checkpoint {
    pub fn new(model: Pvqae, config: RunConfig, categories: Vec<String>) -> Result<Self> {
        let stage1_hash = model.parameter_hash()?;
        Ok(Self {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                stage: Stage::Stage1,
                config,
                categories,
                stage1_hash,
                prior: None,
            },
            model,
            prior: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.meta.config
    }

    pub fn with_prior(mut self, prior: PriorTransformer) -> Self {
        self.meta.prior = Some(prior.shape());
        self.meta.stage = Stage::Stage1Prior;
        self.prior = Some(prior);
        self
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| PvqaeError::io(dir, e))?;
        write_tensors(self.model.named_tensors(), &dir.join(STAGE1))?;
        let prior_path = dir.join(PRIOR);
        match &self.prior {
            Some(p) => write_tensors(p.params().named_tensors(), &prior_path)?,
            None if prior_path.exists() => fs::remove_file(&prior_path).map_err(|e| PvqaeError::io(&prior_path, e))?,
            None => {}
        }
        let meta_path = dir.join(META);
        let text = serde_json::to_string_pretty(&self.meta)?;
        fs::write(&meta_path, text).map_err(|e| PvqaeError::io(&meta_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META);
        let text = fs::read_to_string(&meta_path).map_err(|e| PvqaeError::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)
            .map_err(|e| PvqaeError::Integrity(format!("{}: {e}", meta_path.display())))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(PvqaeError::Integrity(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        let device = Device::Cpu;
        let model = Pvqae::new(&meta.config, &device)?;
        model.load_tensors(&read_tensors(&dir.join(STAGE1), &device)?)?;
        let hash = model.parameter_hash()?;
        if hash != meta.stage1_hash {
            return Err(PvqaeError::Integrity(format!(
                "stage-1 parameter hash {hash} does not match recorded {}",
                meta.stage1_hash
            )));
        }
        let prior = match (meta.stage, meta.prior) {
            (Stage::Stage1Prior, Some(shape)) => {
                let p = PriorTransformer::new(meta.config.seed, shape, &device)?;
                let tensors = read_tensors(&dir.join(PRIOR), &device)?;
                if tensors.len() != p.params().len() {
                    return Err(PvqaeError::Integrity("prior tensor count mismatch".into()));
                }
                p.params()
                    .load_named(&tensors)
                    .map_err(|e| PvqaeError::Integrity(e.to_string()))?;
                Some(p)
            }
            (Stage::Stage1Prior, None) => {
                return Err(PvqaeError::Integrity("prior stage recorded without a prior shape".into()))
            }
            (Stage::Stage1, _) => None,
        };
        Ok(Self { meta, model, prior })
    }
}
