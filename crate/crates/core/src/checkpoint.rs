//! Stage checkpoints: parameters, optimiser moments and run metadata in one
//! safetensors file, written atomically.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_FORMAT: &str = "w2s-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const PARAM_PREFIX: &str = "param/";
const OPTIM_PREFIX: &str = "state/";
const NOTE_PREFIX: &str = "note.";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// `stage1`, `stage2` or `stage3`.
    pub stage: String,
    pub step: usize,
    /// The run configuration that produced the checkpoint, as JSON.
    pub config: String,
    pub params: HashMap<String, Tensor>,
    pub optimizer: HashMap<String, Tensor>,
    /// Free-form string metadata, e.g. the speaker list of a Stage-2 run.
    pub notes: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_store(stage: &str, step: usize, config: String, store: &ParamStore, prefixes: &[&str]) -> Self {
        let params = store
            .snapshot()
            .into_iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .collect();
        Self { stage: stage.into(), step, config, params, optimizer: HashMap::new(), notes: BTreeMap::new() }
    }

    pub fn with_optimizer(mut self, state: BTreeMap<String, Tensor>) -> Self {
        self.optimizer.extend(state);
        self
    }

    /// Copy every parameter under `prefix` into `store`.
    pub fn restore(&self, store: &ParamStore, prefix: &str) -> Result<()> {
        store.load(&self.params, prefix)
    }

    /// Write to a temporary sibling, then rename over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        tensors.extend(self.params.iter().map(|(k, v)| (format!("{PARAM_PREFIX}{k}"), v)));
        tensors.extend(self.optimizer.iter().map(|(k, v)| (format!("{OPTIM_PREFIX}{k}"), v)));
        let mut metadata = HashMap::from([
            ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
            ("version".to_string(), CHECKPOINT_VERSION.to_string()),
            ("stage".to_string(), self.stage.clone()),
            ("step".to_string(), self.step.to_string()),
            ("config".to_string(), self.config.clone()),
        ]);
        metadata.extend(self.notes.iter().map(|(k, v)| (format!("{NOTE_PREFIX}{k}"), v.clone())));
        let bytes = safetensors::serialize(tensors, Some(metadata)).map_err(|e| Error::format(path, e.to_string()))?;
        let tmp = temp_sibling(path);
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        let meta = header.metadata().clone().unwrap_or_default();
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::format(path, format!("missing metadata '{k}'")));
        if field("format")? != CHECKPOINT_FORMAT {
            return Err(Error::format(path, "not a checkpoint"));
        }
        let version: u32 = field("version")?.parse().map_err(|_| Error::format(path, "bad version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let step = field("step")?.parse().map_err(|_| Error::format(path, "bad step"))?;
        let all = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let (mut params, mut optimizer) = (HashMap::new(), HashMap::new());
        for (k, v) in all {
            if let Some(name) = k.strip_prefix(PARAM_PREFIX) {
                params.insert(name.to_string(), v);
            } else if let Some(name) = k.strip_prefix(OPTIM_PREFIX) {
                optimizer.insert(name.to_string(), v);
            } else {
                return Err(Error::format(path, format!("unexpected tensor '{k}'")));
            }
        }
        let notes = meta.iter().filter_map(|(k, v)| k.strip_prefix(NOTE_PREFIX).map(|n| (n.to_string(), v.clone()))).collect();
        Ok(Self { stage: field("stage")?, step, config: field("config")?, params, optimizer, notes })
    }
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}
