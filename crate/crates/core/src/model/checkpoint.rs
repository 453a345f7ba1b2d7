use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CamoeModel, ModelConfig, TaskGrouping};
use crate::error::{invalid, Result};
use crate::tensorcore::Tensor;

const FORMAT: &str = "camoe-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// JSON container. Floats are written in shortest round-trip form, so a
/// save/load cycle reproduces every parameter bit.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    grouping: TaskGrouping,
    config: ModelConfig,
    params: Vec<NamedTensor>,
    bn_running_mean: Vec<f64>,
    bn_running_var: Vec<f64>,
    temperatures: Vec<f64>,
}

impl CamoeModel {
    pub fn to_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            grouping: self.grouping.clone(),
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
            bn_running_mean: self.bn_mean.clone(),
            bn_running_var: self.bn_var.clone(),
            temperatures: self.temperatures.clone(),
        };
        Ok(serde_json::to_string_pretty(&ckpt)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(s)?;
        if ckpt.format != FORMAT || ckpt.version != VERSION {
            return Err(invalid(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut model = CamoeModel::build(ckpt.grouping, ckpt.config, 0)?;
        if ckpt.params.len() != model.params.len() {
            return Err(invalid(format!(
                "checkpoint has {} parameters, architecture needs {}",
                ckpt.params.len(),
                model.params.len()
            )));
        }
        for (slot, saved) in model.params.iter_mut().zip(ckpt.params) {
            if slot.name != saved.name || slot.value.shape() != saved.shape.as_slice() {
                return Err(invalid(format!(
                    "checkpoint parameter `{}` {:?} does not match `{}` {:?}",
                    saved.name,
                    saved.shape,
                    slot.name,
                    slot.value.shape()
                )));
            }
            slot.value = Tensor::new(saved.shape, saved.data)?;
        }
        let e = model.config.embed_dim;
        if ckpt.bn_running_mean.len() != e
            || ckpt.bn_running_var.len() != e
            || ckpt.temperatures.len() != model.num_tasks()
        {
            return Err(invalid(
                "checkpoint running statistics or temperatures have the wrong length",
            ));
        }
        model.bn_mean = ckpt.bn_running_mean;
        model.bn_var = ckpt.bn_running_var;
        for (t, temp) in ckpt.temperatures.into_iter().enumerate() {
            model.set_temperature(t, temp)?;
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &CamoeModel, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_json()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CamoeModel> {
    CamoeModel::from_json(&std::fs::read_to_string(path)?)
}
