//! Checkpoint directory: `manifest.json` plus one binary matrix per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};

use super::item_dnn::FeatureTable;
use super::params::Params;
use super::{Model, ModelConfig};
use crate::binio::{load_matrix, save_matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub step: u64,
    pub epoch: u64,
    /// Free-form training state (schedule, seeds, data sizes).
    #[serde(default)]
    pub state: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    /// Extra parameter-shaped groups, e.g. optimizer moments.
    pub groups: BTreeMap<String, Params<f32>>,
    pub step: u64,
    pub epoch: u64,
    pub state: serde_json::Value,
}

fn as_matrix(t: &ArrayViewD<'_, f32>) -> Array2<f32> {
    let (r, c) = match t.shape() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!("parameters are 1-d or 2-d"),
    };
    Array2::from_shape_vec((r, c), t.iter().copied().collect()).expect("size preserved")
}

fn write_group(dir: &Path, group: &str, p: &Params<f32>, entries: &mut Vec<TensorEntry>) -> Result<()> {
    for (name, t) in p.named() {
        let full = if group.is_empty() { name } else { format!("{group}/{name}") };
        let file = format!("{}.bin", full.replace('/', "__"));
        save_matrix(&dir.join(&file), &as_matrix(&t))?;
        entries.push(TensorEntry {
            name: full,
            file,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn save_checkpoint(
    dir: &Path,
    model: &Model<f32>,
    groups: &[(&str, &Params<f32>)],
    step: u64,
    epoch: u64,
    state: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    write_group(dir, "", &model.params, &mut tensors)?;
    for (g, p) in groups {
        write_group(dir, g, p, &mut tensors)?;
    }
    save_matrix(&dir.join("features.bin"), &model.features.rows)?;
    tensors.push(TensorEntry {
        name: "features".into(),
        file: "features.bin".into(),
        shape: model.features.rows.shape().to_vec(),
    });
    let manifest = Manifest {
        config: model.config.clone(),
        step,
        epoch,
        state,
        tensors,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    manifest.config.validate()?;
    let mut blobs = BTreeMap::new();
    for e in &manifest.tensors {
        let m = load_matrix(&dir.join(&e.file))?;
        let t = m
            .into_shape_with_order(IxDyn(&e.shape))
            .map_err(|err| Error::Shape(format!("{}: {err}", e.name)))?;
        blobs.insert(e.name.clone(), t);
    }
    let fill = |prefix: &str, blobs: &mut BTreeMap<String, ndarray::ArrayD<f32>>| -> Result<Params<f32>> {
        let mut p = Params::<f32>::zeros(&manifest.config);
        for (name, mut t) in p.named_mut() {
            let key = if prefix.is_empty() { name.clone() } else { format!("{prefix}/{name}") };
            let src = blobs
                .remove(&key)
                .ok_or_else(|| Error::invalid(format!("checkpoint is missing tensor {key}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Shape(format!("{key}: {:?} vs {:?}", src.shape(), t.shape())));
            }
            t.assign(&src);
        }
        Ok(p)
    };
    let params = fill("", &mut blobs)?;
    let features = blobs
        .remove("features")
        .ok_or_else(|| Error::invalid("checkpoint is missing the feature table"))?
        .into_dimensionality()
        .map_err(|e| Error::Shape(e.to_string()))?;
    let group_names: Vec<String> = blobs
        .keys()
        .filter_map(|k| k.split_once('/').map(|(g, _)| g.to_string()))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut groups = BTreeMap::new();
    for g in group_names {
        let p = fill(&g, &mut blobs)?;
        groups.insert(g, p);
    }
    let model = Model::new(manifest.config, params, FeatureTable { rows: features })?;
    Ok(Checkpoint {
        model,
        groups,
        step: manifest.step,
        epoch: manifest.epoch,
        state: manifest.state,
    })
}
