//! Model checkpoints: one SCRM file per weight matrix plus a JSON manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::content_hash;
use crate::datamodel::scrm::{load_matrix, save_matrix};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

use super::layers::{Linear, Mlp2};
use super::train::{PredictorModel, TrainConfig};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "scrl-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub feature_dim: usize,
    pub genes: usize,
    pub trained: bool,
    pub config: TrainConfig,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn train_config_hash(cfg: &TrainConfig) -> String {
    content_hash(&serde_json::to_vec(cfg).expect("config serializes"))
}

fn tensors<T: Scalar>(model: &PredictorModel<T>) -> Vec<(String, Matrix<T>)> {
    let mut out = Vec::new();
    for (prefix, net) in [
        ("regressor", &model.regressor),
        ("image_head", &model.image_head),
        ("expr_head", &model.expr_head),
    ] {
        for (layer, l) in [("l1", &net.l1), ("l2", &net.l2)] {
            out.push((format!("{prefix}.{layer}.w"), l.w.clone()));
            let b = Matrix::new(1, l.b.len(), l.b.clone()).expect("bias row");
            out.push((format!("{prefix}.{layer}.b"), b));
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(model: &PredictorModel<T>, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (name, m) in tensors(model) {
        let file = format!("{name}.scrm");
        save_matrix(&m.cast::<f32>(), dir.join(&file))?;
        entries.push(TensorEntry {
            name,
            file,
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        feature_dim: model.feature_dim(),
        genes: model.genes(),
        trained: model.is_trained(),
        config: model.config.clone(),
        config_hash: train_config_hash(&model.config),
        tensors: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<PredictorModel<T>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Format {
            path,
            msg: format!("unsupported checkpoint {} v{}", manifest.format, manifest.version),
        });
    }
    if manifest.config_hash != train_config_hash(&manifest.config) {
        return Err(Error::Format {
            path,
            msg: "config hash does not match the stored config".into(),
        });
    }
    let mut model = PredictorModel::<T>::untrained(manifest.feature_dim, manifest.genes, &manifest.config);
    let expected = tensors(&model);
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Schema(format!("checkpoint lists {} tensors, expected {}", manifest.tensors.len(), expected.len())));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().map(|(n, m)| (n, m.shape())).zip(&manifest.tensors) {
        if &entry.name != name {
            return Err(Error::Schema(format!("checkpoint tensor {} where {name} expected", entry.name)));
        }
        let m: Matrix<f32> = load_matrix(dir.join(&entry.file))?;
        if m.shape() != shape {
            return Err(Error::Schema(format!("{name} has shape {:?}, expected {shape:?}", m.shape())));
        }
        loaded.push(m.cast::<T>());
    }
    let mut it = loaded.into_iter();
    for net in [&mut model.regressor, &mut model.image_head, &mut model.expr_head] {
        *net = Mlp2 {
            l1: layer(&mut it),
            l2: layer(&mut it),
        };
    }
    model.trained = manifest.trained;
    Ok(model)
}

fn layer<T: Scalar>(it: &mut impl Iterator<Item = Matrix<T>>) -> Linear<T> {
    let w = it.next().expect("weight");
    let b = it.next().expect("bias").into_data();
    Linear::from_parts(w, b)
}
