//! Checkpoint container: a JSON manifest describing the architecture,
//! training state, and blob layout, plus a raw little-endian f32 payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AdamState, Mlp, Mode, Scalar, TrainConfig};
use crate::error::{Error, Result};
use crate::transforms::{ColorTables, InputMode, PcaModel, TransformState};

const FORMAT: &str = "hsid-checkpoint-v1";

/// Blob layout entry: section name and number of f32 values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub mode: InputMode,
    /// Class index -> individual id.
    pub class_ids: Vec<u16>,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub dropout_p: f64,
    pub epoch: usize,
    pub adam_t: u64,
    pub train_config: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pca: Option<PcaModel>,
    /// Path of the parameter blob, relative to the manifest file.
    pub payload: String,
    /// Blob sections in file order.
    pub sections: Vec<Section>,
}

/// A complete training snapshot: model parameters, running statistics,
/// feature stats, Adam moments, plus the fitted transform state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    learnable: Vec<f32>,
    running: Vec<f32>,
    feat_mean: Vec<f32>,
    feat_std: Vec<f32>,
    adam_m: Vec<f32>,
    adam_v: Vec<f32>,
}

fn to_f32_vec<T: Scalar>(values: &[T]) -> Vec<f32> {
    values.iter().map(|v| v.to_f64().unwrap() as f32).collect()
}

impl Checkpoint {
    /// Snapshots a model and optimizer state into the storable form.
    /// Parameters are stored as f32, the network's compute precision.
    #[allow(clippy::too_many_arguments)]
    pub fn from_model<T: Scalar>(
        model: &Mlp<T>,
        adam: &AdamState<T>,
        epoch: usize,
        train_config: &TrainConfig,
        mode: InputMode,
        class_ids: Vec<u16>,
        pca: Option<PcaModel>,
    ) -> Checkpoint {
        let learnable = to_f32_vec(&model.learnable_flat());
        let running = to_f32_vec(&model.running_flat());
        let feat_mean = to_f32_vec(model.feat_mean.as_slice().unwrap());
        let feat_std = to_f32_vec(model.feat_std.as_slice().unwrap());
        let adam_m = to_f32_vec(&adam.m);
        let adam_v = to_f32_vec(&adam.v);
        let sections = vec![
            Section { name: "learnable".into(), count: learnable.len() },
            Section { name: "running".into(), count: running.len() },
            Section { name: "feat_mean".into(), count: feat_mean.len() },
            Section { name: "feat_std".into(), count: feat_std.len() },
            Section { name: "adam_m".into(), count: adam_m.len() },
            Section { name: "adam_v".into(), count: adam_v.len() },
        ];
        Checkpoint {
            manifest: CheckpointManifest {
                format: FORMAT.into(),
                mode,
                class_ids,
                input_dim: model.input_dim(),
                hidden: model.hidden_widths(),
                num_classes: model.num_classes(),
                dropout_p: model.dropout_p,
                epoch,
                adam_t: adam.t,
                train_config: train_config.clone(),
                pca,
                payload: String::new(),
                sections,
            },
            learnable,
            running,
            feat_mean,
            feat_std,
            adam_m,
            adam_v,
        }
    }

    /// Rebuilds the model (eval mode) and optimizer state.
    pub fn to_model(&self) -> Result<(Mlp<f32>, AdamState<f32>)> {
        let m = &self.manifest;
        let mut model: Mlp<f32> = Mlp::new(
            m.input_dim,
            &m.hidden,
            m.num_classes,
            m.dropout_p,
            m.train_config.seed,
        )?;
        model.set_learnable_flat(&self.learnable)?;
        model.set_running_flat(&self.running)?;
        model.set_feature_stats(
            ndarray::Array1::from_vec(self.feat_mean.clone()),
            ndarray::Array1::from_vec(self.feat_std.clone()),
        )?;
        model.set_mode(Mode::Eval);
        let adam = AdamState {
            m: self.adam_m.clone(),
            v: self.adam_v.clone(),
            t: m.adam_t,
        };
        Ok((model, adam))
    }

    /// Rebuilds the representation transform this checkpoint was trained
    /// with, for data on the given wavelength grid.
    pub fn transform_state(
        &self,
        wavelengths_nm: &[f64],
        tables: &ColorTables,
    ) -> Result<TransformState> {
        match self.manifest.mode {
            InputMode::Hs => Ok(TransformState::Hs),
            InputMode::Pca => TransformState::from_mode(
                InputMode::Pca,
                self.manifest.pca.clone(),
                None,
            ),
            InputMode::Rgb => Ok(TransformState::Rgb(tables.synthesizer(wavelengths_nm)?)),
        }
    }

    fn blob(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        for section in [
            &self.learnable,
            &self.running,
            &self.feat_mean,
            &self.feat_std,
            &self.adam_m,
            &self.adam_v,
        ] {
            for v in section {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    /// Writes `<stem>.ckpt.json` + `<stem>.ckpt.bin`.
    pub fn save(&self, path: &Path) -> Result<PathBuf> {
        let (manifest_path, blob_path, blob_name) = checkpoint_paths(path);
        let mut manifest = self.manifest.clone();
        manifest.payload = blob_name;
        fs::write(&blob_path, self.blob()).map_err(|e| Error::io(&blob_path, e))?;
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(manifest_path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let (manifest_path, _, _) = checkpoint_paths(path);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT {
            return Err(Error::Header {
                path: manifest_path,
                reason: format!("unsupported checkpoint format {:?}", manifest.format),
            });
        }
        let blob_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.payload);
        let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let total: usize = manifest.sections.iter().map(|s| s.count).sum();
        if bytes.len() != total * 4 {
            return Err(Error::PayloadSize {
                path: blob_path,
                expected: (total * 4) as u64,
                actual: bytes.len() as u64,
            });
        }
        let mut values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut take = |name: &str| -> Result<Vec<f32>> {
            let section = manifest
                .sections
                .iter()
                .find(|s| s.name == name)
                .ok_or_else(|| Error::Header {
                    path: manifest_path.clone(),
                    reason: format!("missing blob section {name:?}"),
                })?;
            Ok(values.by_ref().take(section.count).collect())
        };
        // Sections are read in file order, which save() fixes.
        let learnable = take("learnable")?;
        let running = take("running")?;
        let feat_mean = take("feat_mean")?;
        let feat_std = take("feat_std")?;
        let adam_m = take("adam_m")?;
        let adam_v = take("adam_v")?;
        Ok(Checkpoint {
            manifest,
            learnable,
            running,
            feat_mean,
            feat_std,
            adam_m,
            adam_v,
        })
    }
}

fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf, String) {
    let s = path.to_string_lossy();
    let stem = if let Some(stripped) = s.strip_suffix(".ckpt.json") {
        stripped.to_string()
    } else {
        s.to_string()
    };
    let manifest = PathBuf::from(format!("{stem}.ckpt.json"));
    let blob = PathBuf::from(format!("{stem}.ckpt.bin"));
    let blob_name = blob
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("{stem}.ckpt.bin"));
    (manifest, blob, blob_name)
}
