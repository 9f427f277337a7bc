use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{SceneGeometry, SceneRecord};
use crate::geometry::{CameraPose, Intrinsics};
use crate::tensor::blob::{read_tensor_file, write_tensor_file, BlobError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error("{path}: malformed manifest: {message}")]
    Manifest { path: String, message: String },
    #[error("{path}: expected shape {expected:?}, found {found:?}")]
    Shape {
        path: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{0}: no scene_* directories")]
    Empty(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `manifest.json` of one scene directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub k: usize,
    pub inputs: usize,
    pub intrinsics: Intrinsics,
    /// Camera-to-world `[R | t]`, row-major.
    pub poses: Vec<[f64; 12]>,
    pub images: Vec<String>,
    pub masks: Vec<String>,
    pub occupancy: String,
    pub albedo: String,
    pub dot: Option<[f64; 3]>,
}

pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("scene_{index:05}"))
}

pub fn write_scene(dir: &Path, record: &SceneRecord) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let k = record.k();
    let manifest = Manifest {
        seed: record.seed,
        k,
        inputs: record.inputs,
        intrinsics: record.intrinsics,
        poses: record.poses.iter().map(|p| p.to_matrix_3x4()).collect(),
        images: (0..k).map(|i| format!("image_{i}.vltb")).collect(),
        masks: (0..k).map(|i| format!("mask_{i}.vltb")).collect(),
        occupancy: "occupancy.vltb".into(),
        albedo: "albedo.vltb".into(),
        dot: record.geometry.dot,
    };
    for (name, t) in manifest.images.iter().zip(&record.images) {
        write_tensor_file(&dir.join(name), t)?;
    }
    for (name, t) in manifest.masks.iter().zip(&record.masks) {
        write_tensor_file(&dir.join(name), t)?;
    }
    write_tensor_file(&dir.join(&manifest.occupancy), &record.geometry.occupancy)?;
    write_tensor_file(&dir.join(&manifest.albedo), &record.geometry.albedo)?;
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))
}

fn load(path: &Path, expected: &[usize]) -> Result<Tensor<f32>, DataError> {
    let t = read_tensor_file(path)?
        .exact::<f32>()
        .map_err(|e| e.in_file(path))?;
    if t.shape() != expected {
        return Err(DataError::Shape {
            path: path.display().to_string(),
            expected: expected.to_vec(),
            found: t.shape().to_vec(),
        });
    }
    Ok(t)
}

pub fn read_scene(dir: &Path) -> Result<SceneRecord, DataError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let bad = |message: String| DataError::Manifest {
        path: path.display().to_string(),
        message,
    };
    let m: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if m.poses.len() != m.k || m.images.len() != m.k || m.masks.len() != m.k {
        return Err(bad(format!(
            "k = {} but {} poses, {} images, {} masks",
            m.k,
            m.poses.len(),
            m.images.len(),
            m.masks.len()
        )));
    }
    if m.inputs == 0 || m.inputs > m.k {
        return Err(bad(format!("inputs = {} outside 1..={}", m.inputs, m.k)));
    }
    if !m.intrinsics.is_valid() {
        return Err(bad("invalid intrinsics".into()));
    }
    let poses = m
        .poses
        .iter()
        .map(|p| Some(CameraPose::from_matrix_3x4(p)).filter(|p| p.is_valid(1e-6)))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("pose is not a rigid transform".into()))?;
    let res = m.intrinsics.res;
    let images = m
        .images
        .iter()
        .map(|f| load(&dir.join(f), &[res, res, 3]))
        .collect::<Result<_, _>>()?;
    let masks = m
        .masks
        .iter()
        .map(|f| load(&dir.join(f), &[res, res]))
        .collect::<Result<_, _>>()?;
    let occ_path = dir.join(&m.occupancy);
    let occupancy = read_tensor_file(&occ_path)?
        .exact::<f32>()
        .map_err(|e| e.in_file(&occ_path))?;
    let s = occupancy.shape().to_vec();
    if s.len() != 3 || s[0] != s[1] || s[1] != s[2] {
        return Err(DataError::Shape {
            path: occ_path.display().to_string(),
            expected: vec![s.first().copied().unwrap_or(0); 3],
            found: s,
        });
    }
    let albedo = load(&dir.join(&m.albedo), &[s[0], s[0], s[0], 3])?;
    Ok(SceneRecord {
        seed: m.seed,
        inputs: m.inputs,
        intrinsics: m.intrinsics,
        poses,
        images,
        masks,
        geometry: SceneGeometry {
            occupancy,
            albedo,
            dot: m.dot,
        },
    })
}

pub fn write_dataset(root: &Path, records: &[SceneRecord]) -> Result<(), DataError> {
    for (i, r) in records.iter().enumerate() {
        write_scene(&scene_dir(root, i), r)?;
    }
    Ok(())
}

/// Every `scene_*` directory under `root`, in name order.
pub fn read_dataset(root: &Path) -> Result<Vec<SceneRecord>, DataError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("scene_") && e.path().is_dir())
        .map(|e| e.path())
        .collect();
    if dirs.is_empty() {
        return Err(DataError::Empty(root.display().to_string()));
    }
    dirs.sort();
    dirs.iter().map(|d| read_scene(d)).collect()
}
