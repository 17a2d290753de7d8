use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{generate_scene, Scene, SceneParams};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::Polygon;

pub const TRAIN_FRACTION: f64 = 0.8;
const MANIFEST: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub params: SceneParams,
    pub scenes: Vec<ManifestEntry>,
}

/// On-disk form of one scene; the raster is base64 of little-endian f32.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    seed: u64,
    width: usize,
    height: usize,
    channels: usize,
    polygons: Vec<Polygon>,
    raster: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Scene> {
        self.manifest
            .scenes
            .iter()
            .zip(&self.scenes)
            .filter(|(e, _)| e.split == split)
            .map(|(_, s)| s)
            .collect()
    }
}

/// Per-scene seed derived from the dataset seed (splitmix64 of the pair).
pub fn scene_seed(dataset_seed: u64, index: usize) -> u64 {
    let mut z = dataset_seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded shuffle; the first `round(0.8 n)` indices train, the rest validate.
pub fn split_indices(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5B11));
    let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
    let mut out = vec![Split::Val; n];
    for &i in &order[..n_train] {
        out[i] = Split::Train;
    }
    out
}

fn scene_file_name(i: usize) -> String {
    format!("scene_{i:05}.json")
}

/// Generates `count` scenes in memory with their split assignment.
pub fn generate_dataset(params: &SceneParams, seed: u64, count: usize) -> Result<Dataset> {
    params.validate()?;
    let splits = split_indices(count, seed);
    let mut entries = Vec::with_capacity(count);
    let mut scenes = Vec::with_capacity(count);
    for (i, split) in splits.into_iter().enumerate() {
        let s = scene_seed(seed, i);
        scenes.push(generate_scene(params, s)?);
        entries.push(ManifestEntry {
            file: scene_file_name(i),
            seed: s,
            split,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        params: params.clone(),
        scenes: entries,
    };
    Ok(Dataset { manifest, scenes })
}

/// Generates `count` scenes into `dir` with a manifest.
pub fn save_dataset(dir: &Path, params: &SceneParams, seed: u64, count: usize) -> Result<Manifest> {
    let ds = generate_dataset(params, seed, count)?;
    fs::create_dir_all(dir)?;
    for (entry, scene) in ds.manifest.scenes.iter().zip(&ds.scenes) {
        write_scene(&dir.join(&entry.file), scene)?;
    }
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&ds.manifest)?)?;
    Ok(ds.manifest)
}

fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * scene.raster.len());
    for v in scene.raster.data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let file = SceneFile {
        seed: scene.seed,
        width: scene.width(),
        height: scene.height(),
        channels: scene.raster.shape()[0],
        polygons: scene.polygons.clone(),
        raster: STANDARD.encode(bytes),
    };
    fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

fn data_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {msg}", path.display()))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = fs::read(path).map_err(|e| data_err(path, e))?;
    let file: SceneFile = serde_json::from_slice(&text).map_err(|e| data_err(path, e))?;
    let bytes = STANDARD.decode(&file.raster).map_err(|e| data_err(path, e))?;
    let n = file.channels * file.width * file.height;
    if bytes.len() != 4 * n {
        return Err(data_err(
            path,
            format!("raster has {} bytes, expected {} for {}x{}x{}", bytes.len(), 4 * n, file.channels, file.height, file.width),
        ));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(data_err(path, "raster contains non-finite values"));
    }
    let raster = Tensor::new(vec![file.channels, file.height, file.width], data).map_err(|e| data_err(path, e))?;
    Ok(Scene {
        seed: file.seed,
        raster,
        polygons: file.polygons,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath: PathBuf = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| data_err(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| data_err(&mpath, e))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(data_err(&mpath, format!("unsupported manifest version {}", manifest.version)));
    }
    let scenes = manifest
        .scenes
        .iter()
        .map(|e| load_scene(&dir.join(&e.file)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, scenes })
}
