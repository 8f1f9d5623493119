//! Binary tensor container and the JSON/CSV sidecars built around it.
//!
//! Container layout, all little-endian:
//!
//! ```text
//! "FTNS" | version: u32 | rank: u32 | dims: rank × u32 | payload: Π dims × f32
//! ```
//!
//! The payload is row-major with the slowest dimension first.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::density::{Dot, RoiMask, Scene, SceneMeta};
use crate::error::{PgcError, Result};
use crate::kernel_dictionary::{DictionaryConfig, KernelDictionary};
use crate::map::Map2;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FTNS";
pub const VERSION: u32 = 1;
pub const MAX_RANK: usize = 4;

fn format_err(msg: impl Into<String>) -> PgcError {
    PgcError::Format(msg.into())
}

/// A shaped `f32` payload as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Container {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(format_err(format!("rank {} outside [1, {MAX_RANK}]", dims.len())));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(format_err(format!(
                "dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = cursor + n;
            if end > bytes.len() {
                return Err(format_err("truncated container"));
            }
            let s = &bytes[cursor..end];
            cursor = end;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(format_err("bad magic, expected FTNS"));
        }
        let read_u32 = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]);
        let version = read_u32(take(4)?);
        if version != VERSION {
            return Err(format_err(format!("unsupported container version {version}")));
        }
        let rank = read_u32(take(4)?) as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(format_err(format!("rank {rank} outside [1, {MAX_RANK}]")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(take(4)?) as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format_err("dims overflow"))?;
        let payload = take(count.checked_mul(4).ok_or_else(|| format_err("dims overflow"))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if cursor != bytes.len() {
            return Err(format_err("trailing bytes after payload"));
        }
        Container::new(dims, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        match self.dims.as_slice() {
            [c, h, w] => Tensor::from_vec(*c, *h, *w, self.data),
            [h, w] => Tensor::from_vec(1, *h, *w, self.data),
            other => Err(format_err(format!("expected rank 2 or 3, got dims {other:?}"))),
        }
    }

    pub fn into_map(self) -> Result<Map2> {
        match self.dims.as_slice() {
            [h, w] | [1, h, w] => Map2::from_vec(*h, *w, self.data.iter().map(|&v| f64::from(v)).collect()),
            other => Err(format_err(format!("expected a single-channel map, got dims {other:?}"))),
        }
    }
}

impl From<&Tensor> for Container {
    fn from(t: &Tensor) -> Self {
        let (c, h, w) = t.shape();
        Container {
            dims: vec![c, h, w],
            data: t.data().to_vec(),
        }
    }
}

impl From<&Map2> for Container {
    fn from(m: &Map2) -> Self {
        Container {
            dims: vec![m.height, m.width],
            data: m.values.iter().map(|&v| v as f32).collect(),
        }
    }
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    Container::from(t).write(path)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    Container::read(path)?.into_tensor()
}

pub fn save_map(path: &Path, m: &Map2) -> Result<()> {
    Container::from(m).write(path)
}

pub fn load_map(path: &Path) -> Result<Map2> {
    Container::read(path)?.into_map()
}

/// Rows of comma-separated reals, one image row per line.
pub fn map_to_csv(m: &Map2) -> String {
    let mut s = String::new();
    for i in 0..m.height {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn map_from_csv(text: &str) -> Result<Map2> {
    let mut values = Vec::new();
    let mut width = None;
    let mut height = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format_err(format!("line {}: {e}", lineno + 1)))?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(format_err(format!(
                    "line {} has {} values, expected {w}",
                    lineno + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        values.extend(row);
        height += 1;
    }
    let width = width.ok_or_else(|| format_err("empty CSV"))?;
    Map2::from_vec(height, width, values)
}

pub fn dots_to_csv(dots: &[Dot]) -> String {
    let mut s = String::from("x,y\n");
    for d in dots {
        s.push_str(&format!("{},{}\n", d.x, d.y));
    }
    s
}

pub fn dots_from_csv(text: &str) -> Result<Vec<Dot>> {
    let mut dots = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with('x')) {
            continue;
        }
        let mut parts = line.split(',').map(|v| v.trim().parse::<f64>());
        match (parts.next(), parts.next(), parts.next()) {
            (Some(Ok(x)), Some(Ok(y)), None) => dots.push(Dot { x, y }),
            _ => return Err(format_err(format!("line {}: expected `x,y`", lineno + 1))),
        }
    }
    Ok(dots)
}

/// JSON sidecar written next to a dictionary's containers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryMeta {
    pub config: DictionaryConfig,
    pub sample_count: usize,
    pub retained: usize,
    pub energy_ratio: f64,
    pub singular_values: Vec<f64>,
    pub sigma_grid: Vec<f64>,
}

pub struct DictionaryPaths {
    pub eigen: PathBuf,
    pub candidates: PathBuf,
    pub meta: PathBuf,
}

impl DictionaryPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            eigen: dir.join("eigen_kernels.ftns"),
            candidates: dir.join("candidates.ftns"),
            meta: dir.join("dictionary.json"),
        }
    }
}

pub fn save_dictionary(dir: &Path, dict: &KernelDictionary) -> Result<DictionaryMeta> {
    fs::create_dir_all(dir)?;
    let paths = DictionaryPaths::in_dir(dir);
    let k = dict.kernel_size();
    Container::new(vec![dict.retained, k, k], dict.eigen_kernels.clone())?.write(&paths.eigen)?;
    Container::new(vec![dict.sample_count(), k, k], dict.candidates.clone())?.write(&paths.candidates)?;
    let meta = DictionaryMeta {
        config: dict.config.clone(),
        sample_count: dict.sample_count(),
        retained: dict.retained,
        energy_ratio: dict.energy_ratio,
        singular_values: dict.singular_values.clone(),
        sigma_grid: dict.sigma_grid.clone(),
    };
    fs::write(&paths.meta, serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

pub fn load_dictionary(dir: &Path) -> Result<KernelDictionary> {
    let paths = DictionaryPaths::in_dir(dir);
    let meta: DictionaryMeta = serde_json::from_str(&fs::read_to_string(&paths.meta)?)?;
    let eigen = Container::read(&paths.eigen)?;
    let candidates = Container::read(&paths.candidates)?;
    let k = meta.config.kernel_size;
    if eigen.dims != [meta.retained, k, k] || candidates.dims != [meta.sample_count, k, k] {
        return Err(format_err("dictionary containers disagree with metadata"));
    }
    Ok(KernelDictionary {
        config: meta.config,
        sigma_grid: meta.sigma_grid,
        candidates: candidates.data,
        eigen_kernels: eigen.data,
        singular_values: meta.singular_values,
        retained: meta.retained,
        energy_ratio: meta.energy_ratio,
    })
}

/// One named parameter group inside a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub len: usize,
}

/// `manifest.json` of a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub epoch: usize,
    pub loss: Option<f64>,
    pub params: Vec<ParamEntry>,
}

/// Writes each named group as a rank-1 container plus a manifest.
pub fn save_checkpoint(
    dir: &Path,
    kind: &str,
    config: serde_json::Value,
    seed: u64,
    epoch: usize,
    loss: Option<f64>,
    groups: &[(String, Vec<f64>)],
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut params = Vec::with_capacity(groups.len());
    for (name, values) in groups {
        let file = format!("{name}.ftns");
        let data: Vec<f32> = values.iter().map(|&v| v as f32).collect();
        Container::new(vec![data.len()], data)?.write(&dir.join(&file))?;
        params.push(ParamEntry {
            name: name.clone(),
            file,
            len: values.len(),
        });
    }
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        config,
        seed,
        epoch,
        loss,
        params,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Vec<(String, Vec<f64>)>)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut groups = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let c = Container::read(&dir.join(&entry.file))?;
        if c.dims != [entry.len] {
            return Err(format_err(format!("parameter {} has dims {:?}", entry.name, c.dims)));
        }
        groups.push((entry.name.clone(), c.data.iter().map(|&v| f64::from(v)).collect()));
    }
    Ok((manifest, groups))
}

/// `epoch,loss` rows.
pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (e, l) in curve.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", e + 1));
    }
    s
}


/// One scene per directory: `image.ftns`, `density.ftns`,
/// `perspective.ftns`, optional `roi.ftns`, `dots.csv` and `meta.json`.
pub fn save_scene(dir: &Path, scene: &Scene) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_tensor(&dir.join("image.ftns"), &scene.image)?;
    save_map(&dir.join("density.ftns"), &scene.gt_density)?;
    save_map(&dir.join("perspective.ftns"), &scene.gt_perspective)?;
    if let Some(roi) = &scene.roi {
        save_map(&dir.join("roi.ftns"), &roi.as_map())?;
    }
    fs::write(dir.join("dots.csv"), dots_to_csv(&scene.dots))?;
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&scene.meta)?)?;
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let image = load_tensor(&dir.join("image.ftns"))?;
    let gt_density = load_map(&dir.join("density.ftns"))?;
    let gt_perspective = load_map(&dir.join("perspective.ftns"))?;
    let roi_path = dir.join("roi.ftns");
    let roi = if roi_path.exists() {
        let m = load_map(&roi_path)?;
        Some(RoiMask {
            height: m.height,
            width: m.width,
            mask: m.values.iter().map(|&v| v > 0.5).collect(),
        })
    } else {
        None
    };
    let dots = dots_from_csv(&fs::read_to_string(dir.join("dots.csv"))?)?;
    let meta: SceneMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let (_, h, w) = image.shape();
    if gt_density.dims() != (h, w) || gt_perspective.dims() != (h, w) {
        return Err(PgcError::ShapeMismatch(format!("scene {} has inconsistent map sizes", dir.display())));
    }
    Ok(Scene {
        image,
        dots,
        gt_density,
        gt_perspective,
        roi,
        meta,
    })
}

/// Index written at the root of a scene set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneIndex {
    pub scenes: Vec<String>,
}

pub fn save_scene_set(dir: &Path, scenes: &[Scene]) -> Result<SceneIndex> {
    fs::create_dir_all(dir)?;
    let names: Vec<String> = (0..scenes.len()).map(|i| format!("scene_{i:04}")).collect();
    for (name, scene) in names.iter().zip(scenes) {
        save_scene(&dir.join(name), scene)?;
    }
    let index = SceneIndex { scenes: names };
    fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(index)
}

pub fn load_scene_set(dir: &Path) -> Result<Vec<Scene>> {
    let index: SceneIndex = serde_json::from_str(&fs::read_to_string(dir.join("index.json"))?)?;
    index.scenes.iter().map(|name| load_scene(&dir.join(name))).collect()
}
