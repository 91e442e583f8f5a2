//! Disk formats: NPY arrays for clip videos/labels, a JSON-indexed dataset
//! manifest, and a single-file archive container (JSON header + raw f64
//! blobs) used for model checkpoints and prototype stores.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParameterPartition};
use crate::nn::tensor::Tensor;
use crate::nn::ParamGroup;
use crate::proto::{NoisePrototype, PrototypeStore, StylePrototype};
use crate::signal::Waveform;
use crate::synth::ClipSample;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// NPY
// ---------------------------------------------------------------------------

/// Element type of an NPY file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NpyDtype {
    F32,
    F64,
}

fn npy_header(dtype: NpyDtype, shape: &[usize]) -> Vec<u8> {
    let descr = match dtype {
        NpyDtype::F32 => "<f4",
        NpyDtype::F64 => "<f8",
    };
    let shape_str = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut dict = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_str}, }}");
    // pad so that the total header (magic 6 + version 2 + len 2 + dict) is a
    // multiple of 64, terminated by a newline
    let base = 6 + 2 + 2;
    let total = (base + dict.len() + 1).div_ceil(64) * 64;
    while base + dict.len() + 1 < total {
        dict.push(' ');
    }
    dict.push('\n');
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(b"\x93NUMPY");
    out.push(1);
    out.push(0);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

/// Write a tensor as NPY (C order).
pub fn write_npy(path: &Path, t: &Tensor, dtype: NpyDtype) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&npy_header(dtype, t.shape()))?;
    match dtype {
        NpyDtype::F32 => {
            let mut buf = Vec::with_capacity(t.len() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            f.write_all(&buf)?;
        }
        NpyDtype::F64 => {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&buf)?;
        }
    }
    Ok(())
}

/// Read an NPY file written by [`write_npy`] (v1.0, little-endian floats).
pub fn read_npy(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(Error::Serde(format!("{}: not an NPY file", path.display())));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(&bytes[10..10 + hlen])
        .map_err(|e| Error::Serde(format!("npy header: {e}")))?;
    let dtype = if header.contains("'<f4'") {
        NpyDtype::F32
    } else if header.contains("'<f8'") {
        NpyDtype::F64
    } else {
        return Err(Error::Serde(format!("unsupported npy descr in {header}")));
    };
    if header.contains("'fortran_order': True") {
        return Err(Error::Serde("fortran order not supported".into()));
    }
    let open = header
        .find('(')
        .ok_or_else(|| Error::Serde("npy shape missing".into()))?;
    let close = header[open..]
        .find(')')
        .ok_or_else(|| Error::Serde("npy shape missing".into()))?
        + open;
    let shape: Vec<usize> = header[open + 1..close]
        .split(',')
        .filter_map(|s| {
            let s = s.trim();
            if s.is_empty() {
                None
            } else {
                Some(s.parse::<usize>())
            }
        })
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Serde(format!("npy shape: {e}")))?;
    let n: usize = shape.iter().product();
    let body = &bytes[10 + hlen..];
    let data: Vec<f64> = match dtype {
        NpyDtype::F32 => {
            if body.len() < n * 4 {
                return Err(Error::Serde("npy body truncated".into()));
            }
            body.chunks_exact(4)
                .take(n)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect()
        }
        NpyDtype::F64 => {
            if body.len() < n * 8 {
                return Err(Error::Serde("npy body truncated".into()));
            }
            body.chunks_exact(8)
                .take(n)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect()
        }
    };
    Ok(Tensor::from_vec(&shape, data))
}

// ---------------------------------------------------------------------------
// Archive container
// ---------------------------------------------------------------------------

const ARCHIVE_MAGIC: &[u8; 8] = b"ADPARC1\n";

#[derive(Serialize, Deserialize)]
struct ArchiveEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct ArchiveHeader {
    meta: serde_json::Value,
    tensors: Vec<ArchiveEntry>,
}

/// Write named f64 tensors plus a JSON metadata blob into one archive file.
pub fn write_archive(path: &Path, meta: serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(ArchiveEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += (t.len() * 8) as u64;
    }
    let header = serde_json::to_vec(&ArchiveHeader {
        meta,
        tensors: entries,
    })?;
    let mut f = fs::File::create(path)?;
    f.write_all(ARCHIVE_MAGIC)?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    for (_, t) in tensors {
        let mut buf = Vec::with_capacity(t.len() * 8);
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&buf)?;
    }
    Ok(())
}

/// Read an archive written by [`write_archive`].
pub fn read_archive(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(Error::Serde(format!(
            "{}: not an archive file",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let mut header_buf = vec![0u8; hlen];
    f.read_exact(&mut header_buf)?;
    let header: ArchiveHeader = serde_json::from_slice(&header_buf)?;
    let mut body = Vec::new();
    f.read_to_end(&mut body)?;
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        if body.len() < start + n * 8 {
            return Err(Error::Serde(format!("archive blob truncated for {}", e.name)));
        }
        let data: Vec<f64> = body[start..start + n * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((e.name, Tensor::from_vec(&e.shape, data)));
    }
    Ok((header.meta, out))
}

// ---------------------------------------------------------------------------
// Model checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    /// Partition label per parameter name.
    groups: HashMap<String, ParamGroup>,
    buffers: Vec<String>,
}

/// Save model parameters, buffers, config and partition labels.
pub fn save_checkpoint(model: &mut Model, path: &Path) -> Result<()> {
    let params = model.export_params();
    let buffers = model.export_buffers();
    let meta = CheckpointMeta {
        config: model.config.clone(),
        groups: params.iter().map(|(n, g, _)| (n.clone(), *g)).collect(),
        buffers: buffers.iter().map(|(n, _)| n.clone()).collect(),
    };
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (n, _, t) in &params {
        tensors.push((format!("param:{n}"), t));
    }
    for (n, t) in &buffers {
        tensors.push((format!("buffer:{n}"), t));
    }
    write_archive(path, serde_json::to_value(&meta)?, &tensors)
}

/// Rebuild a model from a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let (meta_val, tensors) = read_archive(path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta_val)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let mut model = Model::new(meta.config, &mut rng)?;
    let mut params = HashMap::new();
    let mut buffers = HashMap::new();
    for (name, t) in tensors {
        if let Some(n) = name.strip_prefix("param:") {
            params.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix("buffer:") {
            buffers.insert(n.to_string(), t);
        }
    }
    model.import_state(&params, &buffers)?;
    Ok(model)
}

/// Partition labels recorded in a checkpoint (used by audits and tooling).
pub fn checkpoint_partition(path: &Path) -> Result<ParameterPartition> {
    let (meta_val, _) = read_archive(path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta_val)?;
    let mut part = ParameterPartition {
        backbone_params: Vec::new(),
        adapter_params: Vec::new(),
        head_params: Vec::new(),
    };
    for (name, group) in meta.groups {
        match group {
            ParamGroup::Backbone => part.backbone_params.push(name),
            ParamGroup::Adapter => part.adapter_params.push(name),
            ParamGroup::Head => part.head_params.push(name),
        }
    }
    Ok(part)
}

// ---------------------------------------------------------------------------
// Prototype store
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct StyleIndexEntry {
    task_id: usize,
    cluster_id: usize,
    mae_mean: f64,
    mae_count: usize,
}

#[derive(Serialize, Deserialize)]
struct NoiseIndexEntry {
    task_id: usize,
    cluster_id: usize,
}

#[derive(Serialize, Deserialize)]
struct StoreMeta {
    styles: Vec<StyleIndexEntry>,
    noises: Vec<NoiseIndexEntry>,
}

/// Save a prototype store: mu/sigma/n arrays plus a JSON index with task,
/// cluster and MAE statistics.
pub fn save_store(store: &PrototypeStore, path: &Path) -> Result<()> {
    let meta = StoreMeta {
        styles: store
            .styles()
            .iter()
            .map(|s| StyleIndexEntry {
                task_id: s.task_id,
                cluster_id: s.cluster_id,
                mae_mean: s.mae_mean,
                mae_count: s.mae_count,
            })
            .collect(),
        noises: store
            .noises()
            .iter()
            .map(|n| NoiseIndexEntry {
                task_id: n.task_id,
                cluster_id: n.cluster_id,
            })
            .collect(),
    };
    let mus: Vec<Tensor> = store
        .styles()
        .iter()
        .map(|s| Tensor::from_vec(&[s.mu.len()], s.mu.clone()))
        .collect();
    let sigmas: Vec<Tensor> = store
        .styles()
        .iter()
        .map(|s| Tensor::from_vec(&[s.sigma.len()], s.sigma.clone()))
        .collect();
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (i, t) in mus.iter().enumerate() {
        tensors.push((format!("style.{i}.mu"), t));
    }
    for (i, t) in sigmas.iter().enumerate() {
        tensors.push((format!("style.{i}.sigma"), t));
    }
    for (i, n) in store.noises().iter().enumerate() {
        tensors.push((format!("noise.{i}.n"), &n.n));
    }
    write_archive(path, serde_json::to_value(&meta)?, &tensors)
}

/// Load a prototype store saved by [`save_store`].
pub fn load_store(path: &Path) -> Result<PrototypeStore> {
    let (meta_val, tensors) = read_archive(path)?;
    let meta: StoreMeta = serde_json::from_value(meta_val)?;
    let by_name: HashMap<String, Tensor> = tensors.into_iter().collect();
    let mut store = PrototypeStore::new();
    let mut styles = Vec::with_capacity(meta.styles.len());
    for (i, e) in meta.styles.iter().enumerate() {
        let mu = by_name
            .get(&format!("style.{i}.mu"))
            .ok_or_else(|| Error::Serde(format!("missing style.{i}.mu")))?;
        let sigma = by_name
            .get(&format!("style.{i}.sigma"))
            .ok_or_else(|| Error::Serde(format!("missing style.{i}.sigma")))?;
        styles.push(StylePrototype {
            mu: mu.data().to_vec(),
            sigma: sigma.data().to_vec(),
            task_id: e.task_id,
            cluster_id: e.cluster_id,
            mae_mean: e.mae_mean,
            mae_count: e.mae_count,
        });
    }
    let mut noises = Vec::with_capacity(meta.noises.len());
    for (i, e) in meta.noises.iter().enumerate() {
        let n = by_name
            .get(&format!("noise.{i}.n"))
            .ok_or_else(|| Error::Serde(format!("missing noise.{i}.n")))?;
        noises.push(NoisePrototype {
            n: n.clone(),
            task_id: e.task_id,
            cluster_id: e.cluster_id,
        });
    }
    store.push_task(styles, noises);
    Ok(store)
}

// ---------------------------------------------------------------------------
// Dataset manifests
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestClip {
    pub sample_id: String,
    pub record_id: String,
    pub video: String,
    pub label: String,
    pub fs: f64,
    pub hr: f64,
    pub split: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestTask {
    pub name: String,
    pub task_id: usize,
    pub clips: Vec<ManifestClip>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tasks: Vec<ManifestTask>,
}

/// One task's materialized train/test clips.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub name: String,
    pub train: Vec<ClipSample>,
    pub test: Vec<ClipSample>,
}

/// Materialize task datasets: one f32 NPY per clip video, one f64 NPY per
/// label, plus an `index.json` manifest. Returns the manifest path.
pub fn save_dataset(dir: &Path, tasks: &[TaskData]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = DatasetManifest { tasks: Vec::new() };
    for (task_id, task) in tasks.iter().enumerate() {
        let tdir = dir.join(format!("task{task_id}"));
        fs::create_dir_all(&tdir)?;
        let mut clips = Vec::new();
        for (split, set) in [("train", &task.train), ("test", &task.test)] {
            for clip in set.iter() {
                let vname = format!("task{task_id}/{}.video.npy", clip.sample_id);
                let lname = format!("task{task_id}/{}.label.npy", clip.sample_id);
                write_npy(&dir.join(&vname), &clip.video, NpyDtype::F32)?;
                let label = Tensor::from_vec(&[clip.label.len()], clip.label.samples().to_vec());
                write_npy(&dir.join(&lname), &label, NpyDtype::F64)?;
                clips.push(ManifestClip {
                    sample_id: clip.sample_id.clone(),
                    record_id: clip.record_id.clone(),
                    video: vname,
                    label: lname,
                    fs: clip.label.fs(),
                    hr: clip.hr,
                    split: split.to_string(),
                });
            }
        }
        manifest.tasks.push(ManifestTask {
            name: task.name.clone(),
            task_id,
            clips,
        });
    }
    let path = dir.join("index.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Load a dataset directory produced by [`save_dataset`] (or an externally
/// prepared directory following the same index.json schema). Recordings
/// longer than `window` frames are cut into clips of `window` at `step`.
pub fn load_dataset(dir: &Path, window: Option<(usize, usize)>) -> Result<Vec<TaskData>> {
    let index_path = dir.join("index.json");
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&index_path)?)?;
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for mt in &manifest.tasks {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for mc in &mt.clips {
            let video = read_npy(&dir.join(&mc.video))?;
            let label_t = read_npy(&dir.join(&mc.label))?;
            let label = Waveform::new(label_t.data().to_vec(), mc.fs)?;
            let t_len = video.shape()[1];
            let clips = match window {
                Some((win, step)) if t_len > win => crate::synth::window_clips(
                    &video,
                    &label,
                    win,
                    step,
                    mt.task_id,
                    &mc.record_id,
                )?,
                _ => vec![ClipSample {
                    video,
                    label,
                    hr: mc.hr,
                    task_id: mt.task_id,
                    sample_id: mc.sample_id.clone(),
                    record_id: mc.record_id.clone(),
                }],
            };
            match mc.split.as_str() {
                "train" => train.extend(clips),
                "test" => test.extend(clips),
                other => {
                    return Err(Error::Serde(format!(
                        "unknown split '{other}' in {}",
                        index_path.display()
                    )))
                }
            }
        }
        tasks.push(TaskData {
            name: mt.name.clone(),
            train,
            test,
        });
    }
    Ok(tasks)
}
