//! Checkpoint format: a directory holding `manifest.json` plus one raw
//! little-endian f32 blob per parameter tree (leaves concatenated in their
//! fixed traversal order). Optimizer moments ride along as `m || v` blobs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Aabb;
use crate::network::{
    CondFieldParams, FieldModelConfig, NmfParams, ParamLeaves, SharedFieldParams,
};
use crate::optim::adam::{AdamConfig, AdamState};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TreeEntry {
    name: String,
    params: usize,
    file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AdamEntry {
    name: String,
    t: u64,
    cfg: AdamConfig,
    file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    seed: u64,
    step: u64,
    bbox: Aabb,
    model: FieldModelConfig,
    trees: Vec<TreeEntry>,
    total_params: usize,
    adam: Vec<AdamEntry>,
}

/// Everything a checkpoint restores.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: CondFieldParams<f32>,
    pub model: FieldModelConfig,
    pub seed: u64,
    pub step: u64,
    pub adam_shared: Option<AdamState<f32>>,
    pub adam_nmfs: BTreeMap<String, AdamState<f32>>,
}

fn blob_of<T: ParamLeaves<f32> + ?Sized>(tree: &T) -> Vec<u8> {
    let mut out = Vec::new();
    for leaf in tree.leaves() {
        for v in leaf {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn fill_from_blob<T: ParamLeaves<f32> + ?Sized>(tree: &mut T, blob: &[u8], name: &str) -> Result<()> {
    let expect: usize = tree.param_count();
    if blob.len() != expect * 4 {
        return Err(Error::Data(format!(
            "tree {name}: blob holds {} bytes, expected {}",
            blob.len(),
            expect * 4
        )));
    }
    let mut chunks = blob.chunks_exact(4);
    for leaf in tree.leaves_mut() {
        for v in leaf.iter_mut() {
            let bytes = chunks.next().expect("length checked");
            let x = f32::from_le_bytes(bytes.try_into().expect("chunk of 4"));
            if !x.is_finite() {
                return Err(Error::Data(format!("tree {name}: non-finite parameter")));
            }
            *v = x;
        }
    }
    Ok(())
}

fn adam_blob(state: &AdamState<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    for group in [&state.m, &state.v] {
        for leaf in group {
            for v in leaf {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn adam_from_blob<P: ParamLeaves<f32> + ?Sized>(
    params: &P,
    entry: &AdamEntry,
    blob: &[u8],
) -> Result<AdamState<f32>> {
    let mut state = AdamState::new(params, entry.cfg);
    state.t = entry.t;
    let n: usize = params.param_count();
    if blob.len() != n * 8 {
        return Err(Error::Data(format!(
            "adam blob for {} holds {} bytes, expected {}",
            entry.name,
            blob.len(),
            n * 8
        )));
    }
    let mut chunks = blob.chunks_exact(4);
    for group in [&mut state.m, &mut state.v] {
        for leaf in group {
            for v in leaf.iter_mut() {
                *v = f32::from_le_bytes(chunks.next().expect("len checked").try_into().unwrap());
            }
        }
    }
    Ok(state)
}

fn file_name_for(tree: &str) -> String {
    format!("{}.f32", tree.replace('/', "_"))
}

/// Write `params` (and optionally optimizer state) into directory `dir`.
pub fn save_checkpoint(
    params: &CondFieldParams<f32>,
    adam_shared: Option<&AdamState<f32>>,
    adam_nmfs: &BTreeMap<String, AdamState<f32>>,
    model: &FieldModelConfig,
    seed: u64,
    step: u64,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut trees = Vec::new();
    let mut adam = Vec::new();

    let shared_file = file_name_for("shared");
    fs::write(dir.join(&shared_file), blob_of(&params.shared))?;
    trees.push(TreeEntry {
        name: "shared".into(),
        params: ParamLeaves::param_count(&params.shared),
        file: shared_file,
    });
    for (id, nmf) in &params.nmfs {
        let name = format!("nmf/{id}");
        let file = file_name_for(&name);
        fs::write(dir.join(&file), blob_of(nmf))?;
        trees.push(TreeEntry { name, params: ParamLeaves::param_count(nmf), file });
    }
    if let Some(st) = adam_shared {
        let file = "adam_shared.f32".to_string();
        fs::write(dir.join(&file), adam_blob(st))?;
        adam.push(AdamEntry { name: "shared".into(), t: st.t, cfg: st.cfg, file });
    }
    for (id, st) in adam_nmfs {
        let name = format!("nmf/{id}");
        let file = format!("adam_{}", file_name_for(&name));
        fs::write(dir.join(&file), adam_blob(st))?;
        adam.push(AdamEntry { name, t: st.t, cfg: st.cfg, file });
    }

    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        seed,
        step,
        bbox: params.shared.bbox,
        model: *model,
        total_params: trees.iter().map(|t| t.params).sum(),
        trees,
        adam,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: manifest.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let model = manifest.model;
    let mut shared = SharedFieldParams::<f32>::init(&model, manifest.bbox, manifest.seed)?;
    let mut nmfs: BTreeMap<String, NmfParams<f32>> = BTreeMap::new();
    let mut declared = 0usize;
    for entry in &manifest.trees {
        let blob = fs::read(dir.join(&entry.file))?;
        declared += entry.params;
        if entry.name == "shared" {
            if entry.params != ParamLeaves::param_count(&shared) {
                return Err(Error::Data(format!(
                    "manifest declares {} shared parameters, model has {}",
                    entry.params,
                    ParamLeaves::param_count(&shared)
                )));
            }
            fill_from_blob(&mut shared, &blob, &entry.name)?;
        } else if let Some(id) = entry.name.strip_prefix("nmf/") {
            let mut nmf = NmfParams::<f32>::init(&model, id, manifest.seed)?;
            if entry.params != ParamLeaves::param_count(&nmf) {
                return Err(Error::Data(format!(
                    "manifest declares {} parameters for {}, model has {}",
                    entry.params,
                    entry.name,
                    ParamLeaves::param_count(&nmf)
                )));
            }
            fill_from_blob(&mut nmf, &blob, &entry.name)?;
            nmfs.insert(id.to_string(), nmf);
        } else {
            return Err(Error::Data(format!("unknown tree {}", entry.name)));
        }
    }
    if declared != manifest.total_params {
        return Err(Error::Data(format!(
            "manifest total_params {} != sum over trees {declared}",
            manifest.total_params
        )));
    }

    let mut params = CondFieldParams::new(shared);
    for (_, nmf) in nmfs {
        params.insert_nmf(nmf)?;
    }

    let mut adam_shared = None;
    let mut adam_nmfs = BTreeMap::new();
    for entry in &manifest.adam {
        let blob = fs::read(dir.join(&entry.file))?;
        if entry.name == "shared" {
            adam_shared = Some(adam_from_blob(&params.shared, entry, &blob)?);
        } else if let Some(id) = entry.name.strip_prefix("nmf/") {
            let nmf = params.nmf(id)?;
            adam_nmfs.insert(id.to_string(), adam_from_blob(nmf, entry, &blob)?);
        }
    }

    Ok(Checkpoint {
        params,
        model,
        seed: manifest.seed,
        step: manifest.step,
        adam_shared,
        adam_nmfs,
    })
}

/// Declared parameter total of a stored checkpoint, straight from the
/// manifest (callers can cross-check against a fresh model).
pub fn declared_param_count(dir: &Path) -> Result<usize> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    Ok(manifest.total_params)
}
