//! Dataset generation: phantoms per split, forward projections at the full
//! angle set, noisy stacks, optional equally-spaced subsets, and a manifest
//! hashing every artifact.

use std::path::Path;

use anyhow::{bail, Context, Result};

use cbnt_core::projector::{add_poisson_noise, forward_project, write_projections, ProjectionStack};
use cbnt_core::volume::{make_phantom, write_volume};

use crate::config::RunConfig;
use crate::manifest::{hash_artifact, ArtifactEntry, DatasetManifest};

use super::derive_seed;

pub fn run(cfg: &RunConfig, force: bool) -> Result<DatasetManifest> {
    let data_dir = &cfg.paths.data_dir;
    if data_dir.exists() {
        let non_empty = std::fs::read_dir(data_dir)?.next().is_some();
        if non_empty && !force {
            bail!(
                "config error: output dir {data_dir:?} is not empty (pass --force to overwrite)"
            );
        }
    }
    std::fs::create_dir_all(data_dir.join("volumes"))?;
    std::fs::create_dir_all(data_dir.join("projections"))?;

    let spec = cfg.phantom.spec();
    let bbox = cfg.phantom.bbox()?;
    let geom = cfg.geometry.build(bbox)?;
    let mut artifacts = Vec::new();

    let splits = [
        ("train", cfg.phantom.n_train),
        ("val", cfg.phantom.n_val),
        ("test", cfg.phantom.n_test),
    ];
    for (split, count) in splits {
        for i in 0..count {
            let id = format!("{split}_{i:03}");
            let phantom_seed = derive_seed(cfg.seed, split, i as u64);
            let vol = make_phantom(&spec, phantom_seed)?;
            let vol_rel = format!("volumes/{id}.vol.json");
            write_volume(&vol, &data_dir.join(&vol_rel))?;
            artifacts.push(entry("volume", split, &id, &vol_rel, phantom_seed, data_dir)?);

            let clean = forward_project(&vol, &geom, cfg.geometry.projection_samples)?;
            let clean_rel = format!("projections/{id}_clean.proj.json");
            write_projections(&clean, &data_dir.join(&clean_rel))?;
            artifacts.push(entry(
                "projections_clean",
                split,
                &id,
                &clean_rel,
                phantom_seed,
                data_dir,
            )?);

            let noisy = match cfg.noise.photons {
                Some(photons) => {
                    let noise_seed = derive_seed(cfg.seed, "noise", phantom_seed);
                    let noisy = add_poisson_noise(&clean, photons, noise_seed)?;
                    let rel = format!("projections/{id}_noisy.proj.json");
                    write_projections(&noisy, &data_dir.join(&rel))?;
                    artifacts.push(entry(
                        "projections_noisy",
                        split,
                        &id,
                        &rel,
                        noise_seed,
                        data_dir,
                    )?);
                    Some(noisy)
                }
                None => None,
            };

            if let Some(m) = cfg.geometry.subset_projections {
                let sub = subset_stack(&clean, m)?;
                let rel = format!("projections/{id}_clean_sub{m}.proj.json");
                write_projections(&sub, &data_dir.join(&rel))?;
                artifacts.push(entry(
                    "projections_clean_subset",
                    split,
                    &id,
                    &rel,
                    phantom_seed,
                    data_dir,
                )?);
                if let Some(noisy) = &noisy {
                    let sub = subset_stack(noisy, m)?;
                    let rel = format!("projections/{id}_noisy_sub{m}.proj.json");
                    write_projections(&sub, &data_dir.join(&rel))?;
                    artifacts.push(entry(
                        "projections_noisy_subset",
                        split,
                        &id,
                        &rel,
                        phantom_seed,
                        data_dir,
                    )?);
                }
            }
        }
    }

    let manifest = DatasetManifest { config: cfg.clone(), artifacts };
    manifest.write(data_dir)?;
    Ok(manifest)
}

fn entry(
    kind: &str,
    split: &str,
    id: &str,
    rel: &str,
    seed: u64,
    data_dir: &Path,
) -> Result<ArtifactEntry> {
    Ok(ArtifactEntry {
        kind: kind.into(),
        split: split.into(),
        id: id.into(),
        path: rel.into(),
        seed,
        sha256: hash_artifact(&data_dir.join(rel))
            .with_context(|| format!("hashing {rel}"))?,
    })
}

/// Every ceil(n/m)-th angle of the full stack, keeping projection data and
/// angles aligned.
pub fn subset_stack(full: &ProjectionStack, m: usize) -> Result<ProjectionStack> {
    let n = full.geom.n_projections();
    if m == 0 || m > n {
        bail!("subset size {m} out of range for {n} projections");
    }
    let stride = n.div_ceil(m);
    let picked: Vec<usize> = (0..n).step_by(stride).collect();
    let mut geom = full.geom.clone();
    geom.angles = picked.iter().map(|&a| full.geom.angles[a]).collect();
    let per = full.geom.pixels_per_projection();
    let mut data = Vec::with_capacity(picked.len() * per);
    for &a in &picked {
        data.extend_from_slice(&full.data()[a * per..(a + 1) * per]);
    }
    Ok(ProjectionStack::new(geom, data, full.noise_meta)?)
}
