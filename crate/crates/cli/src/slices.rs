//! Mid-slice PNG export: one axial, coronal, and sagittal 8-bit grayscale
//! image windowed to a density range.

use std::path::Path;

use anyhow::{Context, Result};
use image::{GrayImage, Luma};

use cbnt_core::volume::VolumeGrid;

pub fn dump_mid_slices(vol: &VolumeGrid, window: f64, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let [nx, ny, nz] = vol.dims;
    let to_u8 = |v: f32| -> u8 { ((v as f64 / window).clamp(0.0, 1.0) * 255.0).round() as u8 };

    let mut axial = GrayImage::new(nx as u32, ny as u32);
    let k = nz / 2;
    for j in 0..ny {
        for i in 0..nx {
            axial.put_pixel(i as u32, j as u32, Luma([to_u8(vol.at(i, j, k))]));
        }
    }
    axial
        .save(dir.join("axial.png"))
        .context("writing axial slice")?;

    let mut coronal = GrayImage::new(nx as u32, nz as u32);
    let j = ny / 2;
    for k in 0..nz {
        for i in 0..nx {
            coronal.put_pixel(i as u32, k as u32, Luma([to_u8(vol.at(i, j, k))]));
        }
    }
    coronal
        .save(dir.join("coronal.png"))
        .context("writing coronal slice")?;

    let mut sagittal = GrayImage::new(ny as u32, nz as u32);
    let i = nx / 2;
    for k in 0..nz {
        for j in 0..ny {
            sagittal.put_pixel(j as u32, k as u32, Luma([to_u8(vol.at(i, j, k))]));
        }
    }
    sagittal
        .save(dir.join("sagittal.png"))
        .context("writing sagittal slice")?;
    Ok(())
}
