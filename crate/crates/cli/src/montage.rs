//! Mid-slice montages of volumes for side-by-side visual comparison.

use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{GrayImage, Luma};
use swinsyn::volume::Volume;

const GAP: u32 = 4;

/// The axial slice at `z = nz / 2`, scaled to 0..=255 by its own range,
/// with the y axis flipped so increasing y points up.
pub fn mid_axial_slice(v: &Volume) -> GrayImage {
    let [nx, ny, nz] = v.dims();
    let z = nz / 2;
    let slice = &v.data()[z * nx * ny..(z + 1) * nx * ny];
    let (lo, hi) = slice
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let span = hi - lo;
    GrayImage::from_fn(nx as u32, ny as u32, |x, y| {
        let value = slice[(ny - 1 - y as usize) * nx + x as usize];
        let level = if span > 0.0 {
            (value - lo) / span * 255.0
        } else {
            0.0
        };
        Luma([level.round().clamp(0.0, 255.0) as u8])
    })
}

/// Places panels left to right on a black canvas.
pub fn montage(panels: &[GrayImage]) -> Result<GrayImage> {
    if panels.is_empty() {
        bail!("montage needs at least one volume");
    }
    let width = panels.iter().map(|p| p.width()).sum::<u32>() + GAP * (panels.len() as u32 - 1);
    let height = panels.iter().map(|p| p.height()).max().unwrap_or(0);
    let mut canvas = GrayImage::new(width, height);
    let mut x0 = 0;
    for panel in panels {
        image::imageops::replace(&mut canvas, panel, x0 as i64, 0);
        x0 += panel.width() + GAP;
    }
    Ok(canvas)
}

pub fn write_montage(volumes: &[&Volume], path: &Path) -> Result<()> {
    let panels: Vec<GrayImage> = volumes.iter().map(|v| mid_axial_slice(v)).collect();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    montage(&panels)?
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use swinsyn::volume::Modality;

    #[test]
    fn slice_is_rescaled_and_panels_are_concatenated() {
        let data: Vec<f32> = (0..4 * 3 * 5).map(|i| i as f32).collect();
        let v = Volume::from_data([4, 3, 5], data, Modality::T1w).unwrap();
        let s = mid_axial_slice(&v);
        assert_eq!(s.dimensions(), (4, 3));
        assert_eq!(s.get_pixel(0, 2)[0], 0);
        assert_eq!(s.get_pixel(3, 0)[0], 255);
        let m = montage(&[s.clone(), s]).unwrap();
        assert_eq!(m.dimensions(), (4 + GAP + 4, 3));
        assert!(montage(&[]).is_err());
    }
}
