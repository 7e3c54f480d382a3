//! Raster files and the line-delimited dataset manifest.
//!
//! RGB is stored as 8-bit PNG, depth as 16-bit grayscale PNG in millimetres,
//! labels as 16-bit grayscale id rasters (0 = background, plane ids from 1,
//! non-plane ids from [`NON_PLANE_ID_BASE`](super::types::NON_PLANE_ID_BASE)).

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::types::{Mask, PlaneAnnotation, PseudoLabelSet, RgbdSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub rgb_path: PathBuf,
    pub depth_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_path: Option<PathBuf>,
    /// Binary 8-bit PNG masks, one per pseudo-label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_label_paths: Option<Vec<PathBuf>>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(|e| Error::load(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(e);
    }
    Ok(out)
}

/// Writes `<path>.partial` first and renames it into place once complete.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    write_jsonl_atomic(path, entries)
}

pub fn write_jsonl_atomic<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut partial = path.as_os_str().to_owned();
    partial.push(".partial");
    let partial = PathBuf::from(partial);
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&partial)?);
        for r in rows {
            serde_json::to_writer(&mut f, r).map_err(|e| Error::Format(e.to_string()))?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    fs::rename(&partial, path)?;
    Ok(())
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::load(path, "file not found"));
    }
    image::open(path).map_err(|e| Error::load(path, e))
}

pub fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, ch)| {
        img.get_pixel(c as u32, r as u32)[ch] as f32 / 255.0
    }))
}

pub fn read_u16(path: &Path) -> Result<Array2<u16>> {
    let img = open_image(path)?;
    let img = match img {
        image::DynamicImage::ImageLuma16(i) => i,
        image::DynamicImage::ImageLuma8(i) => image::DynamicImage::ImageLuma8(i).to_luma16(),
        other => {
            return Err(Error::Format(format!(
                "{}: expected single-channel raster, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32)[0]
    }))
}

/// Depth raster in metres from 16-bit millimetres.
pub fn read_depth(path: &Path) -> Result<Array2<f32>> {
    Ok(read_u16(path)?.mapv(|mm| mm as f32 / 1000.0))
}

pub fn write_rgb(path: &Path, rgb: &Array3<f32>) -> Result<()> {
    let (h, w, _) = rgb.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch| (rgb[[y as usize, x as usize, ch]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| Error::load(path, e))
}

pub fn write_u16(path: &Path, raster: &Array2<u16>) -> Result<()> {
    let (h, w) = raster.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([raster[[y as usize, x as usize]]]));
    img.save(path).map_err(|e| Error::load(path, e))
}

pub fn write_depth(path: &Path, depth: &Array2<f32>) -> Result<()> {
    write_u16(path, &depth.mapv(|m| (m * 1000.0).round().clamp(0.0, 65535.0) as u16))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| Error::load(path, e))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    Ok(read_u16(path)?.mapv(|v| v > 0))
}

/// Partition rasters share the 16-bit id format.
pub fn write_partition(path: &Path, part: &Array2<u32>) -> Result<()> {
    if part.iter().any(|&v| v > u16::MAX as u32) {
        return Err(Error::Format("partition label exceeds 16 bits".into()));
    }
    write_u16(path, &part.mapv(|v| v as u16))
}

pub fn read_partition(path: &Path) -> Result<Array2<u32>> {
    Ok(read_u16(path)?.mapv(|v| v as u32))
}

/// Ground-truth partition from a stored id raster: plane ids kept, non-plane ids to 0.
pub fn read_gt_partition(path: &Path) -> Result<Array2<u32>> {
    let ids = read_u16(path)?;
    let ann = PlaneAnnotation::from_id_raster(&ids)?;
    Ok(ann.to_partition(ids.nrows(), ids.ncols()))
}

/// Load one manifest entry; relative paths resolve against `base_dir`.
pub fn load_rgbd_sample(entry: &ManifestEntry, base_dir: &Path) -> Result<RgbdSample> {
    let rgb = read_rgb(&resolve(base_dir, &entry.rgb_path))?;
    let depth = read_depth(&resolve(base_dir, &entry.depth_path))?;
    let (h, w, _) = rgb.dim();
    if depth.dim() != (h, w) {
        return Err(Error::Format(format!(
            "{}: depth {:?} does not match rgb {:?}",
            entry.id,
            depth.dim(),
            (h, w)
        )));
    }
    let annotation = match &entry.label_path {
        Some(p) => {
            let ids = read_u16(&resolve(base_dir, p))?;
            if ids.dim() != (h, w) {
                return Err(Error::Format(format!(
                    "{}: labels {:?} do not match rgb {:?}",
                    entry.id,
                    ids.dim(),
                    (h, w)
                )));
            }
            Some(PlaneAnnotation::from_id_raster(&ids)?)
        }
        None => None,
    };
    RgbdSample::new(entry.id.clone(), rgb, depth, annotation)
}

pub fn load_pseudo_labels(entry: &ManifestEntry, base_dir: &Path) -> Result<Option<PseudoLabelSet>> {
    let Some(paths) = &entry.pseudo_label_paths else {
        return Ok(None);
    };
    let masks = paths
        .iter()
        .map(|p| read_mask(&resolve(base_dir, p)))
        .collect::<Result<Vec<_>>>()?;
    let masks = masks.into_iter().filter(|m| m.iter().any(|&v| v)).collect();
    Ok(Some(PseudoLabelSet::new(masks, "file")?))
}

/// Write a sample's rasters under `dir` and return its manifest entry
/// (paths relative to `dir`).
pub fn save_rgbd_sample(
    sample: &RgbdSample,
    dir: &Path,
    pseudo: Option<&PseudoLabelSet>,
) -> Result<ManifestEntry> {
    let id = &sample.id;
    let rgb_path = PathBuf::from(format!("{id}_rgb.png"));
    let depth_path = PathBuf::from(format!("{id}_depth.png"));
    write_rgb(&dir.join(&rgb_path), &sample.rgb)?;
    write_depth(&dir.join(&depth_path), &sample.depth)?;
    let label_path = match &sample.annotation {
        Some(a) => {
            let p = PathBuf::from(format!("{id}_label.png"));
            write_u16(&dir.join(&p), &a.to_id_raster(sample.height(), sample.width()))?;
            Some(p)
        }
        None => None,
    };
    let pseudo_label_paths = match pseudo {
        Some(set) => {
            let mut v = Vec::with_capacity(set.len());
            for (k, m) in set.masks.iter().enumerate() {
                let p = PathBuf::from(format!("{id}_pseudo{k:03}.png"));
                write_mask(&dir.join(&p), m)?;
                v.push(p);
            }
            Some(v)
        }
        None => None,
    };
    Ok(ManifestEntry {
        id: id.clone(),
        rgb_path,
        depth_path,
        label_path,
        pseudo_label_paths,
    })
}

/// Load every entry of a manifest, tagging failures with the sample id.
pub fn load_dataset(manifest: &Path) -> Result<Vec<(RgbdSample, Option<PseudoLabelSet>)>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .iter()
        .map(|e| {
            let s = load_rgbd_sample(e, base).map_err(|err| err.for_image(&e.id))?;
            let p = load_pseudo_labels(e, base).map_err(|err| err.for_image(&e.id))?;
            Ok((s, p))
        })
        .collect()
}
