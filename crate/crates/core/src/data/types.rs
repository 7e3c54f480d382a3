use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary instance mask, `true` = foreground.
pub type Mask = Array2<bool>;

/// Label ids at or above this value mark non-plane instances in stored id rasters.
pub const NON_PLANE_ID_BASE: u16 = 0x8000;

pub fn mask_area(mask: &Mask) -> usize {
    mask.iter().filter(|&&v| v).count()
}

/// Tight box of a mask under the half-open convention `[min, max)`.
///
/// Returns `None` for an empty mask.
pub fn tight_box(mask: &Mask) -> Option<BoxPrompt> {
    let (mut r0, mut c0) = (usize::MAX, usize::MAX);
    let (mut r1, mut c1) = (0usize, 0usize);
    let mut any = false;
    for ((r, c), &v) in mask.indexed_iter() {
        if v {
            any = true;
            r0 = r0.min(r);
            c0 = c0.min(c);
            r1 = r1.max(r);
            c1 = c1.max(c);
        }
    }
    any.then(|| BoxPrompt {
        x_min: c0 as f32,
        y_min: r0 as f32,
        x_max: (c1 + 1) as f32,
        y_max: (r1 + 1) as f32,
    })
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl BoxPrompt {
    pub fn new(x_min: f32, y_min: f32, x_max: f32, y_max: f32) -> Result<Self> {
        let b = BoxPrompt {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if !b.is_well_formed() {
            return Err(Error::Prompt(format!("degenerate box {b:?}")));
        }
        Ok(b)
    }

    pub fn from_array(v: [f32; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_well_formed(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    /// Well formed and overlapping the `width`×`height` image rectangle.
    pub fn is_valid_for(&self, width: usize, height: usize) -> bool {
        self.is_well_formed()
            && self.x_max > 0.0
            && self.y_max > 0.0
            && self.x_min < width as f32
            && self.y_min < height as f32
    }

    /// Clip to the image; `None` if nothing of positive area remains.
    pub fn clip(&self, width: usize, height: usize) -> Option<BoxPrompt> {
        let b = BoxPrompt {
            x_min: self.x_min.clamp(0.0, width as f32),
            y_min: self.y_min.clamp(0.0, height as f32),
            x_max: self.x_max.clamp(0.0, width as f32),
            y_max: self.y_max.clamp(0.0, height as f32),
        };
        b.is_well_formed().then_some(b)
    }

    pub fn iou(&self, other: &BoxPrompt) -> f32 {
        let iw = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let ih = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Mirror about the vertical axis of an image of the given width.
    pub fn flip_horizontal(&self, width: usize) -> BoxPrompt {
        let w = width as f32;
        BoxPrompt {
            x_min: w - self.x_max,
            y_min: self.y_min,
            x_max: w - self.x_min,
            y_max: self.y_max,
        }
    }
}

/// Instance annotation: disjoint masks, each flagged plane or non-plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneAnnotation {
    masks: Vec<Mask>,
    is_plane: Vec<bool>,
}

impl PlaneAnnotation {
    pub fn new(masks: Vec<Mask>, is_plane: Vec<bool>) -> Result<Self> {
        if masks.len() != is_plane.len() {
            return Err(Error::Format(format!(
                "{} masks but {} plane flags",
                masks.len(),
                is_plane.len()
            )));
        }
        if let Some(first) = masks.first() {
            let dim = first.dim();
            let mut cover = Array2::<u8>::zeros(dim);
            for (i, m) in masks.iter().enumerate() {
                if m.dim() != dim {
                    return Err(Error::Format(format!(
                        "mask {i} has shape {:?}, expected {dim:?}",
                        m.dim()
                    )));
                }
                if mask_area(m) == 0 {
                    return Err(Error::Format(format!("mask {i} is empty")));
                }
                for (c, &v) in cover.iter_mut().zip(m.iter()) {
                    if v {
                        if *c != 0 {
                            return Err(Error::Format(format!("mask {i} overlaps another mask")));
                        }
                        *c = 1;
                    }
                }
            }
        }
        Ok(PlaneAnnotation { masks, is_plane })
    }

    pub fn empty() -> Self {
        PlaneAnnotation {
            masks: Vec::new(),
            is_plane: Vec::new(),
        }
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn is_plane(&self) -> &[bool] {
        &self.is_plane
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn plane_masks(&self) -> impl Iterator<Item = &Mask> {
        self.masks
            .iter()
            .zip(&self.is_plane)
            .filter(|(_, &p)| p)
            .map(|(m, _)| m)
    }

    pub fn num_planes(&self) -> usize {
        self.is_plane.iter().filter(|&&p| p).count()
    }

    /// Plane instances labelled `1..=k` in order; everything else 0.
    pub fn to_partition(&self, height: usize, width: usize) -> Array2<u32> {
        let mut out = Array2::<u32>::zeros((height, width));
        for (k, m) in self.plane_masks().enumerate() {
            for (o, &v) in out.iter_mut().zip(m.iter()) {
                if v {
                    *o = k as u32 + 1;
                }
            }
        }
        out
    }

    /// Storage form: planes `1..`, non-planes from [`NON_PLANE_ID_BASE`], background 0.
    pub fn to_id_raster(&self, height: usize, width: usize) -> Array2<u16> {
        let mut out = Array2::<u16>::zeros((height, width));
        let (mut next_plane, mut next_other) = (1u16, NON_PLANE_ID_BASE);
        for (m, &p) in self.masks.iter().zip(&self.is_plane) {
            let id = if p {
                next_plane += 1;
                next_plane - 1
            } else {
                next_other += 1;
                next_other - 1
            };
            for (o, &v) in out.iter_mut().zip(m.iter()) {
                if v {
                    *o = id;
                }
            }
        }
        out
    }

    /// Inverse of [`Self::to_id_raster`]; instances ordered by id.
    pub fn from_id_raster(ids: &Array2<u16>) -> Result<Self> {
        let mut seen: Vec<u16> = ids.iter().copied().filter(|&v| v != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        let masks = seen
            .iter()
            .map(|&id| ids.mapv(|v| v == id))
            .collect::<Vec<_>>();
        let is_plane = seen.iter().map(|&id| id < NON_PLANE_ID_BASE).collect();
        PlaneAnnotation::new(masks, is_plane)
    }

    pub fn flip_horizontal(&self) -> Self {
        PlaneAnnotation {
            masks: self.masks.iter().map(flip_mask).collect(),
            is_plane: self.is_plane.clone(),
        }
    }
}

pub fn flip_mask(mask: &Mask) -> Mask {
    let mut m = mask.clone();
    m.invert_axis(ndarray::Axis(1));
    m.as_standard_layout().into_owned()
}

/// One RGB-D observation.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdSample {
    pub id: String,
    /// H×W×3, values in `[0, 1]`.
    pub rgb: Array3<f32>,
    /// H×W meters, 0 = missing.
    pub depth: Array2<f32>,
    pub annotation: Option<PlaneAnnotation>,
}

impl RgbdSample {
    pub fn new(
        id: impl Into<String>,
        rgb: Array3<f32>,
        depth: Array2<f32>,
        annotation: Option<PlaneAnnotation>,
    ) -> Result<Self> {
        let (h, w, c) = rgb.dim();
        if c != 3 {
            return Err(Error::Format(format!("rgb has {c} channels, expected 3")));
        }
        if depth.dim() != (h, w) {
            return Err(Error::Format(format!(
                "depth is {:?} but rgb is {:?}",
                depth.dim(),
                (h, w)
            )));
        }
        if depth.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Format("depth must be finite and non-negative".into()));
        }
        if let Some(a) = &annotation {
            if let Some(m) = a.masks().first() {
                if m.dim() != (h, w) {
                    return Err(Error::Format(format!(
                        "annotation masks are {:?} but image is {:?}",
                        m.dim(),
                        (h, w)
                    )));
                }
            }
        }
        Ok(RgbdSample {
            id: id.into(),
            rgb,
            depth,
            annotation,
        })
    }

    pub fn height(&self) -> usize {
        self.depth.nrows()
    }

    pub fn width(&self) -> usize {
        self.depth.ncols()
    }
}

/// Automatically generated masks; may overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub masks: Vec<Mask>,
    pub source: String,
}

impl PseudoLabelSet {
    pub fn new(masks: Vec<Mask>, source: impl Into<String>) -> Result<Self> {
        if let Some(i) = masks.iter().position(|m| mask_area(m) == 0) {
            return Err(Error::Format(format!("pseudo-label mask {i} is empty")));
        }
        Ok(PseudoLabelSet {
            masks,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}
