//! Core sample types, dataset directory I/O and supervision-target
//! construction.
//!
//! A dataset root holds `{train,val}/images/*.png|jpg` next to
//! `{train,val}/masks/*.png`; masks are single-channel 8-bit with values in
//! {0, 255}. Images are resized bilinearly to the configured square size and
//! standardized per channel; masks are resized nearest-neighbour and
//! binarized at 128.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::util::{area_fraction_downsample, bilinear_resize, nearest_resize};

/// Fixed per-channel normalization constants mapping [0,1] pixel values to
/// roughly zero-mean/unit-variance model inputs. Applied pixelwise, so the
/// set of pixels that differ between two renders is preserved exactly.
pub const CHANNEL_MEAN: f64 = 0.5;
pub const CHANNEL_STD: f64 = 0.25;

pub fn normalize_pixel(v: f64) -> f64 {
    (v - CHANNEL_MEAN) / CHANNEL_STD
}

pub fn denormalize_pixel(v: f64) -> f64 {
    v * CHANNEL_STD + CHANNEL_MEAN
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// A resized, standardized input image.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    /// `[H, W, 3]`, standardized floats; H and W are multiples of 32.
    pub image: Array3<f64>,
    /// Pixel size before resizing.
    pub original_size: (u32, u32),
}

impl ImageSample {
    pub fn from_unit_rgb(id: String, rgb: &Array3<f64>, original_size: (u32, u32)) -> Result<Self> {
        let (h, w, c) = rgb.dim();
        if c != 3 {
            return Err(Error::Shape(format!("image '{id}' has {c} channels, expected 3")));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Shape(format!(
                "image '{id}' is {h}x{w}; dimensions must be multiples of 32"
            )));
        }
        Ok(ImageSample {
            id,
            image: rgb.mapv(normalize_pixel),
            original_size,
        })
    }
}

/// A binary ground-truth mask paired with an image.
#[derive(Debug, Clone)]
pub struct GroundTruthMask {
    /// `[H, W]` with values in {0, 1}.
    pub mask: Array2<u8>,
    pub source_split: Split,
}

/// One connected foreground instance with its tight box.
#[derive(Debug, Clone)]
pub struct Instance {
    pub mask: Array2<u8>,
    /// Normalized `(cx, cy, w, h)`, each in [0, 1].
    pub box_cxcywh: [f64; 4],
    pub area: usize,
}

/// Per-image supervision: cleaned semantic mask, instances with boxes, and
/// the 1/16-scale selection target.
#[derive(Debug, Clone)]
pub struct SupervisionTarget {
    /// Union of the kept instances (speckles below the area floor removed).
    pub semantic_mask: Array2<u8>,
    pub instances: Vec<Instance>,
    /// `[H/16, W/16]` in {0, 1}: 1 iff at least half the source cell is foreground.
    pub dqs_target: Array2<u8>,
}

/// Components smaller than this many pixels are treated as resize speckle.
pub const MIN_INSTANCE_AREA: usize = 16;

/// Decompose a binary mask into 8-connected components, largest first.
/// Ties in area break by first-pixel scan order.
pub fn connected_components(mask: &Array2<u8>) -> Vec<(Array2<u8>, usize)> {
    let (h, w) = mask.dim();
    let mut label = Array2::<i32>::from_elem((h, w), -1);
    let mut comps: Vec<(Array2<u8>, usize)> = Vec::new();
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if mask[(sy, sx)] == 0 || label[(sy, sx)] >= 0 {
                continue;
            }
            let id = comps.len() as i32;
            let mut comp = Array2::<u8>::zeros((h, w));
            let mut area = 0usize;
            stack.push((sy, sx));
            label[(sy, sx)] = id;
            while let Some((y, x)) = stack.pop() {
                comp[(y, x)] = 1;
                area += 1;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[(ny, nx)] != 0 && label[(ny, nx)] < 0 {
                            label[(ny, nx)] = id;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            comps.push((comp, area));
        }
    }
    comps.sort_by(|a, b| b.1.cmp(&a.1));
    comps
}

/// Tight bounding box of a component in normalized `(cx, cy, w, h)`.
fn tight_box(comp: &Array2<u8>) -> [f64; 4] {
    let (h, w) = comp.dim();
    let (mut r0, mut r1, mut c0, mut c1) = (h, 0usize, w, 0usize);
    for y in 0..h {
        for x in 0..w {
            if comp[(y, x)] != 0 {
                r0 = r0.min(y);
                r1 = r1.max(y);
                c0 = c0.min(x);
                c1 = c1.max(x);
            }
        }
    }
    debug_assert!(r0 <= r1, "tight_box on an empty component");
    let bw = (c1 - c0 + 1) as f64 / w as f64;
    let bh = (r1 - r0 + 1) as f64 / h as f64;
    let cx = (c0 + c1 + 1) as f64 / 2.0 / w as f64;
    let cy = (r0 + r1 + 1) as f64 / 2.0 / h as f64;
    [cx, cy, bw, bh]
}

/// Build the supervision target for one ground-truth mask.
///
/// Instances are the 8-connected components of the mask (area >=
/// [`MIN_INSTANCE_AREA`], descending area order); `semantic_mask` is their
/// union; `dqs_target` is the area-fraction downsample of the semantic mask
/// at 1/16 scale, thresholded at one half (>= 0.5 maps to 1).
pub fn build_supervision(gt: &GroundTruthMask, image_size: usize) -> Result<SupervisionTarget> {
    let (h, w) = gt.mask.dim();
    if h != image_size || w != image_size {
        return Err(Error::Shape(format!(
            "mask is {h}x{w}, expected {image_size}x{image_size}"
        )));
    }
    if gt.mask.iter().any(|&v| v > 1) {
        return Err(Error::Shape("mask must be strictly binary {0,1}".into()));
    }
    let comps = connected_components(&gt.mask);
    let mut semantic = Array2::<u8>::zeros((h, w));
    let mut instances = Vec::new();
    for (comp, area) in comps {
        if area < MIN_INSTANCE_AREA {
            continue;
        }
        semantic.zip_mut_with(&comp, |s, &c| *s |= c);
        let box_cxcywh = tight_box(&comp);
        instances.push(Instance {
            mask: comp,
            box_cxcywh,
            area,
        });
    }
    let frac = area_fraction_downsample(&semantic, 16);
    let dqs_target = frac.mapv(|f| u8::from(f >= 0.5));
    Ok(SupervisionTarget {
        semantic_mask: semantic,
        instances,
        dqs_target,
    })
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn list_by_stem(dir: &Path, extensions: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else {
            continue;
        };
        if !extensions.contains(&ext.to_ascii_lowercase().as_str()) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Invalid(format!("{}: unreadable file name", path.display())))?
            .to_string();
        out.insert(stem, path);
    }
    Ok(out)
}

/// Load an RGB image file into a `[h, w, 3]` array of [0, 1] floats.
pub fn load_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_fn(
        (h as usize, w as usize, 3),
        |(y, x, c)| rgb.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0,
    ))
}

/// Load a single-channel mask file and binarize at 128.
pub fn load_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        u8::from(gray.get_pixel(x as u32, y as u32).0[0] >= 128)
    }))
}

/// Load one split directory (`dir/images` + `dir/masks`) at `image_size`.
/// Pairs are sorted by id; an image without a mask is a hard error.
pub fn load_pairs_dir(
    dir: &Path,
    split: Split,
    image_size: usize,
) -> Result<Vec<(ImageSample, GroundTruthMask)>> {
    let images = list_by_stem(&dir.join("images"), &IMAGE_EXTENSIONS)?;
    let masks = list_by_stem(&dir.join("masks"), &["png"])?;
    let mut out = Vec::with_capacity(images.len());
    for (id, image_path) in images {
        let mask_path = masks
            .get(&id)
            .ok_or_else(|| Error::MissingMask { id: id.clone() })?;
        let rgb = load_rgb(&image_path)?;
        let resized = if rgb.dim() == (image_size, image_size, 3) {
            rgb.clone()
        } else {
            bilinear_resize(&rgb, image_size, image_size)
        };
        let (h0, w0, _) = rgb.dim();
        let sample = ImageSample::from_unit_rgb(id, &resized, (h0 as u32, w0 as u32))?;
        let mask_raw = load_mask(mask_path)?;
        let mask = if mask_raw.dim() == (image_size, image_size) {
            mask_raw
        } else {
            nearest_resize(&mask_raw, image_size, image_size)
        };
        out.push((
            sample,
            GroundTruthMask {
                mask,
                source_split: split,
            },
        ));
    }
    Ok(out)
}

/// Load one split from a dataset root laid out as `root/{train,val}/...`.
pub fn load_dataset(
    root: &Path,
    split: Split,
    image_size: usize,
) -> Result<Vec<(ImageSample, GroundTruthMask)>> {
    load_pairs_dir(&root.join(split.dir_name()), split, image_size)
}
