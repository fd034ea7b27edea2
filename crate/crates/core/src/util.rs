//! Small shared helpers: atomic file writes, seeding, resampling.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Write a file via a temporary sibling and rename, so failures never leave
/// a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("{}: not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// FNV-1a over a byte string; used to fold string ids into RNG seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic RNG from a base seed and a context label.
pub fn seeded_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(label.as_bytes()))
}

/// Bilinear resize with half-pixel centers and clamp-to-edge sampling.
/// Resizing to the input size reproduces the input exactly.
pub fn bilinear_resize(src: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (h, w, c) = src.dim();
    let mut out = Array3::<f64>::zeros((oh, ow, c));
    for oy in 0..oh {
        let fy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
        let y0 = fy.floor();
        let ty = fy - y0;
        let y0i = (y0 as i64).clamp(0, h as i64 - 1) as usize;
        let y1i = (y0 as i64 + 1).clamp(0, h as i64 - 1) as usize;
        for ox in 0..ow {
            let fx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
            let x0 = fx.floor();
            let tx = fx - x0;
            let x0i = (x0 as i64).clamp(0, w as i64 - 1) as usize;
            let x1i = (x0 as i64 + 1).clamp(0, w as i64 - 1) as usize;
            for ch in 0..c {
                let v00 = src[(y0i, x0i, ch)];
                let v01 = src[(y0i, x1i, ch)];
                let v10 = src[(y1i, x0i, ch)];
                let v11 = src[(y1i, x1i, ch)];
                out[(oy, ox, ch)] = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01)
                    + ty * ((1.0 - tx) * v10 + tx * v11);
            }
        }
    }
    out
}

/// Nearest-neighbour resize with half-pixel centers; used for masks.
pub fn nearest_resize(src: &Array2<u8>, oh: usize, ow: usize) -> Array2<u8> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((oh, ow), |(oy, ox)| {
        let sy = (((oy as f64 + 0.5) * h as f64 / oh as f64).floor() as i64).clamp(0, h as i64 - 1);
        let sx = (((ox as f64 + 0.5) * w as f64 / ow as f64).floor() as i64).clamp(0, w as i64 - 1);
        src[(sy as usize, sx as usize)]
    })
}

/// Fraction of foreground in each `factor`x`factor` cell.
pub fn area_fraction_downsample(mask: &Array2<u8>, factor: usize) -> Array2<f64> {
    let (h, w) = mask.dim();
    assert!(factor > 0 && h % factor == 0 && w % factor == 0, "mask {h}x{w} not divisible by {factor}");
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] != 0 {
                out[(y / factor, x / factor)] += 1.0;
            }
        }
    }
    let cell = (factor * factor) as f64;
    out.mapv_inplace(|v| v / cell);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn resize_identity_at_same_size() {
        let src = Array3::from_shape_fn((5, 7, 3), |(y, x, c)| (y * 100 + x * 10 + c) as f64);
        let out = bilinear_resize(&src, 5, 7);
        assert_eq!(src, out);
        let m = Array2::from_shape_fn((5, 7), |(y, x)| ((y + x) % 2) as u8);
        assert_eq!(nearest_resize(&m, 5, 7), m);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let src = Array3::from_elem((4, 4, 2), 0.37);
        let out = bilinear_resize(&src, 9, 5);
        for v in out.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn area_fraction_counts_cells() {
        let m = array![[1u8, 1, 0, 0], [1, 0, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]];
        let f = area_fraction_downsample(&m, 2);
        assert_eq!(f, array![[0.75, 0.0], [0.0, 1.0]]);
    }
}
