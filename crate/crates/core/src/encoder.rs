//! Patch-embedding transformer encoder producing the single 1/16-scale base
//! feature map, plus a binary interchange format so externally computed
//! feature grids can replace the built-in encoder.

use std::io::Read;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::autodiff::Var;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{value3, ParamStore, Session};
use crate::util::seeded_rng;

pub const PATCH: usize = 16;
pub const HEADS: usize = 4;
const MLP_RATIO: usize = 4;

/// Magic bytes of the feature interchange format.
const FEATURE_MAGIC: &[u8; 4] = b"GSFT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    ToyVit,
    Imported,
}

/// A 1/16-scale feature grid of width `d`.
#[derive(Debug, Clone)]
pub struct BaseFeature {
    pub feature: Array3<f64>,
    pub source: FeatureSource,
}

/// Register the encoder parameters on a store.
pub fn init_params(store: &mut ParamStore, cfg: &RunConfig) {
    let d = cfg.d_model;
    let grid = cfg.base_grid();
    store.init_linear(cfg.seed, "enc.patch", PATCH * PATCH * 3, d);
    store.init_embedding(cfg.seed, "enc.pos", grid * grid, d, 0.02);
    for i in 0..cfg.encoder_depth {
        let p = format!("enc.blk{i}");
        store.init_layer_norm(&format!("{p}.ln1"), d);
        store.init_linear(cfg.seed, &format!("{p}.attn.q"), d, d);
        store.init_linear(cfg.seed, &format!("{p}.attn.k"), d, d);
        store.init_linear(cfg.seed, &format!("{p}.attn.v"), d, d);
        store.init_linear(cfg.seed, &format!("{p}.attn.o"), d, d);
        store.init_layer_norm(&format!("{p}.ln2"), d);
        store.init_linear(cfg.seed, &format!("{p}.mlp.0"), d, MLP_RATIO * d);
        store.init_linear(cfg.seed, &format!("{p}.mlp.1"), MLP_RATIO * d, d);
    }
    store.init_layer_norm("enc.ln", d);
}

/// Rearrange `[H, W, 3]` into non-overlapping 16x16 patches `[n, 768]`,
/// patches in row-major grid order, pixels row-major within a patch.
pub fn patchify(image: &Array3<f64>) -> Result<Array2<f64>> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    if h % PATCH != 0 || w % PATCH != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} not divisible by the patch size {PATCH}"
        )));
    }
    let (gh, gw) = (h / PATCH, w / PATCH);
    let mut out = Array2::<f64>::zeros((gh * gw, PATCH * PATCH * 3));
    for py in 0..gh {
        for px in 0..gw {
            let row = py * gw + px;
            for y in 0..PATCH {
                for x in 0..PATCH {
                    for ch in 0..3 {
                        out[(row, (y * PATCH + x) * 3 + ch)] =
                            image[(py * PATCH + y, px * PATCH + x, ch)];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Run the encoder on a standardized image, returning the `[h, w, d]` grid.
pub fn encode(sess: &mut Session, cfg: &RunConfig, image: &Array3<f64>) -> Result<Var> {
    let (h, w, _) = image.dim();
    if h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Shape(format!(
            "image {h}x{w} does not match the configured size {}",
            cfg.image_size
        )));
    }
    let grid = cfg.base_grid();
    let patches = patchify(image)?;
    let tokens = sess.tape.leaf(patches.into_dyn());
    let mut x = sess.linear("enc.patch", tokens);
    let pos = sess.p("enc.pos");
    x = sess.tape.add(x, pos);
    for i in 0..cfg.encoder_depth {
        let p = format!("enc.blk{i}");
        let normed = sess.layer_norm(&format!("{p}.ln1"), x);
        let (attn, _) = sess.attention(&format!("{p}.attn"), normed, normed, normed, HEADS);
        x = sess.tape.add(x, attn);
        let normed = sess.layer_norm(&format!("{p}.ln2"), x);
        let hidden = sess.linear(&format!("{p}.mlp.0"), normed);
        let hidden = sess.tape.gelu(hidden);
        let mlp = sess.linear(&format!("{p}.mlp.1"), hidden);
        x = sess.tape.add(x, mlp);
    }
    x = sess.layer_norm("enc.ln", x);
    Ok(sess.tape.reshape(x, &[grid, grid, cfg.d_model]))
}

/// Encode and extract the value as a [`BaseFeature`].
pub fn encode_value(store: &ParamStore, cfg: &RunConfig, image: &Array3<f64>) -> Result<BaseFeature> {
    let mut sess = Session::new(store);
    let var = encode(&mut sess, cfg, image)?;
    Ok(BaseFeature {
        feature: value3(&sess.tape, var),
        source: FeatureSource::ToyVit,
    })
}

/// Write a feature grid: magic, `h`/`w`/`d` as u32 little-endian, then
/// row-major f32 little-endian payload.
pub fn export_features(base: &BaseFeature, path: &Path) -> Result<()> {
    let (h, w, d) = base.feature.dim();
    let mut buf = Vec::with_capacity(16 + h * w * d * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    for dim in [h as u32, w as u32, d as u32] {
        buf.extend_from_slice(&dim.to_le_bytes());
    }
    for v in base.feature.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    crate::util::write_atomic(path, &buf)
}

/// Read a feature grid written by [`export_features`].
pub fn import_features(path: &Path) -> Result<BaseFeature> {
    let err = |message: String| Error::FeatureFile {
        path: path.to_path_buf(),
        message,
    };
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header)
        .map_err(|_| err("truncated header".into()))?;
    if &header[0..4] != FEATURE_MAGIC {
        return Err(err("bad magic bytes".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
    let (h, w, d) = (dim(4), dim(8), dim(12));
    let expected = h * w * d * 4;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() != expected {
        return Err(err(format!(
            "payload is {} bytes, header {h}x{w}x{d} requires {expected}",
            payload.len()
        )));
    }
    let mut feature = Array3::<f64>::zeros((h, w, d));
    for (i, v) in feature.iter_mut().enumerate() {
        let bytes: [u8; 4] = payload[i * 4..i * 4 + 4].try_into().unwrap();
        *v = f32::from_le_bytes(bytes) as f64;
    }
    Ok(BaseFeature {
        feature,
        source: FeatureSource::Imported,
    })
}

/// Fix an imported grid to the model width: identity when widths already
/// agree, otherwise a deterministic 1x1 projection seeded by the two widths.
pub fn conform_width(base: &BaseFeature, d_model: usize) -> BaseFeature {
    let (h, w, d) = base.feature.dim();
    if d == d_model {
        return base.clone();
    }
    let mut rng = seeded_rng(
        (d as u64) << 32 | d_model as u64,
        "import-projection",
    );
    let std = 1.0 / (d as f64).sqrt();
    let proj = Array2::from_shape_fn((d, d_model), |_| {
        use rand::Rng;
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    });
    let mut feature = Array3::<f64>::zeros((h, w, d_model));
    for y in 0..h {
        for x in 0..w {
            for o in 0..d_model {
                let mut acc = 0.0;
                for i in 0..d {
                    acc += base.feature[(y, x, i)] * proj[(i, o)];
                }
                feature[(y, x, o)] = acc;
            }
        }
    }
    BaseFeature {
        feature,
        source: base.source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn cfg(image_size: usize, d: usize, depth: usize) -> RunConfig {
        RunConfig {
            image_size,
            d_model: d,
            encoder_depth: depth,
            num_queries: 4,
            decoder_layers: 1,
            seed: 3,
            ..RunConfig::default()
        }
    }

    #[test]
    fn grid_shapes_follow_patch_arithmetic() {
        for (size, expect) in [(384usize, 24usize), (64, 4)] {
            let cfg = cfg(size, 16, 1);
            let mut store = ParamStore::new();
            init_params(&mut store, &cfg);
            let img = Array3::from_elem((size, size, 3), 0.1);
            let base = encode_value(&store, &cfg, &img).unwrap();
            assert_eq!(base.feature.dim(), (expect, expect, 16));
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = cfg(64, 16, 2);
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg);
        let img = Array3::from_shape_fn((64, 64, 3), |(y, x, c)| ((y * 3 + x + c) as f64).sin());
        let a = encode_value(&store, &cfg, &img).unwrap();
        let b = encode_value(&store, &cfg, &img).unwrap();
        assert_eq!(a.feature, b.feature);
    }

    #[test]
    fn zero_image_and_zero_blocks_leave_position_pathway() {
        let cfg = cfg(32, 8, 1);
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg);
        // Zero everything that touches image content or block outputs; only
        // the positional table and final norm remain active.
        for (name, value) in store.iter_mut() {
            if name.starts_with("enc.patch") || name.contains(".blk") {
                *value = ndarray::ArrayD::zeros(value.raw_dim());
            }
        }
        // Layer norm gains inside blocks must stay 1 to keep the check about
        // weights only; reset them.
        for i in 0..1 {
            for ln in ["ln1", "ln2"] {
                let name = format!("enc.blk{i}.{ln}.g");
                *store.get_mut(&name) = ndarray::ArrayD::from_elem(IxDyn(&[8]), 1.0);
            }
        }
        let zero = Array3::zeros((32, 32, 3));
        let other = Array3::from_elem((32, 32, 3), 0.73);
        let a = encode_value(&store, &cfg, &zero).unwrap();
        let b = encode_value(&store, &cfg, &other).unwrap();
        assert_eq!(a.feature, b.feature, "image content must not reach the output");
        assert!(a.feature.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_size_is_rejected() {
        let cfg = cfg(64, 16, 1);
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg);
        let img = Array3::zeros((32, 32, 3));
        assert!(encode_value(&store, &cfg, &img).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.bin");
        // Values chosen representable in f32 so the round trip is exact.
        let feature = Array3::from_shape_fn((3, 5, 4), |(y, x, c)| (y * 20 + x * 4 + c) as f64 * 0.5);
        let base = BaseFeature {
            feature: feature.clone(),
            source: FeatureSource::ToyVit,
        };
        export_features(&base, &path).unwrap();
        let back = import_features(&path).unwrap();
        assert_eq!(back.feature, feature);
        assert_eq!(back.source, FeatureSource::Imported);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.bin");
        let base = BaseFeature {
            feature: Array3::from_elem((2, 2, 2), 1.0),
            source: FeatureSource::ToyVit,
        };
        export_features(&base, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = import_features(&path).unwrap_err();
        assert!(err.to_string().contains("payload"));
    }

    #[test]
    fn constant_file_imports_as_constant_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ones.bin");
        let base = BaseFeature {
            feature: Array3::from_elem((24, 24, 16), 1.0),
            source: FeatureSource::ToyVit,
        };
        export_features(&base, &path).unwrap();
        let back = import_features(&path).unwrap();
        assert!(back.feature.iter().all(|&v| v == 1.0));
        // Width conformance: identity when d matches, projection otherwise.
        let same = conform_width(&back, 16);
        assert_eq!(same.feature, back.feature);
        let projected = conform_width(&back, 8);
        assert_eq!(projected.feature.dim(), (24, 24, 8));
    }
}
