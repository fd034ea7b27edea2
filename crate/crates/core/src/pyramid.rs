//! Simple feature pyramid: the single 1/16-scale base map is expanded into
//! four scales with strided transposed convolutions (1/4, 1/8), an identity
//! branch (1/16) and a 2x2 max pool (1/32). No top-down fusion. Each branch
//! ends in a 1x1 convolution, channel norm, 3x3 convolution and another
//! channel norm, all at the model width.

use crate::autodiff::Var;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Session};

/// The four feature maps at 1/4, 1/8, 1/16 and 1/32 of the input image.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub c2: Var,
    pub c3: Var,
    pub c4: Var,
    pub c5: Var,
}

pub fn init_params(store: &mut ParamStore, cfg: &RunConfig) {
    let d = cfg.d_model;
    store.init_deconv(cfg.seed, "pyr.c2.up", d, d, 4);
    store.init_deconv(cfg.seed, "pyr.c3.up", d, d, 2);
    for branch in ["c2", "c3", "c4", "c5"] {
        let p = format!("pyr.{branch}");
        store.init_linear(cfg.seed, &format!("{p}.conv1"), d, d);
        store.init_layer_norm(&format!("{p}.ln1"), d);
        store.init_conv3x3(cfg.seed, &format!("{p}.conv3"), d, d);
        store.init_layer_norm(&format!("{p}.ln2"), d);
    }
}

fn refine(sess: &mut Session, branch: &str, x: Var) -> Var {
    let p = format!("pyr.{branch}");
    let x = sess.conv1x1(&format!("{p}.conv1"), x);
    let x = sess.layer_norm_hwc(&format!("{p}.ln1"), x);
    let x = sess.conv3x3(&format!("{p}.conv3"), x);
    sess.layer_norm_hwc(&format!("{p}.ln2"), x)
}

/// Expand the base feature into the four-scale pyramid.
pub fn build_pyramid(sess: &mut Session, base: Var) -> Result<FeaturePyramid> {
    let shape = sess.tape.shape(base).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "pyramid input must be [h, w, d], got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "base grid {h}x{w} must have even dimensions so the 1/32 scale is integral"
        )));
    }
    let up4 = sess.deconv("pyr.c2.up", base, 4);
    let c2 = refine(sess, "c2", up4);
    let up2 = sess.deconv("pyr.c3.up", base, 2);
    let c3 = refine(sess, "c3", up2);
    let c4 = refine(sess, "c4", base);
    let pooled = sess.tape.max_pool2(base);
    let c5 = refine(sess, "c5", pooled);
    Ok(FeaturePyramid { c2, c3, c4, c5 })
}
