//! Semantic attention and body jigsaw stream: same-identity half-body
//! swaps over foreground images, fed through the shared backbone.

use crate::autograd::Var;
use crate::backbone::{Backbone, BackboneVars};
use crate::error::{shape_err, IgclError, Result};
use crate::nn::Ctx;
use crate::types::{Batch, ImageTensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JigsawPlan {
    pub pairs: Vec<(usize, usize)>,
    /// First row of the lower half.
    pub split_row: usize,
}

/// The upper half keeps the extra row when `height` is odd.
pub fn split_row(height: usize) -> usize {
    height.div_ceil(2)
}

/// Pairs the first two entries of every identity group of a PK batch.
pub fn plan_jigsaw(batch: &Batch, height: usize) -> JigsawPlan {
    let pairs = if batch.k < 2 { Vec::new() } else { (0..batch.p).map(|g| (g * batch.k, g * batch.k + 1)).collect() };
    JigsawPlan { pairs, split_row: split_row(height) }
}

/// For each pair `(a, b)`: `a` gets the upper half of `a` over the lower
/// half of `b`, and `b` the upper half of `b` over the lower half of `a`.
pub fn apply_jigsaw(images: &[ImageTensor], plan: &JigsawPlan) -> Result<Vec<ImageTensor>> {
    let mut out = images.to_vec();
    let mut used = vec![false; images.len()];
    for &(a, b) in &plan.pairs {
        if a >= images.len() || b >= images.len() {
            return Err(IgclError::InvalidArgument(format!("jigsaw pair ({a}, {b}) out of range for {} images", images.len())));
        }
        if a == b || used[a] || used[b] {
            return Err(IgclError::InvalidArgument(format!("jigsaw pair ({a}, {b}) reuses an image")));
        }
        used[a] = true;
        used[b] = true;
        let (ia, ib) = (&images[a], &images[b]);
        if ia.size() != ib.size() || ia.channels() != ib.channels() {
            return Err(shape_err("apply_jigsaw", ia.size(), ib.size()));
        }
        let offset = plan.split_row.min(ia.height()) * ia.width() * ia.channels();
        let mut na = ia.data().to_vec();
        let mut nb = ib.data().to_vec();
        na[offset..].copy_from_slice(&ib.data()[offset..]);
        nb[offset..].copy_from_slice(&ia.data()[offset..]);
        out[a] = ImageTensor::new(ia.height(), ia.width(), ia.channels(), na)?;
        out[b] = ImageTensor::new(ib.height(), ib.width(), ib.channels(), nb)?;
    }
    Ok(out)
}

/// Runs jigsawed foreground images through the backbone. The weights are
/// the backbone's own; nothing is copied.
pub fn saj_forward<'g>(ctx: &Ctx<'g>, backbone: &Backbone, images: Var<'g>) -> Result<BackboneVars<'g>> {
    backbone.forward(ctx, images)
}
