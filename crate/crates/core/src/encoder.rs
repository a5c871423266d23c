//! Mask derivation from parse maps and the derived input images.
//!
//! From one parse map the encoder builds three binary masks (clothes,
//! foreground, upper) and composes the foreground image, the shielding image
//! (upper clothes painted white) and the clothing-degraded image whose
//! grayscale pyramid supervises the CAD attention maps.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, IgclError, Result};
use crate::tensor::Array;
use crate::types::{ImageTensor, ParseClass, ParseLabelMap, INPUT_HEIGHT, INPUT_WIDTH};

/// Downsampling factors of the three distillation scales relative to the
/// input (96×32, 48×16, 24×8 at 384×128).
pub const TARGET_STRIDES: [usize; 3] = [4, 8, 16];

/// Which parse classes count as clothes, upper clothes and foreground.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub clothes: BTreeSet<ParseClass>,
    pub upper: BTreeSet<ParseClass>,
    pub foreground: BTreeSet<ParseClass>,
}

impl Default for ClassPartition {
    fn default() -> Self {
        use ParseClass::*;
        Self {
            clothes: [UpperClothes, Skirt, Pants, Dress].into_iter().collect(),
            upper: [UpperClothes, Dress].into_iter().collect(),
            foreground: ParseClass::ALL.iter().copied().filter(|&c| c != Background).collect(),
        }
    }
}

impl ClassPartition {
    /// Default partition with extra accessory classes counted as clothes
    /// (e.g. belt, scarf, bag).
    pub fn with_extra_clothes(extra: &[ParseClass]) -> Result<Self> {
        let mut p = Self::default();
        p.clothes.extend(extra.iter().copied());
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.upper.is_subset(&self.clothes) {
            return Err(IgclError::InvalidArgument("upper classes must be a subset of clothes classes".into()));
        }
        if !self.clothes.is_subset(&self.foreground) {
            return Err(IgclError::InvalidArgument("clothes classes must be a subset of foreground classes".into()));
        }
        let expected: BTreeSet<ParseClass> = ParseClass::ALL[1..].iter().copied().collect();
        if self.foreground != expected {
            return Err(IgclError::InvalidArgument("foreground must be every non-background class".into()));
        }
        Ok(())
    }
}

/// A binary `H×W` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self { height, width, bits }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.size() == other.size() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub clothes: Mask,
    pub foreground: Mask,
    pub upper: Mask,
}

impl MaskSet {
    pub fn size(&self) -> (usize, usize) {
        self.foreground.size()
    }
}

pub fn derive_masks(parse: &ParseLabelMap, partition: &ClassPartition) -> MaskSet {
    let (h, w) = parse.size();
    let of = |set: &BTreeSet<ParseClass>| Mask::from_fn(h, w, |y, x| set.contains(&parse.get(y, x)));
    MaskSet { clothes: of(&partition.clothes), foreground: of(&partition.foreground), upper: of(&partition.upper) }
}

fn check_size(context: &'static str, image: &ImageTensor, masks: &MaskSet) -> Result<()> {
    if image.size() != masks.size() {
        return Err(shape_err(context, masks.size(), image.size()));
    }
    Ok(())
}

/// Replace every pixel selected by `mask` with `value` on all channels.
fn fill_masked(image: &ImageTensor, mask: &Mask, value: f64) -> ImageTensor {
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.get(y, x) {
                out.pixel_mut(y, x).iter_mut().for_each(|v| *v = value);
            }
        }
    }
    out
}

/// Image multiplied by the foreground mask; background becomes 0.
pub fn compose_foreground(image: &ImageTensor, masks: &MaskSet) -> Result<ImageTensor> {
    check_size("compose_foreground", image, masks)?;
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if !masks.foreground.get(y, x) {
                out.pixel_mut(y, x).iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    Ok(out)
}

/// The given image with its upper-clothes region set to 1 on all channels.
///
/// Applied to the foreground image this is the shielding image fed to the
/// identity-enhancement stream.
pub fn compose_shielding(foreground_image: &ImageTensor, masks: &MaskSet) -> Result<ImageTensor> {
    check_size("compose_shielding", foreground_image, masks)?;
    Ok(fill_masked(foreground_image, &masks.upper, 1.0))
}

/// Clothes pixels replaced by `alpha`; everything else untouched.
pub fn degrade_clothing(image: &ImageTensor, masks: &MaskSet, alpha: f64) -> Result<ImageTensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(IgclError::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    check_size("degrade_clothing", image, masks)?;
    Ok(fill_masked(image, &masks.clothes, alpha))
}

/// Grayscale pyramid of the degraded image at strides 4, 8 and 16.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradedTargets(pub [Array; 3]);

/// Targets for a full-size 384×128 degraded image.
pub fn multiscale_targets(degraded: &ImageTensor) -> Result<DegradedTargets> {
    multiscale_targets_at(degraded, (INPUT_HEIGHT, INPUT_WIDTH))
}

/// Targets for a degraded image of the given model input size.
pub fn multiscale_targets_at(degraded: &ImageTensor, input: (usize, usize)) -> Result<DegradedTargets> {
    if degraded.size() != input {
        return Err(shape_err("multiscale_targets", input, degraded.size()));
    }
    let (h, w) = input;
    if h % 16 != 0 || w % 16 != 0 {
        return Err(IgclError::InvalidArgument(format!("input size {h}×{w} must be divisible by 16")));
    }
    let c = degraded.channels() as f64;
    let gray: Vec<f64> = degraded.data().chunks(degraded.channels()).map(|px| px.iter().sum::<f64>() / c).collect();
    Ok(DegradedTargets(TARGET_STRIDES.map(|s| block_mean(&gray, h, w, s))))
}

fn block_mean(plane: &[f64], h: usize, w: usize, s: usize) -> Array {
    let (oh, ow) = (h / s, w / s);
    let mut out = vec![0.0; oh * ow];
    for y in 0..h {
        for x in 0..w {
            out[(y / s) * ow + x / s] += plane[y * w + x];
        }
    }
    let n = (s * s) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Array::new([oh, ow], out)
}
