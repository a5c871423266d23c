//! Pedestrian identity enhancement stream: a small localization network
//! regresses an affine crop of the shielding image, the crop is resampled
//! to full input size and passed through a backbone with its own weights.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig, BackboneOutput, BackboneVars};
use crate::error::{shape_err, Result};
use crate::nn::{stack_images, Conv2d, Ctx, Linear, ParamStore};
use crate::tensor::Array;
use crate::types::{seeded_rng, FeatureVector, ImageTensor, RngSeed};

/// Affine map from output to input coordinates, both normalized to
/// `[-1, 1]`: `(x_s, y_s) = theta · (x_t, y_t, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub theta: [[f64; 3]; 2],
}

/// Top 30% of the image height, full width.
pub const HEAD_SHOULDER_PRIOR: AffineParams = AffineParams { theta: [[1.0, 0.0, 0.0], [0.0, 0.3, -0.7]] };

pub const IDENTITY: AffineParams = AffineParams { theta: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] };

impl AffineParams {
    pub fn flat(&self) -> [f64; 6] {
        let t = self.theta;
        [t[0][0], t[0][1], t[0][2], t[1][0], t[1][1], t[1][2]]
    }

    pub fn from_flat(v: &[f64]) -> Self {
        Self { theta: [[v[0], v[1], v[2]], [v[3], v[4], v[5]]] }
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }

    /// Bounding box `(y0, y1, x0, x1)` in pixels of the source region the
    /// crop reads, clipped to the image.
    pub fn source_bbox(&self, height: usize, width: usize) -> (f64, f64, f64, f64) {
        let t = self.theta;
        let corners = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)];
        let (mut y0, mut y1, mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (xt, yt) in corners {
            let xs = t[0][0] * xt + t[0][1] * yt + t[0][2];
            let ys = t[1][0] * xt + t[1][1] * yt + t[1][2];
            let px = ((xs + 1.0) * width as f64 / 2.0).clamp(0.0, width as f64);
            let py = ((ys + 1.0) * height as f64 / 2.0).clamp(0.0, height as f64);
            x0 = x0.min(px);
            x1 = x1.max(px);
            y0 = y0.min(py);
            y1 = y1.max(py);
        }
        (y0, y1, x0, x1)
    }
}

/// Intersection over union of two `(y0, y1, x0, x1)` boxes.
pub fn box_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let area = |r: (f64, f64, f64, f64)| (r.1 - r.0).max(0.0) * (r.3 - r.2).max(0.0);
    let inter = area((a.0.max(b.0), a.1.min(b.1), a.2.max(b.2), a.3.min(b.3)));
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Sampling grid `N × h × w × 2` for `N × 2 × 3` thetas at pixel centres.
pub fn affine_grid<'g>(theta: Var<'g>, height: usize, width: usize) -> Var<'g> {
    let n = theta.shape()[0];
    let mut base = Vec::with_capacity(height * width * 3);
    for i in 0..height {
        for j in 0..width {
            base.extend_from_slice(&[(2 * j + 1) as f64 / width as f64 - 1.0, (2 * i + 1) as f64 / height as f64 - 1.0, 1.0]);
        }
    }
    let base = theta.graph().constant(Array::new([height * width, 3], base)).broadcast_to(&[n, height * width, 3]);
    base.matmul(theta.transpose_last()).reshape(&[n, height, width, 2])
}

/// Differentiable bilinear crop of `N × C × H × W` images to their own size.
pub fn stn_sample_var<'g>(images: Var<'g>, theta: Var<'g>) -> Var<'g> {
    let s = images.shape();
    images.grid_sample(affine_grid(theta, s[2], s[3]))
}

/// Crop of one image; samples outside the image read as 0.
pub fn stn_sample(image: &ImageTensor, theta: &AffineParams) -> Result<ImageTensor> {
    let g = Graph::new();
    let x = g.constant(stack_images([image])?);
    let t = g.constant(Array::new([1, 2, 3], theta.flat().to_vec()));
    let out = stn_sample_var(x, t);
    let s = out.shape();
    ImageTensor::from_chw(&Array::clone(&out.value()).reshape([s[1], s[2], s[3]]))
}

/// Convolutional + fully connected regressor of theta. The last layer is
/// zero-initialized with the head-shoulder prior as bias.
pub struct Localizer {
    conv1: Conv2d,
    conv2: Conv2d,
    fc1: Linear,
    fc2: Linear,
}

impl Localizer {
    pub fn new(prefix: &str) -> Self {
        Self {
            conv1: Conv2d::new(format!("{prefix}.conv1"), 3, 8, 5, 2, 2),
            conv2: Conv2d::new(format!("{prefix}.conv2"), 8, 16, 3, 2, 1),
            fc1: Linear::new(format!("{prefix}.fc1"), 16, 32, true),
            fc2: Linear::new(format!("{prefix}.fc2"), 32, 6, true),
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: RngSeed) {
        let mut rng = seeded_rng(seed);
        self.conv1.init(store, 1.0, &mut rng);
        self.conv2.init(store, 1.0, &mut rng);
        self.fc1.init(store, 0.1, &mut rng);
        store.insert_param(self.fc2.weight_name(), Array::zeros([32, 6]));
        store.insert_param(self.fc2.bias_name(), Array::new([6], HEAD_SHOULDER_PRIOR.flat().to_vec()));
    }

    /// Thetas `N × 2 × 3` for `N × 3 × H × W` images.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, images: Var<'g>) -> Var<'g> {
        let n = images.shape()[0];
        let h = self.conv2.forward(ctx, self.conv1.forward(ctx, images).relu()).relu();
        let s = h.shape();
        let pooled = h.reshape(&[n, s[1], s[2] * s[3]]).mean_axis(2, false);
        self.fc2.forward(ctx, self.fc1.forward(ctx, pooled).relu()).reshape(&[n, 2, 3])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PieVars<'g> {
    pub theta: Var<'g>,
    pub crops: Var<'g>,
    pub out: BackboneVars<'g>,
}

pub struct PieStream {
    pub localizer: Localizer,
    pub backbone: Backbone,
}

impl PieStream {
    pub fn new(prefix: &str, config: BackboneConfig) -> Result<Self> {
        Ok(Self { localizer: Localizer::new(&format!("{prefix}.loc")), backbone: Backbone::new(&format!("{prefix}.backbone"), config)? })
    }

    pub fn init(&self, store: &mut ParamStore, seed: RngSeed) {
        self.localizer.init(store, seed.derive("localizer", 0));
        self.backbone.init(store, seed.derive("backbone", 0));
    }

    /// Forward over `N × 3 × H × W` shielding images.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, images: Var<'g>) -> Result<PieVars<'g>> {
        let c = &self.backbone.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != c.input_height || s[3] != c.input_width {
            return Err(shape_err("PIE input", [0, 3, c.input_height, c.input_width], s));
        }
        let theta = self.localizer.forward(ctx, images);
        let crops = stn_sample_var(images, theta);
        let out = self.backbone.forward(ctx, crops)?;
        Ok(PieVars { theta, crops, out })
    }
}

/// Inference-mode theta for one shielding image.
pub fn stn_localize(image: &ImageTensor, stream: &PieStream, weights: &ParamStore) -> Result<AffineParams> {
    let g = Graph::new();
    let ctx = Ctx::new(&g, weights, false);
    let theta = stream.localizer.forward(&ctx, g.constant(stack_images([image])?));
    Ok(AffineParams::from_flat(theta.value().data()))
}

/// Inference-mode forward of one shielding image: theta and the identity
/// feature of the crop.
pub fn pie_forward(image: &ImageTensor, stream: &PieStream, weights: &ParamStore) -> Result<(AffineParams, BackboneOutput)> {
    let g = Graph::new();
    let ctx = Ctx::new(&g, weights, false);
    let v = stream.forward(&ctx, g.constant(stack_images([image])?))?;
    let out = BackboneOutput {
        feature: FeatureVector(v.out.bn_feature.value().data().to_vec()),
        pre_bn: FeatureVector(v.out.feature.value().data().to_vec()),
        logits: v.out.logits.value().data().to_vec(),
    };
    Ok((AffineParams::from_flat(v.theta.value().data()), out))
}
