//! Clothing attention degradation stream.
//!
//! A five-stage residual convolutional trunk. After stages 1, 2 and 3 a
//! single-channel spatial attention map is computed from the stage output
//! with two 1×1 convolutions, `F = σ(CV2 * δ(CV1 * Φ + b1) + b2)`, and the
//! next stage consumes `F ⊙ Φ`. The final map is pooled (max + mean) and
//! projected to the degradation feature.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::Variant;
use crate::encoder::{DegradedTargets, TARGET_STRIDES};
use crate::error::{shape_err, IgclError, Result};
use crate::nn::{stack_images, Conv2d, Ctx, Linear, ParamStore, ReidHead};
use crate::tensor::Array;
use crate::types::{seeded_rng, FeatureVector, ImageTensor, Rng, RngSeed, FEATURE_DIM, INPUT_HEIGHT, INPUT_WIDTH};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrunkConfig {
    pub variant: Variant,
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of the stem and of stages 1 to 4.
    pub widths: [usize; 5],
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl TrunkConfig {
    pub fn full(num_classes: usize) -> Self {
        Self {
            variant: Variant::Full,
            input_height: INPUT_HEIGHT,
            input_width: INPUT_WIDTH,
            widths: [64, 256, 512, 1024, 2048],
            feature_dim: FEATURE_DIM,
            num_classes,
        }
    }

    pub fn tiny(num_classes: usize) -> Self {
        Self { variant: Variant::Tiny, input_height: 64, input_width: 32, widths: [16, 32, 64, 128, 256], feature_dim: 64, num_classes }
    }

    pub fn for_variant(variant: Variant, num_classes: usize) -> Self {
        match variant {
            Variant::Full => Self::full(num_classes),
            Variant::Tiny => Self::tiny(num_classes),
        }
    }

    /// `(channels, height, width)` of Φ₁, Φ₂, Φ₃ and the final map.
    pub fn stage_shapes(&self) -> [(usize, usize, usize); 4] {
        let at = |i: usize, stride: usize| (self.widths[i], self.input_height / stride, self.input_width / stride);
        [at(1, 4), at(2, 8), at(3, 16), at(4, 16)]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.input_height.is_multiple_of(16) || !self.input_width.is_multiple_of(16) || self.input_height == 0 || self.input_width == 0 {
            return Err(IgclError::InvalidArgument(format!(
                "trunk input {}x{} must be a positive multiple of 16",
                self.input_height, self.input_width
            )));
        }
        if self.widths.iter().any(|&w| w < 4) || self.feature_dim == 0 || self.num_classes == 0 {
            return Err(IgclError::InvalidArgument("trunk widths must be at least 4 and dims positive".into()));
        }
        Ok(())
    }
}

struct Bottleneck {
    reduce: Conv2d,
    spatial: Conv2d,
    expand: Conv2d,
    shortcut: Conv2d,
}

impl Bottleneck {
    fn new(name: &str, input: usize, output: usize, stride: usize) -> Self {
        let mid = output / 4;
        Self {
            reduce: Conv2d::new(format!("{name}.reduce"), input, mid, 1, 1, 0),
            spatial: Conv2d::new(format!("{name}.spatial"), mid, mid, 3, stride, 1),
            expand: Conv2d::new(format!("{name}.expand"), mid, output, 1, 1, 0),
            shortcut: Conv2d::new(format!("{name}.shortcut"), input, output, 1, stride, 0),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.reduce.init(store, 1.0, rng);
        self.spatial.init(store, 1.0, rng);
        self.expand.init(store, 0.5, rng);
        self.shortcut.init(store, 0.5, rng);
    }

    fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let h = self.reduce.forward(ctx, x).relu();
        let h = self.spatial.forward(ctx, h).relu();
        self.expand.forward(ctx, h).add(self.shortcut.forward(ctx, x)).relu()
    }
}

/// The pair of 1×1 convolutions producing one attention map.
pub struct Cama {
    pub cv1: Conv2d,
    pub cv2: Conv2d,
}

impl Cama {
    fn new(name: &str, channels: usize) -> Self {
        let hidden = (channels / 16).max(4);
        Self { cv1: Conv2d::new(format!("{name}.cv1"), channels, hidden, 1, 1, 0), cv2: Conv2d::new(format!("{name}.cv2"), hidden, 1, 1, 1, 0) }
    }

    /// `σ(CV2 * δ(CV1 * Φ + b1) + b2)`, shape `N × 1 × h × w`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, phi: Var<'g>) -> Var<'g> {
        self.cv2.forward(ctx, self.cv1.forward(ctx, phi).relu()).sigmoid()
    }
}

/// Attention maps of one image next to the degraded targets they are
/// distilled towards.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPyramid {
    pub maps: [Array; 3],
    pub targets: DegradedTargets,
}

impl AttentionPyramid {
    pub fn new(maps: [Array; 3], targets: DegradedTargets) -> Result<Self> {
        for (m, t) in maps.iter().zip(&targets.0) {
            if m.shape() != t.shape() {
                return Err(shape_err("AttentionPyramid", t.shape(), m.shape()));
            }
        }
        Ok(Self { maps, targets })
    }
}

/// Graph outputs of the stream for a batch.
#[derive(Debug, Clone, Copy)]
pub struct CadVars<'g> {
    /// Stage outputs Φ₁..Φ₃ before gating.
    pub phi: [Var<'g>; 3],
    /// Attention maps F₁..F₃, each `N × 1 × h × w`.
    pub attention: [Var<'g>; 3],
    pub final_map: Var<'g>,
    pub x_deg: Var<'g>,
    pub logits: Var<'g>,
}

/// Inference output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CadOutput {
    /// F₁..F₃ as `h × w` arrays.
    pub attention: [Array; 3],
    /// Φ₁ as `C × h × w`.
    pub phi1: Array,
    /// Final map as `C × h × w`.
    pub final_map: Array,
    pub x_deg: FeatureVector,
    pub logits: Vec<f64>,
}

pub struct CadStream {
    pub prefix: String,
    pub config: TrunkConfig,
    stem: [Conv2d; 2],
    stages: [Bottleneck; 4],
    pub cama: [Cama; 3],
    project: Linear,
    head: ReidHead,
}

impl CadStream {
    pub fn new(prefix: &str, config: TrunkConfig) -> Result<Self> {
        config.validate()?;
        let w = config.widths;
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            stem: [Conv2d::new(n("stem.conv1"), 3, w[0], 7, 2, 3), Conv2d::new(n("stem.conv2"), w[0], w[0], 3, 2, 1)],
            stages: [
                Bottleneck::new(&n("stage1"), w[0], w[1], 1),
                Bottleneck::new(&n("stage2"), w[1], w[2], 2),
                Bottleneck::new(&n("stage3"), w[2], w[3], 2),
                Bottleneck::new(&n("stage4"), w[3], w[4], 1),
            ],
            cama: [Cama::new(&n("cama1"), w[1]), Cama::new(&n("cama2"), w[2]), Cama::new(&n("cama3"), w[3])],
            project: Linear::new(n("project"), w[4], config.feature_dim, true),
            head: ReidHead::new(prefix, config.feature_dim, config.num_classes),
            prefix: prefix.to_string(),
            config,
        })
    }

    pub fn init(&self, store: &mut ParamStore, seed: RngSeed) {
        let mut rng = seeded_rng(seed);
        for c in &self.stem {
            c.init(store, 1.0, &mut rng);
        }
        for s in &self.stages {
            s.init(store, &mut rng);
        }
        for c in &self.cama {
            c.cv1.init(store, 1.0, &mut rng);
            c.cv2.init(store, 0.1, &mut rng);
        }
        self.project.init(store, 0.02, &mut rng);
        self.head.init(store, &mut rng);
    }

    /// Forward over original `N × 3 × H × W` images.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, images: Var<'g>) -> Result<CadVars<'g>> {
        let s = images.shape();
        let c = &self.config;
        if s.len() != 4 || s[1] != 3 || s[2] != c.input_height || s[3] != c.input_width {
            return Err(shape_err("CAD trunk input", [0, 3, c.input_height, c.input_width], s));
        }
        let mut x = self.stem[1].forward(ctx, self.stem[0].forward(ctx, images).relu()).relu();
        let mut phi = Vec::with_capacity(3);
        let mut attention = Vec::with_capacity(3);
        for i in 0..3 {
            let p = self.stages[i].forward(ctx, x);
            let f = self.cama[i].forward(ctx, p);
            x = f.mul(p);
            phi.push(p);
            attention.push(f);
        }
        let final_map = self.stages[3].forward(ctx, x);
        let x_deg = self.project.forward(ctx, pool_descriptor(final_map));
        let (_, logits) = self.head.forward(ctx, x_deg);
        Ok(CadVars { phi: [phi[0], phi[1], phi[2]], attention: [attention[0], attention[1], attention[2]], final_map, x_deg, logits })
    }
}

/// Global max pool plus global average pool over the spatial axes of an
/// `N × C × h × w` map, summed per channel.
pub fn pool_descriptor<'g>(map: Var<'g>) -> Var<'g> {
    let s = map.shape();
    let flat = map.reshape(&[s[0], s[1], s[2] * s[3]]);
    flat.max_axis(2, false).add(flat.mean_axis(2, false))
}

/// Projection of the pooled final map to the degradation feature.
pub fn cad_pool(final_map: &Array, stream: &CadStream, weights: &ParamStore) -> Result<FeatureVector> {
    let s = final_map.shape();
    if s.len() != 3 || s[0] != stream.config.widths[4] {
        return Err(shape_err("cad_pool", ("C", stream.config.widths[4]), s));
    }
    let g = Graph::new();
    let ctx = Ctx::new(&g, weights, false);
    let map = g.constant(final_map.clone().reshape([1, s[0], s[1], s[2]]));
    let x = stream.project.forward(&ctx, pool_descriptor(map));
    Ok(FeatureVector(x.value().data().to_vec()))
}

/// Inference-mode forward of one image through the trunk.
pub fn cama_forward(image: &ImageTensor, stream: &CadStream, weights: &ParamStore) -> Result<CadOutput> {
    let c = &stream.config;
    if image.size() != (c.input_height, c.input_width) || image.channels() != 3 {
        return Err(shape_err("cama_forward", (c.input_height, c.input_width, 3), (image.height(), image.width(), image.channels())));
    }
    let g = Graph::new();
    let ctx = Ctx::new(&g, weights, false);
    let out = stream.forward(&ctx, g.constant(stack_images([image])?))?;
    let squeeze = |v: Var<'_>| {
        let s = v.shape();
        Array::clone(&v.value()).reshape(s[1..].to_vec())
    };
    let att = |i: usize| {
        let s = out.attention[i].shape();
        Array::clone(&out.attention[i].value()).reshape([s[2], s[3]])
    };
    Ok(CadOutput {
        attention: [att(0), att(1), att(2)],
        phi1: squeeze(out.phi[0]),
        final_map: squeeze(out.final_map),
        x_deg: FeatureVector(out.x_deg.value().data().to_vec()),
        logits: out.logits.value().data().to_vec(),
    })
}

/// Spatial sizes of the attention maps, equal to the degraded target sizes.
pub fn attention_sizes(config: &TrunkConfig) -> [(usize, usize); 3] {
    TARGET_STRIDES.map(|s| (config.input_height / s, config.input_width / s))
}
