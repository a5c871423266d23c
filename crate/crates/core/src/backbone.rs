//! Patch transformer producing the original feature and identity logits.
//!
//! Layout: patch embedding, class token and learned position embedding,
//! pre-norm transformer blocks, final layer norm; the class token goes
//! through an MLP layer (the feature) and a batch-norm bottleneck with an
//! identity classifier.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{shape_err, IgclError, Result};
use crate::nn::{normal, stack_images, Conv2d, Ctx, LayerNorm, Linear, ParamStore, ReidHead};
use crate::tensor::Array;
use crate::types::{seeded_rng, FeatureVector, ImageTensor, RngSeed, FEATURE_DIM, INPUT_HEIGHT, INPUT_WIDTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub input_height: usize,
    pub input_width: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl BackboneConfig {
    pub fn full(num_classes: usize) -> Self {
        Self {
            variant: Variant::Full,
            input_height: INPUT_HEIGHT,
            input_width: INPUT_WIDTH,
            patch_size: 16,
            depth: 12,
            embed_dim: 768,
            num_heads: 12,
            mlp_ratio: 4,
            feature_dim: FEATURE_DIM,
            num_classes,
        }
    }

    pub fn tiny(num_classes: usize) -> Self {
        Self {
            variant: Variant::Tiny,
            input_height: 64,
            input_width: 32,
            patch_size: 16,
            depth: 2,
            embed_dim: 64,
            num_heads: 4,
            mlp_ratio: 2,
            feature_dim: 64,
            num_classes,
        }
    }

    pub fn for_variant(variant: Variant, num_classes: usize) -> Self {
        match variant {
            Variant::Full => Self::full(num_classes),
            Variant::Tiny => Self::tiny(num_classes),
        }
    }

    /// Patch tokens, excluding the class token.
    pub fn num_patches(&self) -> usize {
        (self.input_height / self.patch_size) * (self.input_width / self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(IgclError::InvalidArgument(m));
        if self.patch_size == 0 || !self.input_height.is_multiple_of(self.patch_size) || !self.input_width.is_multiple_of(self.patch_size) {
            return bad(format!("input {}x{} is not divisible by patch size {}", self.input_height, self.input_width, self.patch_size));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!("embed dim {} is not divisible by {} heads", self.embed_dim, self.num_heads));
        }
        if self.depth == 0 || self.feature_dim == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return bad("depth, feature dim, mlp ratio and class count must be positive".into());
        }
        Ok(())
    }
}

/// Graph outputs of one backbone pass over a batch.
#[derive(Debug, Clone, Copy)]
pub struct BackboneVars<'g> {
    /// MLP-layer output, before the bottleneck; feeds the triplet and
    /// collaborative losses.
    pub feature: Var<'g>,
    /// Bottleneck output; feeds the classifier and retrieval.
    pub bn_feature: Var<'g>,
    pub logits: Var<'g>,
}

/// Inference output for a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput {
    pub feature: FeatureVector,
    pub pre_bn: FeatureVector,
    pub logits: Vec<f64>,
}

struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// A backbone instance: the architecture plus the name prefix of its
/// weights in a [`ParamStore`].
pub struct Backbone {
    pub prefix: String,
    pub config: BackboneConfig,
    patch: Conv2d,
    blocks: Vec<Block>,
    norm: LayerNorm,
    mlp: Linear,
    head: ReidHead,
}

impl Backbone {
    pub fn new(prefix: &str, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let blocks = (0..config.depth)
            .map(|i| {
                let n = |s: &str| format!("{prefix}.blocks.{i}.{s}");
                Block {
                    norm1: LayerNorm::new(n("norm1"), d),
                    qkv: Linear::new(n("attn.qkv"), d, 3 * d, true),
                    proj: Linear::new(n("attn.proj"), d, d, true),
                    norm2: LayerNorm::new(n("norm2"), d),
                    fc1: Linear::new(n("mlp.fc1"), d, d * config.mlp_ratio, true),
                    fc2: Linear::new(n("mlp.fc2"), d * config.mlp_ratio, d, true),
                }
            })
            .collect();
        Ok(Self {
            prefix: prefix.to_string(),
            patch: Conv2d::new(format!("{prefix}.patch_embed"), 3, d, config.patch_size, config.patch_size, 0),
            blocks,
            norm: LayerNorm::new(format!("{prefix}.norm"), d),
            mlp: Linear::new(format!("{prefix}.mlp"), d, config.feature_dim, true),
            head: ReidHead::new(prefix, config.feature_dim, config.num_classes),
            config,
        })
    }

    fn key(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    pub fn classifier_name(&self) -> String {
        self.head.classifier.weight_name()
    }

    pub fn init(&self, store: &mut ParamStore, seed: RngSeed) {
        let mut rng = seeded_rng(seed);
        let d = self.config.embed_dim;
        self.patch.init(store, 1.0, &mut rng);
        store.insert_param(self.key("cls_token"), normal([1, 1, d], 0.02, &mut rng));
        store.insert_param(self.key("pos_embed"), normal([self.config.num_patches() + 1, d], 0.02, &mut rng));
        for b in &self.blocks {
            b.norm1.init(store);
            b.qkv.init(store, 0.02, &mut rng);
            b.proj.init(store, 0.02, &mut rng);
            b.norm2.init(store);
            b.fc1.init(store, 0.02, &mut rng);
            b.fc2.init(store, 0.02, &mut rng);
        }
        self.norm.init(store);
        self.mlp.init(store, 0.02, &mut rng);
        self.head.init(store, &mut rng);
    }

    /// Forward over `N × 3 × H × W` images.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, images: Var<'g>) -> Result<BackboneVars<'g>> {
        let shape = images.shape();
        let c = &self.config;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != c.input_height || shape[3] != c.input_width {
            return Err(shape_err("backbone input", [0, 3, c.input_height, c.input_width], shape));
        }
        let n = shape[0];
        let (d, t) = (c.embed_dim, c.num_patches());
        let patches = self.patch.forward(ctx, images).reshape(&[n, d, t]).permute(&[0, 2, 1]);
        let cls = ctx.p(&self.key("cls_token")).broadcast_to(&[n, 1, d]);
        let mut x = Var::concat(&[cls, patches], 1).add(ctx.p(&self.key("pos_embed")));
        for b in &self.blocks {
            x = x.add(self.attention(ctx, b, b.norm1.forward(ctx, x)));
            let h = b.fc1.forward(ctx, b.norm2.forward(ctx, x)).gelu();
            x = x.add(b.fc2.forward(ctx, h));
        }
        let x = self.norm.forward(ctx, x);
        let token = x.narrow(1, 0, 1).reshape(&[n, d]);
        let feature = self.mlp.forward(ctx, token);
        let (bn_feature, logits) = self.head.forward(ctx, feature);
        Ok(BackboneVars { feature, bn_feature, logits })
    }

    fn attention<'g>(&self, ctx: &Ctx<'g>, b: &Block, x: Var<'g>) -> Var<'g> {
        let s = x.shape();
        let (n, t, d) = (s[0], s[1], s[2]);
        let h = self.config.num_heads;
        let dh = d / h;
        let qkv = b.qkv.forward(ctx, x).reshape(&[n, t, 3, h, dh]).permute(&[2, 0, 3, 1, 4]);
        let part = |i: usize| qkv.narrow(0, i, 1).reshape(&[n * h, t, dh]);
        let (q, k, v) = (part(0), part(1), part(2));
        let attn = q.matmul(k.transpose_last()).mul_scalar(1.0 / (dh as f64).sqrt()).softmax();
        let out = attn.matmul(v).reshape(&[n, h, t, dh]).permute(&[0, 2, 1, 3]).reshape(&[n, t, d]);
        b.proj.forward(ctx, out)
    }
}

/// Seeded initialization, optionally overlaid with pretrained weights.
///
/// Pretrained tensors are matched by name under `backbone.`; every tensor
/// present in the file must have the expected shape, except the identity
/// classifier, which is always freshly initialized.
pub fn init_backbone(config: &BackboneConfig, seed: RngSeed, pretrained: Option<&Path>) -> Result<ParamStore> {
    let backbone = Backbone::new("backbone", config.clone())?;
    let mut store = ParamStore::new();
    backbone.init(&mut store, seed);
    if let Some(path) = pretrained {
        let source = Checkpoint::load(path)?.store;
        load_matching(&mut store, &source, "backbone.", &[backbone.classifier_name()])?;
    }
    Ok(store)
}

/// Copies tensors named `prefix*` from `source` into `target`, checking
/// shapes. Names listed in `skip` are left untouched.
pub fn load_matching(target: &mut ParamStore, source: &ParamStore, prefix: &str, skip: &[String]) -> Result<usize> {
    let mut loaded = 0;
    let check = |name: &str, want: &Array, got: &Array| {
        if want.shape() != got.shape() {
            return Err(IgclError::TensorShape { name: name.to_string(), expected: want.shape().to_vec(), found: got.shape().to_vec() });
        }
        Ok(())
    };
    for (name, value) in source.params() {
        if !name.starts_with(prefix) || skip.contains(name) {
            continue;
        }
        if let Some(current) = target.param(name) {
            check(name, current, value)?;
            target.insert_param(name.clone(), value.clone());
            loaded += 1;
        }
    }
    for (name, value) in source.buffers() {
        if !name.starts_with(prefix) {
            continue;
        }
        if let Some(current) = target.buffer(name) {
            check(name, current, value)?;
            target.insert_buffer(name.clone(), value.clone());
            loaded += 1;
        }
    }
    Ok(loaded)
}

/// Inference-mode forward of one image.
pub fn backbone_forward(image: &ImageTensor, config: &BackboneConfig, weights: &ParamStore) -> Result<BackboneOutput> {
    if image.size() != (config.input_height, config.input_width) || image.channels() != 3 {
        return Err(shape_err(
            "backbone_forward",
            (config.input_height, config.input_width, 3),
            (image.height(), image.width(), image.channels()),
        ));
    }
    let backbone = Backbone::new("backbone", config.clone())?;
    let mut out = backbone_infer(&backbone, weights, std::slice::from_ref(image))?;
    Ok(out.remove(0))
}

/// Inference-mode forward of a batch of images at the configured size.
pub fn backbone_infer(backbone: &Backbone, weights: &ParamStore, images: &[ImageTensor]) -> Result<Vec<BackboneOutput>> {
    let g = Graph::new();
    let ctx = Ctx::new(&g, weights, false);
    let x = g.constant(stack_images(images)?);
    let vars = backbone.forward(&ctx, x)?;
    let (bn, pre, logits) = (vars.bn_feature.value(), vars.feature.value(), vars.logits.value());
    let (f, c) = (backbone.config.feature_dim, backbone.config.num_classes);
    Ok((0..images.len())
        .map(|i| BackboneOutput {
            feature: FeatureVector(bn.data()[i * f..(i + 1) * f].to_vec()),
            pre_bn: FeatureVector(pre.data()[i * f..(i + 1) * f].to_vec()),
            logits: logits.data()[i * c..(i + 1) * c].to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::CheckpointKind;
    use crate::types::Rng;
    use rand::Rng as _;

    fn random_image(h: usize, w: usize, rng: &mut Rng) -> ImageTensor {
        ImageTensor::from_fn(h, w, 3, |_, _, _| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn token_counts() {
        assert_eq!(BackboneConfig::full(10).num_patches(), (384 / 16) * (128 / 16));
        assert_eq!(BackboneConfig::full(10).num_patches(), 192);
        assert_eq!(BackboneConfig::tiny(10).num_patches(), 8);
        let mut bad = BackboneConfig::tiny(3);
        bad.input_width = 40;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn inference_is_deterministic_and_sized() {
        let config = BackboneConfig::tiny(5);
        let store = init_backbone(&config, RngSeed(3), None).unwrap();
        assert_eq!(store, init_backbone(&config, RngSeed(3), None).unwrap());
        assert_ne!(store, init_backbone(&config, RngSeed(4), None).unwrap());
        let img = random_image(64, 32, &mut seeded_rng(RngSeed(0)));
        let a = backbone_forward(&img, &config, &store).unwrap();
        let b = backbone_forward(&img, &config, &store).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.feature.dim(), 64);
        assert_eq!(a.logits.len(), 5);
        assert!(a.feature.0.iter().all(|v| v.is_finite()));
        assert!(backbone_forward(&img.resize(32, 32), &config, &store).is_err());
    }

    #[test]
    fn batch_inference_matches_single_images() {
        let config = BackboneConfig::tiny(4);
        let store = init_backbone(&config, RngSeed(1), None).unwrap();
        let mut rng = seeded_rng(RngSeed(9));
        let imgs: Vec<_> = (0..3).map(|_| random_image(64, 32, &mut rng)).collect();
        let bb = Backbone::new("backbone", config.clone()).unwrap();
        let batch = backbone_infer(&bb, &store, &imgs).unwrap();
        for (img, out) in imgs.iter().zip(&batch) {
            let single = backbone_forward(img, &config, &store).unwrap();
            for (x, y) in single.feature.0.iter().zip(&out.feature.0) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pretrained_loading_reinitializes_classifier_and_checks_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pre.ckpt");
        let config = BackboneConfig::tiny(5);
        let source = init_backbone(&config, RngSeed(11), None).unwrap();
        Checkpoint::new(CheckpointKind::Inference, serde_json::Value::Null, source.clone()).save(&path).unwrap();

        let mut other_classes = config.clone();
        other_classes.num_classes = 7;
        let loaded = init_backbone(&other_classes, RngSeed(12), Some(&path)).unwrap();
        let fresh = init_backbone(&other_classes, RngSeed(12), None).unwrap();
        assert_eq!(loaded.param("backbone.mlp.weight"), source.param("backbone.mlp.weight"));
        assert_eq!(loaded.param("backbone.classifier.weight"), fresh.param("backbone.classifier.weight"));

        let mut wide = config.clone();
        wide.feature_dim = 32;
        match init_backbone(&wide, RngSeed(12), Some(&path)) {
            Err(IgclError::TensorShape { name, .. }) => assert!(name.starts_with("backbone.")),
            other => panic!("expected a shape error, got {other:?}"),
        }
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let mut config = BackboneConfig::tiny(3);
        config.depth = 1;
        let backbone = Backbone::new("backbone", config.clone()).unwrap();
        let mut store = ParamStore::new();
        backbone.init(&mut store, RngSeed(5));
        let mut rng = seeded_rng(RngSeed(6));
        let images = stack_images(&[random_image(64, 32, &mut rng), random_image(64, 32, &mut rng)]).unwrap();
        let probe = |store: &ParamStore| -> (f64, std::collections::BTreeMap<String, Array>) {
            let g = Graph::new();
            let ctx = Ctx::new(&g, store, true);
            let out = backbone.forward(&ctx, g.constant(images.clone())).unwrap();
            let loss = out.feature.sum_all();
            (loss.item(), g.backward(loss).by_param())
        };
        let (_, grads) = probe(&store);
        let names = ["backbone.patch_embed.weight", "backbone.blocks.0.attn.qkv.weight", "backbone.blocks.0.mlp.fc1.bias", "backbone.pos_embed", "backbone.norm.gamma"];
        for name in names {
            let len = store.param(name).unwrap().len();
            for probe_i in 0..4 {
                let idx = rng.random_range(0..len);
                let h = 1e-5;
                let mut plus = store.clone();
                plus.param_mut(name).unwrap().data_mut()[idx] += h;
                let mut minus = store.clone();
                minus.param_mut(name).unwrap().data_mut()[idx] -= h;
                let fd = (probe(&plus).0 - probe(&minus).0) / (2.0 * h);
                let an = grads[name].data()[idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel < 1e-4, "{name}[{idx}] probe {probe_i}: fd {fd} vs analytic {an}");
            }
        }
    }
}
