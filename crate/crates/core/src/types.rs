//! Domain types shared across the pipeline and the seeded random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, IgclError, Result};
use crate::tensor::Array;

/// Model input height after the standard resize.
pub const INPUT_HEIGHT: usize = 384;
/// Model input width after the standard resize.
pub const INPUT_WIDTH: usize = 128;
/// Default feature dimension of every stream output.
pub const FEATURE_DIM: usize = 768;
/// Number of human-parsing classes, background included.
pub const NUM_PARSE_CLASSES: u8 = 18;

/// The 18 human-parsing classes in label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum ParseClass {
    Background = 0,
    Hat = 1,
    Hair = 2,
    Sunglasses = 3,
    UpperClothes = 4,
    Skirt = 5,
    Pants = 6,
    Dress = 7,
    Belt = 8,
    LeftShoe = 9,
    RightShoe = 10,
    Face = 11,
    LeftLeg = 12,
    RightLeg = 13,
    LeftArm = 14,
    RightArm = 15,
    Bag = 16,
    Scarf = 17,
}

impl ParseClass {
    pub const ALL: [ParseClass; 18] = [
        ParseClass::Background,
        ParseClass::Hat,
        ParseClass::Hair,
        ParseClass::Sunglasses,
        ParseClass::UpperClothes,
        ParseClass::Skirt,
        ParseClass::Pants,
        ParseClass::Dress,
        ParseClass::Belt,
        ParseClass::LeftShoe,
        ParseClass::RightShoe,
        ParseClass::Face,
        ParseClass::LeftLeg,
        ParseClass::RightLeg,
        ParseClass::LeftArm,
        ParseClass::RightArm,
        ParseClass::Bag,
        ParseClass::Scarf,
    ];

    pub fn from_index(i: u8) -> Option<Self> {
        Self::ALL.get(i as usize).copied()
    }

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            ParseClass::Background => "Background",
            ParseClass::Hat => "Hat",
            ParseClass::Hair => "Hair",
            ParseClass::Sunglasses => "Sunglasses",
            ParseClass::UpperClothes => "Upper-clothes",
            ParseClass::Skirt => "Skirt",
            ParseClass::Pants => "Pants",
            ParseClass::Dress => "Dress",
            ParseClass::Belt => "Belt",
            ParseClass::LeftShoe => "Left-shoe",
            ParseClass::RightShoe => "Right-shoe",
            ParseClass::Face => "Face",
            ParseClass::LeftLeg => "Left-leg",
            ParseClass::RightLeg => "Right-leg",
            ParseClass::LeftArm => "Left-arm",
            ParseClass::RightArm => "Right-arm",
            ParseClass::Bag => "Bag",
            ParseClass::Scarf => "Scarf",
        }
    }
}

/// An image stored height × width × channels with values in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl std::fmt::Debug for ImageTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageTensor({}×{}×{})", self.height, self.width, self.channels)
    }
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(IgclError::InvalidArgument(format!("image size {height}×{width} must be positive")));
        }
        if channels != 1 && channels != 3 {
            return Err(IgclError::InvalidArgument(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(shape_err("ImageTensor::new", height * width * channels, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(IgclError::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels]).expect("valid fill")
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub(crate) fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Channel planes, `C×H×W`.
    pub fn to_chw(&self) -> Array {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; c * h * w];
        for (p, px) in self.data.chunks(c).enumerate() {
            for (ch, v) in px.iter().enumerate() {
                out[ch * h * w + p] = *v;
            }
        }
        Array::new([c, h, w], out)
    }

    /// Inverse of [`to_chw`](Self::to_chw); values are clamped into `[0, 1]`.
    pub fn from_chw(a: &Array) -> Result<Self> {
        let s = a.shape();
        if s.len() != 3 {
            return Err(shape_err("ImageTensor::from_chw", "C×H×W", s));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        Self::from_fn(h, w, c, |y, x, ch| a.data()[ch * h * w + y * w + x].clamp(0.0, 1.0))
    }

    /// Bilinear resize (pixel-centre aligned).
    pub fn resize(&self, height: usize, width: usize) -> ImageTensor {
        if (height, width) == self.size() {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let clampi = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
        ImageTensor::from_fn(height, width, self.channels, |y, x, c| {
            let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
            let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
            let (y0, x0) = (clampi(fy.floor(), self.height), clampi(fx.floor(), self.width));
            let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
            let (ty, tx) = (fy - fy.floor(), fx - fx.floor());
            let v = (1.0 - ty) * ((1.0 - tx) * self.get(y0, x0, c) + tx * self.get(y0, x1, c))
                + ty * ((1.0 - tx) * self.get(y1, x0, c) + tx * self.get(y1, x1, c));
            v.clamp(0.0, 1.0)
        })
        .expect("resize preserves validity")
    }
}

/// Per-pixel human-parsing labels.
#[derive(Clone, PartialEq, Eq)]
pub struct ParseLabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl std::fmt::Debug for ParseLabelMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ParseLabelMap({}×{})", self.height, self.width)
    }
}

impl ParseLabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape_err("ParseLabelMap::new", height * width, labels.len()));
        }
        if let Some(v) = labels.iter().find(|&&v| v >= NUM_PARSE_CLASSES) {
            return Err(IgclError::InvalidArgument(format!("parse class index {v} outside 0..=17")));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, class: ParseClass) -> Self {
        Self { height, width, labels: vec![class.index(); height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> ParseClass {
        ParseClass::from_index(self.labels[y * self.width + x]).expect("validated on construction")
    }

    pub(crate) fn set(&mut self, y: usize, x: usize, class: ParseClass) {
        self.labels[y * self.width + x] = class.index();
    }

    /// Nearest-neighbour resize.
    pub fn resize(&self, height: usize, width: usize) -> ParseLabelMap {
        if (height, width) == self.size() {
            return self.clone();
        }
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = ((y * 2 + 1) * self.height / (height * 2)).min(self.height - 1);
            for x in 0..width {
                let sx = ((x * 2 + 1) * self.width / (width * 2)).min(self.width - 1);
                labels.push(self.labels[sy * self.width + sx]);
            }
        }
        ParseLabelMap { height, width, labels }
    }
}

/// One pedestrian image with its labels and parse map.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image: ImageTensor,
    pub parse: ParseLabelMap,
    pub identity: usize,
    pub camera: usize,
    pub clothing: Option<usize>,
    /// File name the sample was loaded from or written to, if any.
    pub name: String,
}

impl ImageSample {
    pub fn new(image: ImageTensor, parse: ParseLabelMap, identity: usize, camera: usize, clothing: Option<usize>) -> Result<Self> {
        if image.size() != parse.size() {
            return Err(shape_err("ImageSample::new", image.size(), parse.size()));
        }
        Ok(Self { image, parse, identity, camera, clothing, name: String::new() })
    }

    /// Image and parse map resized to the model input size.
    pub fn resized(&self, height: usize, width: usize) -> ImageSample {
        ImageSample {
            image: self.image.resize(height, width),
            parse: self.parse.resize(height, width),
            ..self.clone()
        }
    }
}

/// A PK mini-batch: `p` identities with `k` consecutive entries each,
/// referring to samples of a split by index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub p: usize,
    pub k: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Checks the PK grouping invariant.
    pub fn validate(&self) -> Result<()> {
        if self.indices.len() != self.p * self.k || self.labels.len() != self.indices.len() {
            return Err(shape_err("Batch", self.p * self.k, self.indices.len()));
        }
        let mut seen = Vec::with_capacity(self.p);
        for group in self.labels.chunks(self.k) {
            if group.iter().any(|&l| l != group[0]) {
                return Err(IgclError::InvalidArgument("batch group mixes identities".into()));
            }
            if seen.contains(&group[0]) {
                return Err(IgclError::InvalidArgument(format!("identity {} appears in two groups", group[0])));
            }
            seen.push(group[0]);
        }
        Ok(())
    }
}

/// A stream output feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed(pub u64);

impl RngSeed {
    /// An independent seed for a named sub-stream, e.g. one per epoch.
    pub fn derive(self, stream: &str, index: u64) -> RngSeed {
        let mut h = self.0 ^ 0x9e37_79b9_7f4a_7c15;
        for b in stream.bytes() {
            h = splitmix64(h ^ b as u64);
        }
        RngSeed(splitmix64(h ^ splitmix64(index)))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub type Rng = ChaCha8Rng;

/// Deterministic random stream: identical seeds give identical sequences
/// on every platform.
pub fn seeded_rng(seed: RngSeed) -> Rng {
    ChaCha8Rng::seed_from_u64(seed.0)
}
