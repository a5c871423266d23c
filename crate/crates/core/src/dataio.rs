//! Dataset ingestion, PK batch sampling and the synthetic dataset generator.
//!
//! On-disk layout (shared by real-data conversions and the generator):
//!
//! ```text
//! root/{train,query,gallery}/<identity>_<camera>_<clothing>_<index>.png
//! root/parse/{train,query,gallery}/<same file name>.png
//! ```
//!
//! Images are 8-bit RGB. Parse maps are 8-bit single-channel images whose
//! pixel values are class indices 0..=17. A clothing field of `x` means the
//! clothing id is unknown.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, IgclError, Result};
use crate::types::{seeded_rng, Batch, ImageSample, ImageTensor, ParseClass, ParseLabelMap, Rng, RngSeed, NUM_PARSE_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Query,
    Gallery,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Query, SplitName::Gallery];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Query => "query",
            SplitName::Gallery => "gallery",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = IgclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "query" => Ok(SplitName::Query),
            "gallery" => Ok(SplitName::Gallery),
            other => Err(IgclError::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub samples: Vec<ImageSample>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn identities(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    pub fn num_identities(&self) -> usize {
        self.identities().len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub query: DatasetSplit,
    pub gallery: DatasetSplit,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &DatasetSplit {
        match name {
            SplitName::Train => &self.train,
            SplitName::Query => &self.query,
            SplitName::Gallery => &self.gallery,
        }
    }

    /// Every query identity must have gallery entries.
    pub fn validate(&self) -> Result<()> {
        let gallery = self.gallery.identities();
        if let Some(id) = self.query.identities().iter().find(|id| !gallery.contains(id)) {
            return Err(IgclError::InvalidArgument(format!("query identity {id} has no gallery images")));
        }
        Ok(())
    }
}

/// Directory conventions of a dataset root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetLayout {
    pub parse_dir: String,
    pub extension: String,
}

impl Default for DatasetLayout {
    fn default() -> Self {
        Self { parse_dir: "parse".into(), extension: "png".into() }
    }
}

/// Fields encoded in a dataset file name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct FileKey {
    pub identity: usize,
    pub index: usize,
    pub camera: usize,
    pub clothing: Option<usize>,
}

impl FileKey {
    pub fn file_name(&self, extension: &str) -> String {
        let clothing = self.clothing.map_or_else(|| "x".to_string(), |c| c.to_string());
        format!("{}_{}_{}_{}.{}", self.identity, self.camera, clothing, self.index, extension)
    }

    pub fn parse(path: &Path) -> Result<Self> {
        let bad = || IgclError::BadFileName(path.to_path_buf());
        let stem = path.file_stem().and_then(|s| s.to_str()).ok_or_else(bad)?;
        let parts: Vec<&str> = stem.split('_').collect();
        if parts.len() != 4 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let clothing = if parts[2] == "x" { None } else { Some(num(parts[2])?) };
        Ok(Self { identity: num(parts[0])?, camera: num(parts[1])?, clothing, index: num(parts[3])? })
    }
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|source| IgclError::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    ImageTensor::new(h as usize, w as usize, 3, data)
}

pub fn read_parse_map(path: &Path) -> Result<ParseLabelMap> {
    let img = image::open(path).map_err(|source| IgclError::Image { path: path.to_path_buf(), source })?.to_luma8();
    let (w, h) = img.dimensions();
    if let Some(&value) = img.as_raw().iter().find(|&&v| v >= NUM_PARSE_CLASSES) {
        return Err(IgclError::InvalidClassIndex { path: path.to_path_buf(), value });
    }
    ParseLabelMap::new(h as usize, w as usize, img.into_raw())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_image(path: &Path, image: &ImageTensor) -> Result<()> {
    let raw: Vec<u8> = if image.channels() == 3 {
        image.data().iter().map(|&v| to_u8(v)).collect()
    } else {
        image.data().iter().flat_map(|&v| [to_u8(v); 3]).collect()
    };
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, raw).expect("buffer size");
    buf.save(path).map_err(|source| IgclError::Image { path: path.to_path_buf(), source })
}

pub fn write_parse_map(path: &Path, parse: &ParseLabelMap) -> Result<()> {
    let buf = image::GrayImage::from_raw(parse.width() as u32, parse.height() as u32, parse.labels().to_vec()).expect("buffer size");
    buf.save(path).map_err(|source| IgclError::Image { path: path.to_path_buf(), source })
}

struct RawSample {
    key: FileKey,
    sample: ImageSample,
}

fn load_split_raw(root: &Path, name: SplitName, layout: &DatasetLayout) -> Result<Vec<RawSample>> {
    let dir = root.join(name.as_str());
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<(FileKey, PathBuf)> = Vec::new();
    for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
        let path = entry.map_err(io_err(&dir))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(layout.extension.as_str()) {
            continue;
        }
        files.push((FileKey::parse(&path)?, path));
    }
    files.sort();
    let mut out = Vec::with_capacity(files.len());
    for (key, path) in files {
        let file_name = path.file_name().expect("file entry").to_owned();
        let parse_path = root.join(&layout.parse_dir).join(name.as_str()).join(&file_name);
        if !parse_path.is_file() {
            return Err(IgclError::MissingParseMap { image: path, expected: parse_path });
        }
        let image = read_image(&path)?;
        let parse = read_parse_map(&parse_path)?;
        let mut sample = ImageSample::new(image, parse, key.identity, key.camera, key.clothing)?;
        sample.name = file_name.to_string_lossy().into_owned();
        out.push(RawSample { key, sample });
    }
    Ok(out)
}

/// Replace raw identities with dense labels `0..C` over the given splits.
fn remap(splits: &mut [&mut Vec<RawSample>]) {
    let ids: BTreeSet<usize> = splits.iter().flat_map(|s| s.iter().map(|r| r.key.identity)).collect();
    let dense: BTreeMap<usize, usize> = ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect();
    for split in splits.iter_mut() {
        for r in split.iter_mut() {
            r.sample.identity = dense[&r.key.identity];
        }
    }
}

/// Load all three splits. Train labels are dense over train; query and
/// gallery share one dense labelling.
pub fn load_dataset(root: &Path, layout: &DatasetLayout) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(IgclError::Io {
            path: root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
        });
    }
    let mut train = load_split_raw(root, SplitName::Train, layout)?;
    let mut query = load_split_raw(root, SplitName::Query, layout)?;
    let mut gallery = load_split_raw(root, SplitName::Gallery, layout)?;
    remap(&mut [&mut train]);
    remap(&mut [&mut query, &mut gallery]);
    let wrap = |name, raw: Vec<RawSample>| DatasetSplit { name, samples: raw.into_iter().map(|r| r.sample).collect() };
    let ds = Dataset {
        train: wrap(SplitName::Train, train),
        query: wrap(SplitName::Query, query),
        gallery: wrap(SplitName::Gallery, gallery),
    };
    ds.validate()?;
    Ok(ds)
}

// ---- PK sampling --------------------------------------------------------

/// Draws PK batches from a split.
#[derive(Debug, Clone)]
pub struct PkSampler {
    groups: Vec<(usize, Vec<usize>)>,
    p: usize,
    k: usize,
}

impl PkSampler {
    pub fn new(split: &DatasetSplit, p: usize, k: usize) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(IgclError::InvalidArgument(format!("P·K must be positive, got P={p}, K={k}")));
        }
        if split.is_empty() {
            return Err(IgclError::InvalidArgument("cannot sample batches from an empty split".into()));
        }
        let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in split.samples.iter().enumerate() {
            by_id.entry(s.identity).or_default().push(i);
        }
        if by_id.len() < p {
            return Err(IgclError::InvalidArgument(format!("split has {} identities, P={p} requested", by_id.len())));
        }
        Ok(Self { groups: by_id.into_iter().collect(), p, k })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.groups.len().div_ceil(self.p)
    }

    /// One epoch: identities are shuffled and chunked into groups of `P`
    /// (the last group is topped up with other identities), so every
    /// identity appears at least once. Identities with fewer than `K`
    /// images repeat images, drawn with replacement.
    pub fn epoch(&self, rng: &mut Rng) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.groups.len()).collect();
        order.shuffle(rng);
        let mut batches = Vec::with_capacity(self.batches_per_epoch());
        for chunk in order.chunks(self.p) {
            let mut chosen = chunk.to_vec();
            while chosen.len() < self.p {
                let g = rng.random_range(0..self.groups.len());
                if !chosen.contains(&g) {
                    chosen.push(g);
                }
            }
            let mut indices = Vec::with_capacity(self.batch_size());
            let mut labels = Vec::with_capacity(self.batch_size());
            for g in chosen {
                let (label, members) = &self.groups[g];
                let mut pool = members.clone();
                pool.shuffle(rng);
                pool.truncate(self.k);
                while pool.len() < self.k {
                    pool.push(members[rng.random_range(0..members.len())]);
                }
                indices.extend(pool);
                labels.extend(std::iter::repeat_n(*label, self.k));
            }
            batches.push(Batch { indices, labels, p: self.p, k: self.k });
        }
        batches
    }
}

/// Endless stream of PK batches, epoch after epoch.
pub struct PkStream {
    sampler: PkSampler,
    rng: Rng,
    pending: std::vec::IntoIter<Batch>,
}

impl Iterator for PkStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if let Some(b) = self.pending.next() {
            return Some(b);
        }
        self.pending = self.sampler.epoch(&mut self.rng).into_iter();
        self.pending.next()
    }
}

pub fn pk_sample(split: &DatasetSplit, p: usize, k: usize, rng: Rng) -> Result<PkStream> {
    Ok(PkStream { sampler: PkSampler::new(split, p, k)?, rng, pending: Vec::new().into_iter() })
}

// ---- synthetic data -----------------------------------------------------

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub clothes_per_identity: usize,
    pub image_size: (usize, usize),
    pub seed: RngSeed,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 || self.images_per_identity == 0 || self.clothes_per_identity == 0 {
            return Err(IgclError::InvalidArgument("synthetic dataset counts must be at least 1".into()));
        }
        if self.images_per_identity < self.clothes_per_identity {
            return Err(IgclError::InvalidArgument("images per identity must be at least clothes per identity".into()));
        }
        let (h, w) = self.image_size;
        if h < 16 || w < 8 {
            return Err(IgclError::InvalidArgument(format!("synthetic image size {h}×{w} too small")));
        }
        Ok(())
    }
}

/// Row/column extents of each body part as fractions of the image size.
#[derive(Debug, Clone, Copy)]
pub struct Region {
    pub top: f64,
    pub bottom: f64,
    pub left: f64,
    pub right: f64,
}

impl Region {
    /// Pixel bounds `(y0, y1, x0, x1)`, half-open.
    pub fn pixels(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let r = |f: f64, n: usize| ((f * n as f64).round() as usize).min(n);
        (r(self.top, h), r(self.bottom, h), r(self.left, w), r(self.right, w))
    }
}

/// Head region (hair + face) of the synthetic figure for `identity`.
pub fn synth_head_region(identity: usize) -> Region {
    let half = 0.11 + 0.02 * (identity % 3) as f64;
    Region { top: 0.04, bottom: 0.20, left: 0.5 - half, right: 0.5 + half }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Snap to the 8-bit grid so images survive the PNG round trip exactly.
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn identity_color(identity: usize) -> [f64; 3] {
    hsv(identity as f64 * 0.618_033_988_75, 0.75, 0.9)
}

fn clothing_color(clothing: usize) -> [f64; 3] {
    hsv(0.31 + clothing as f64 * 0.381_966_011_25, 0.55 + 0.1 * (clothing % 3) as f64, 0.35 + 0.15 * (clothing % 4) as f64)
}

fn pants_color(clothing: usize) -> [f64; 3] {
    hsv(0.57 + clothing as f64 * 0.271_8, 0.4, 0.25 + 0.1 * (clothing % 3) as f64)
}

/// Draw one synthetic pedestrian and its parse map.
pub fn render_person(identity: usize, clothing: usize, size: (usize, usize), background_seed: RngSeed) -> (ImageTensor, ParseLabelMap) {
    use ParseClass::*;
    let (h, w) = size;
    let mut rng = seeded_rng(background_seed);
    let base = [0.35 + 0.3 * rng.random::<f64>(), 0.35 + 0.3 * rng.random::<f64>(), 0.35 + 0.3 * rng.random::<f64>()];
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let stripe = if ((x + y / 3) / 2) % 2 == 0 { 0.06 } else { -0.06 };
            let noise = (rng.random_range(0..21) as f64 - 10.0) / 255.0;
            for b in base {
                data.push(((b + stripe + noise) * 255.0).round().clamp(0.0, 255.0) / 255.0);
            }
        }
    }
    let mut image = ImageTensor::new(h, w, 3, data).expect("valid background");
    let mut parse = ParseLabelMap::filled(h, w, Background);

    let skin = hsv(0.07, 0.45, 0.55 + 0.08 * (identity % 4) as f64);
    let head = synth_head_region(identity);
    let hair = Region { bottom: 0.09, ..head };
    let torso = Region { top: 0.20, bottom: 0.52, left: 0.28, right: 0.72 };
    let parts: [(Region, ParseClass, [f64; 3]); 11] = [
        (head, Face, identity_color(identity)),
        (hair, Hair, identity_color(identity + 7919).map(|v| v * 0.4)),
        (torso, UpperClothes, clothing_color(clothing)),
        (Region { top: 0.22, bottom: 0.50, left: 0.16, right: 0.28 }, LeftArm, skin),
        (Region { top: 0.22, bottom: 0.50, left: 0.72, right: 0.84 }, RightArm, skin),
        (Region { top: 0.52, bottom: 0.80, left: 0.30, right: 0.70 }, Pants, pants_color(clothing)),
        (Region { top: 0.80, bottom: 0.92, left: 0.32, right: 0.48 }, LeftLeg, skin),
        (Region { top: 0.80, bottom: 0.92, left: 0.52, right: 0.68 }, RightLeg, skin),
        (Region { top: 0.92, bottom: 0.97, left: 0.30, right: 0.48 }, LeftShoe, [0.1, 0.1, 0.1]),
        (Region { top: 0.92, bottom: 0.97, left: 0.52, right: 0.70 }, RightShoe, [0.1, 0.1, 0.1]),
        // Neck strip between head and torso, drawn in skin.
        (Region { top: 0.19, bottom: 0.21, left: 0.45, right: 0.55 }, Face, skin),
    ];
    for (region, class, color) in parts {
        let color = color.map(quantize);
        let (y0, y1, x0, x1) = region.pixels(h, w);
        for y in y0..y1 {
            for x in x0..x1 {
                image.pixel_mut(y, x).copy_from_slice(&color);
                parse.set(y, x, class);
            }
        }
    }
    (image, parse)
}

fn synth_samples(spec: &SynthSpec, identities: std::ops::Range<usize>, split: &str) -> Vec<(FileKey, ImageSample)> {
    let mut out = Vec::new();
    for identity in identities {
        for index in 0..spec.images_per_identity {
            let c = index % spec.clothes_per_identity;
            let clothing = identity * spec.clothes_per_identity + c;
            let camera = (index / spec.clothes_per_identity) % 2;
            let bg = spec.seed.derive(split, (identity * spec.images_per_identity + index) as u64);
            let (image, parse) = render_person(identity, clothing, spec.image_size, bg);
            let key = FileKey { identity, index, camera, clothing: Some(clothing) };
            let mut sample = ImageSample::new(image, parse, identity, camera, Some(clothing)).expect("matching sizes");
            sample.name = key.file_name("png");
            out.push((key, sample));
        }
    }
    out
}

fn dense(raw: Vec<(FileKey, ImageSample)>, name: SplitName, offset: usize) -> DatasetSplit {
    DatasetSplit {
        name,
        samples: raw
            .into_iter()
            .map(|(_, mut s)| {
                s.identity -= offset;
                s
            })
            .collect(),
    }
}

/// Generate train identities `0..n` and test identities `n..2n`. For every
/// test identity the first image is the query and the rest go to the
/// gallery (a single-image identity goes to the gallery only). The dataset
/// is written under `root` in the standard layout and returned with the
/// labels [`load_dataset`] would assign.
pub fn synth_generate(spec: &SynthSpec, root: &Path) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.num_identities;
    let train = synth_samples(spec, 0..n, "train");
    let test = synth_samples(spec, n..2 * n, "test");
    let (query, gallery): (Vec<_>, Vec<_>) =
        test.into_iter().partition(|(k, _)| k.index == 0 && spec.images_per_identity > 1);
    let layout = DatasetLayout::default();
    for (name, split) in [(SplitName::Train, &train), (SplitName::Query, &query), (SplitName::Gallery, &gallery)] {
        let img_dir = root.join(name.as_str());
        let parse_dir = root.join(&layout.parse_dir).join(name.as_str());
        fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
        fs::create_dir_all(&parse_dir).map_err(io_err(&parse_dir))?;
        for (key, sample) in split {
            let file = key.file_name(&layout.extension);
            write_image(&img_dir.join(&file), &sample.image)?;
            write_parse_map(&parse_dir.join(&file), &sample.parse)?;
        }
    }
    Ok(Dataset {
        train: dense(train, SplitName::Train, 0),
        query: dense(query, SplitName::Query, n),
        gallery: dense(gallery, SplitName::Gallery, n),
    })
}
