//! Retrieval evaluation: normalized Euclidean ranking, CMC and mAP, and
//! cosine similarity matrices.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, shape_err, IgclError, Result};
use crate::tensor::Array;
use crate::types::{FeatureVector, ImageSample};

/// Which gallery entries are removed for a query before ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Drop entries with the query's identity and camera.
    pub exclude_same_camera: bool,
    /// Drop entries with the query's identity and clothing id.
    pub exclude_same_clothes: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self { exclude_same_camera: true, exclude_same_clothes: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleMeta {
    pub identity: usize,
    pub camera: usize,
    pub clothing: Option<usize>,
}

impl From<&ImageSample> for SampleMeta {
    fn from(s: &ImageSample) -> Self {
        Self { identity: s.identity, camera: s.camera, clothing: s.clothing }
    }
}

impl ProtocolConfig {
    pub fn keeps(&self, query: &SampleMeta, gallery: &SampleMeta) -> bool {
        if query.identity != gallery.identity {
            return true;
        }
        if self.exclude_same_camera && query.camera == gallery.camera {
            return false;
        }
        if self.exclude_same_clothes && query.clothing.is_some() && query.clothing == gallery.clothing {
            return false;
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    /// Kept gallery indices per query, nearest first.
    pub rankings: Vec<Vec<usize>>,
    /// Average precision per query; `None` for queries without a valid match.
    pub ap: Vec<Option<f64>>,
    pub map: f64,
    /// `cmc[k]`: fraction of evaluated queries whose first match is within
    /// the top `k + 1`. Length equals the gallery size.
    pub cmc: Vec<f64>,
    pub valid_queries: usize,
    pub skipped_queries: usize,
}

impl RankingResult {
    /// CMC at 1-based rank `k`, saturating at the gallery size.
    pub fn rank(&self, k: usize) -> f64 {
        if self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[(k.max(1) - 1).min(self.cmc.len() - 1)]
    }
}

pub fn l2_normalize(features: &[FeatureVector]) -> Result<Vec<FeatureVector>> {
    features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let n = f.norm();
            if n == 0.0 || !n.is_finite() {
                return Err(IgclError::InvalidArgument(format!("feature {i} has norm {n} and cannot be normalized")));
            }
            Ok(FeatureVector(f.0.iter().map(|v| v / n).collect()))
        })
        .collect()
}

fn check_dims(a: &[FeatureVector], b: &[FeatureVector]) -> Result<usize> {
    let d = a.first().or(b.first()).map_or(0, FeatureVector::dim);
    if let Some(bad) = a.iter().chain(b).find(|f| f.dim() != d) {
        return Err(shape_err("feature dimension", d, bad.dim()));
    }
    Ok(d)
}

/// `Q × G` Euclidean distances.
pub fn pairwise_euclidean(query: &[FeatureVector], gallery: &[FeatureVector]) -> Result<Array> {
    check_dims(query, gallery)?;
    let mut out = Vec::with_capacity(query.len() * gallery.len());
    for q in query {
        for g in gallery {
            out.push(q.0.iter().zip(&g.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
        }
    }
    Ok(Array::new([query.len(), gallery.len()], out))
}

pub fn compute_cmc_map(dist: &Array, query: &[SampleMeta], gallery: &[SampleMeta], protocol: &ProtocolConfig) -> Result<RankingResult> {
    if dist.shape() != [query.len(), gallery.len()] {
        return Err(shape_err("compute_cmc_map", [query.len(), gallery.len()], dist.shape()));
    }
    let g = gallery.len();
    let mut cmc_hits = vec![0usize; g];
    let mut rankings = Vec::with_capacity(query.len());
    let mut ap = Vec::with_capacity(query.len());
    for (qi, q) in query.iter().enumerate() {
        let row = &dist.data()[qi * g..(qi + 1) * g];
        let mut order: Vec<usize> = (0..g).filter(|&j| protocol.keeps(q, &gallery[j])).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (rank, &j) in order.iter().enumerate() {
            if gallery[j].identity == q.identity {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
                first.get_or_insert(rank);
            }
        }
        match first {
            Some(r) => {
                cmc_hits[r] += 1;
                ap.push(Some(precision_sum / hits as f64));
            }
            None => ap.push(None),
        }
        rankings.push(order);
    }
    let valid = ap.iter().flatten().count();
    let denom = valid.max(1) as f64;
    let mut cmc = Vec::with_capacity(g);
    let mut acc = 0usize;
    for h in cmc_hits {
        acc += h;
        cmc.push(acc as f64 / denom);
    }
    let map = ap.iter().flatten().sum::<f64>() / denom;
    Ok(RankingResult { rankings, ap, map, cmc, valid_queries: valid, skipped_queries: query.len() - valid })
}

/// Symmetric cosine similarity matrix with unit diagonal.
pub fn cosine_similarity_matrix(features: &[FeatureVector]) -> Result<Array> {
    let unit = l2_normalize(features)?;
    check_dims(&unit, &[])?;
    let n = unit.len();
    let mut m = Array::zeros([n, n]);
    for i in 0..n {
        m.set(&[i, i], 1.0);
        for j in i + 1..n {
            let c = unit[i].0.iter().zip(&unit[j].0).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0);
            m.set(&[i, j], c);
            m.set(&[j, i], c);
        }
    }
    Ok(m)
}

/// Cosine similarity matrix of the features, also rendered as a heatmap
/// PNG at `path`.
pub fn export_similarity_matrix(features: &[FeatureVector], path: &Path) -> Result<Array> {
    if features.len() < 2 {
        return Err(IgclError::InvalidArgument("similarity matrix needs at least 2 samples".into()));
    }
    let m = cosine_similarity_matrix(features)?;
    let n = features.len();
    let cell = 16u32;
    let size = n as u32 * cell;
    let img = image::RgbImage::from_fn(size, size, |x, y| {
        let v = m.at(&[(y / cell) as usize, (x / cell) as usize]);
        image::Rgb(heat((v + 1.0) / 2.0))
    });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    img.save(path).map_err(|source| IgclError::Image { path: path.to_path_buf(), source })?;
    Ok(m)
}

/// Dark blue through teal to yellow.
fn heat(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let stops = [[38.0, 24.0, 92.0], [33.0, 145.0, 140.0], [250.0, 230.0, 35.0]];
    let (a, b, u) = if t < 0.5 { (stops[0], stops[1], t * 2.0) } else { (stops[1], stops[2], t * 2.0 - 1.0) };
    [0, 1, 2].map(|i| (a[i] + (b[i] - a[i]) * u).round() as u8)
}

/// Writes `metrics.txt` (key=value lines) and `cmc.tsv` into `dir`.
pub fn write_metrics(dir: &Path, result: &RankingResult, gallery_size: usize) -> Result<String> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut text = String::new();
    writeln!(text, "mAP={:.6}", result.map).unwrap();
    for k in [1, 5, 10, 20] {
        writeln!(text, "rank{k}={:.6}", result.rank(k)).unwrap();
    }
    writeln!(text, "queries={}", result.ap.len()).unwrap();
    writeln!(text, "valid_queries={}", result.valid_queries).unwrap();
    writeln!(text, "skipped_queries={}", result.skipped_queries).unwrap();
    writeln!(text, "gallery={gallery_size}").unwrap();
    let path = dir.join("metrics.txt");
    fs::write(&path, &text).map_err(io_err(&path))?;
    let mut table = String::from("rank\tcmc\n");
    for (k, v) in result.cmc.iter().enumerate() {
        writeln!(table, "{}\t{v:.6}", k + 1).unwrap();
    }
    let path = dir.join("cmc.tsv");
    fs::write(&path, table).map_err(io_err(&path))?;
    Ok(text)
}
