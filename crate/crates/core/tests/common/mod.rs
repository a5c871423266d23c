//! Independent scalar oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod suites;

use igcl::dataio::{synth_generate, Dataset, SynthSpec};
use igcl::eval::{ProtocolConfig, SampleMeta};
use igcl::losses::Triplet;
use igcl::tensor::Array;
use igcl::types::{Rng, RngSeed};
use rand::Rng as _;

pub fn random_array(shape: &[usize], scale: f64, rng: &mut Rng) -> Array {
    Array::from_fn(shape.to_vec(), |_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
}

pub fn rows(a: &Array) -> Vec<Vec<f64>> {
    let d = a.shape()[1];
    a.data().chunks(d).map(<[f64]>::to_vec).collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Mean softmax cross-entropy, one row at a time.
pub fn cross_entropy_oracle(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &l) in logits.iter().zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        total += -(row[l] - m - z.ln());
    }
    total / labels.len() as f64
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn triplet_oracle(features: &[Vec<f64>], triplets: &[Triplet], margin: f64) -> f64 {
    if triplets.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for t in triplets {
        let v = margin + euclid(&features[t.anchor], &features[t.positive]) - euclid(&features[t.anchor], &features[t.negative]);
        sum += if v > 0.0 { v } else { 0.0 };
    }
    sum / triplets.len() as f64
}

/// `maps[k][n][y][x]` against `targets[k][n][y][x]`.
pub fn midlevel_oracle(maps: &[Vec<Vec<Vec<f64>>>], targets: &[Vec<Vec<Vec<f64>>>]) -> f64 {
    let mut total = 0.0;
    for (m, t) in maps.iter().zip(targets) {
        let n = m.len();
        let mut per_batch = 0.0;
        for (mi, ti) in m.iter().zip(t) {
            let (h, w) = (mi.len(), mi[0].len());
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    s += (mi[y][x] - ti[y][x]).powi(2);
                }
            }
            per_batch += s / (h * w) as f64;
        }
        total += per_batch / n as f64;
    }
    total
}

fn column_stats(x: &[Vec<f64>], std: bool) -> (Vec<f64>, Vec<f64>) {
    let b = x.len() as f64;
    let d = x[0].len();
    let mut mean = vec![0.0; d];
    let mut spread = vec![0.0; d];
    for j in 0..d {
        mean[j] = x.iter().map(|r| r[j]).sum::<f64>() / b;
        let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / b;
        spread[j] = if std { var.sqrt() } else { var };
    }
    (mean, spread)
}

pub fn highlevel_oracle(sem: &[Vec<f64>], deg: &[Vec<f64>], ori: &[Vec<f64>], std: bool) -> f64 {
    let (mo, so) = column_stats(ori, std);
    let mut total = 0.0;
    for x in [sem, deg] {
        let (m, s) = column_stats(x, std);
        for j in 0..m.len() {
            total += (m[j] - mo[j]).powi(2) + (s[j] - so[j]).powi(2);
        }
    }
    total
}

/// mAP and CMC computed by counting: the rank of a gallery entry is the
/// number of kept entries strictly closer, or equally close with a
/// smaller index.
pub fn retrieval_oracle(dist: &[Vec<f64>], query: &[SampleMeta], gallery: &[SampleMeta], protocol: &ProtocolConfig) -> (f64, Vec<f64>, usize) {
    let g = gallery.len();
    let mut aps = Vec::new();
    let mut first_ranks = Vec::new();
    for (qi, q) in query.iter().enumerate() {
        let kept: Vec<usize> = (0..g).filter(|&j| protocol.keeps(q, &gallery[j])).collect();
        let rank_of = |j: usize| kept.iter().filter(|&&o| dist[qi][o] < dist[qi][j] || (dist[qi][o] == dist[qi][j] && o < j)).count();
        let mut match_ranks: Vec<usize> = kept.iter().filter(|&&j| gallery[j].identity == q.identity).map(|&j| rank_of(j)).collect();
        if match_ranks.is_empty() {
            continue;
        }
        match_ranks.sort();
        let ap = match_ranks.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / (r + 1) as f64).sum::<f64>() / match_ranks.len() as f64;
        aps.push(ap);
        first_ranks.push(match_ranks[0]);
    }
    let n = aps.len();
    let denom = n.max(1) as f64;
    let cmc = (0..g).map(|k| first_ranks.iter().filter(|&&r| r <= k).count() as f64 / denom).collect();
    (aps.iter().sum::<f64>() / denom, cmc, n)
}

/// The standard desk-scale dataset: 4 identities × 8 images × 2 clothes.
pub fn small_dataset(root: &std::path::Path, seed: u64) -> Dataset {
    let spec = SynthSpec { num_identities: 4, images_per_identity: 8, clothes_per_identity: 2, image_size: (64, 32), seed: RngSeed(seed) };
    synth_generate(&spec, root).expect("synthetic dataset")
}

/// Central finite difference of `f` at entry `i` of `x`.
pub fn central_difference(f: &dyn Fn(&Array) -> f64, x: &Array, i: usize, h: f64) -> f64 {
    let mut plus = x.clone();
    plus.data_mut()[i] += h;
    let mut minus = x.clone();
    minus.data_mut()[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Relative gradient error with a small absolute floor.
pub fn grad_err(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6)
}
