//! Classification, triplet, mid-level and high-level collaborative losses
//! and their weighted total.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::cad::AttentionPyramid;
use crate::error::{shape_err, IgclError, Result};
use crate::tensor::Array;
use crate::types::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weights of the classification, triplet, mid-level and high-level
    /// terms.
    pub lambda: [f64; 4],
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: [1.0; 4], margin: 0.3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().chain([&self.margin]).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(IgclError::InvalidArgument(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Spread statistic used by the high-level loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadStat {
    #[default]
    Variance,
    StdDev,
}

fn zero(g: &Graph) -> Var<'_> {
    g.constant(Array::scalar(0.0))
}

/// Mean softmax cross-entropy of `B × C` logits.
pub fn cross_entropy<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(shape_err("cross_entropy", ("B", labels.len()), s));
    }
    let c = s[1];
    let mut onehot = Array::zeros([s[0], c]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(IgclError::InvalidArgument(format!("label {l} out of range for {c} classes")));
        }
        onehot.set(&[i, l], 1.0);
    }
    let picked = logits.log_softmax().mul(logits.graph().constant(onehot)).sum_all();
    Ok(picked.mul_scalar(-1.0 / s[0] as f64))
}

/// Per-head logits; absent heads belong to disabled streams.
#[derive(Debug, Clone, Copy)]
pub struct HeadLogits<'g> {
    pub ori: Var<'g>,
    pub sem: Option<Var<'g>>,
    pub pie: Option<Var<'g>>,
    pub deg: Option<Var<'g>>,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadTerms<'g> {
    pub total: Var<'g>,
    pub ori: Var<'g>,
    pub sem: Option<Var<'g>>,
    pub pie: Option<Var<'g>>,
}

#[derive(Debug, Clone, Copy)]
pub struct ClsTerms<'g> {
    pub heads: HeadTerms<'g>,
    pub deg: Option<Var<'g>>,
}

/// Sum of the mean cross-entropies of every present head.
pub fn classification_loss<'g>(heads: &HeadLogits<'g>, labels: &[usize]) -> Result<ClsTerms<'g>> {
    let ce = |v: Option<Var<'g>>| v.map(|v| cross_entropy(v, labels)).transpose();
    let ori = cross_entropy(heads.ori, labels)?;
    let (sem, pie, deg) = (ce(heads.sem)?, ce(heads.pie)?, ce(heads.deg)?);
    let total = [sem, pie, deg].into_iter().flatten().fold(ori, |acc, t| acc.add(t));
    Ok(ClsTerms { heads: HeadTerms { total, ori, sem, pie }, deg })
}

impl<'g> ClsTerms<'g> {
    pub fn total(&self) -> Var<'g> {
        self.heads.total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// One random positive and one random negative per anchor, anchors in
/// batch order. Anchors without a positive or a negative are skipped.
pub fn sample_triplets(labels: &[usize], rng: &mut Rng) -> Vec<Triplet> {
    let mut out = Vec::new();
    for (a, &la) in labels.iter().enumerate() {
        let pos: Vec<usize> = (0..labels.len()).filter(|&j| j != a && labels[j] == la).collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != la).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let positive = pos[rng.random_range(0..pos.len())];
        let negative = neg[rng.random_range(0..neg.len())];
        out.push(Triplet { anchor: a, positive, negative });
    }
    out
}

/// Mean hinge `max(m + d(a,p) − d(a,n), 0)` over the given triplets of
/// `B × D` features, Euclidean distance. Zero when there are no triplets.
pub fn triplet_term<'g>(features: Var<'g>, triplets: &[Triplet], margin: f64) -> Var<'g> {
    if triplets.is_empty() {
        return zero(features.graph());
    }
    let pick = |f: fn(&Triplet) -> usize| features.index_select(&triplets.iter().map(f).collect::<Vec<_>>());
    let (a, p, n) = (pick(|t| t.anchor), pick(|t| t.positive), pick(|t| t.negative));
    let dist = |x: Var<'g>| a.sub(x).square().sum_axis(1, false).sqrt();
    dist(p).sub(dist(n)).add_scalar(margin).relu().mean_all()
}

#[derive(Debug, Clone)]
pub struct TripletTerms<'g> {
    pub total: Var<'g>,
    pub ori: Var<'g>,
    pub sem: Option<Var<'g>>,
    pub pie: Option<Var<'g>>,
    pub triplets: Vec<Triplet>,
}

/// Triplet loss on the original feature plus every present optional
/// feature, all sharing one sampled triplet plan.
pub fn triplet_loss<'g>(
    x_ori: Var<'g>,
    x_sem: Option<Var<'g>>,
    x_pie: Option<Var<'g>>,
    labels: &[usize],
    margin: f64,
    rng: &mut Rng,
) -> Result<TripletTerms<'g>> {
    let b = labels.len();
    for x in [Some(x_ori), x_sem, x_pie].into_iter().flatten() {
        let s = x.shape();
        if s.len() != 2 || s[0] != b {
            return Err(shape_err("triplet_loss", ("B", b), s));
        }
    }
    let triplets = sample_triplets(labels, rng);
    let ori = triplet_term(x_ori, &triplets, margin);
    let sem = x_sem.map(|x| triplet_term(x, &triplets, margin));
    let pie = x_pie.map(|x| triplet_term(x, &triplets, margin));
    let total = [sem, pie].into_iter().flatten().fold(ori, |acc, t| acc.add(t));
    Ok(TripletTerms { total, ori, sem, pie, triplets })
}

#[derive(Debug, Clone, Copy)]
pub struct MclTerms<'g> {
    pub total: Var<'g>,
    pub scales: [Var<'g>; 3],
}

/// Sum over scales of the mean squared difference between attention maps
/// (`N × 1 × h × w`) and their targets (`N × h × w`), averaged over the
/// batch. Targets carry no gradient.
pub fn midlevel_collab_loss<'g>(attention: &[Var<'g>; 3], targets: &[Array; 3]) -> Result<MclTerms<'g>> {
    let mut scales = Vec::with_capacity(3);
    for (f, t) in attention.iter().zip(targets) {
        let s = f.shape();
        let ts = t.shape();
        if s.len() != 4 || s[1] != 1 || ts.len() != 3 || [s[0], s[2], s[3]] != ts {
            return Err(shape_err("midlevel_collab_loss", ts, s));
        }
        let diff = f.reshape(ts).sub(f.graph().constant(t.clone()));
        scales.push(diff.square().mean_all());
    }
    let total = scales[0].add(scales[1]).add(scales[2]);
    Ok(MclTerms { total, scales: [scales[0], scales[1], scales[2]] })
}

/// The mid-level loss of one image's pyramid.
pub fn midlevel_collab_loss_pyramid(pyramid: &AttentionPyramid) -> Result<f64> {
    let g = Graph::new();
    let maps = pyramid.maps.clone().map(|m| {
        let s = m.shape().to_vec();
        g.constant(m.reshape([1, 1, s[0], s[1]]))
    });
    let targets = pyramid.targets.0.clone().map(|t| {
        let s = t.shape().to_vec();
        t.reshape([1, s[0], s[1]])
    });
    Ok(midlevel_collab_loss(&maps, &targets)?.total.item())
}

#[derive(Debug, Clone, Copy)]
pub struct HclTerms<'g> {
    pub total: Var<'g>,
    pub sem: Option<Var<'g>>,
    pub deg: Option<Var<'g>>,
}

/// Per-dimension batch mean and spread of `B × D` features.
fn moments<'g>(x: Var<'g>, stat: SpreadStat) -> (Var<'g>, Var<'g>) {
    let mean = x.mean_axis(0, false);
    let var = x.sub(mean).square().mean_axis(0, false);
    let spread = match stat {
        SpreadStat::Variance => var,
        SpreadStat::StdDev => var.sqrt(),
    };
    (mean, spread)
}

/// `‖μ(x) − μ(ori)‖² + ‖σ(x) − σ(ori)‖²` summed over the present features.
pub fn highlevel_collab_loss<'g>(x_sem: Option<Var<'g>>, x_deg: Option<Var<'g>>, x_ori: Var<'g>, stat: SpreadStat) -> Result<HclTerms<'g>> {
    let s = x_ori.shape();
    if s.len() != 2 || s[0] < 2 {
        return Err(IgclError::InvalidArgument(format!("high-level loss needs a batch of at least 2 features, got {s:?}")));
    }
    for x in [x_sem, x_deg].into_iter().flatten() {
        if x.shape() != s {
            return Err(shape_err("highlevel_collab_loss", &s, x.shape()));
        }
    }
    let (mo, so) = moments(x_ori, stat);
    let term = |x: Var<'g>| {
        let (m, sp) = moments(x, stat);
        m.sub(mo).square().sum_all().add(sp.sub(so).square().sum_all())
    };
    let sem = x_sem.map(term);
    let deg = x_deg.map(term);
    let total = match (sem, deg) {
        (Some(a), Some(b)) => a.add(b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => zero(x_ori.graph()),
    };
    Ok(HclTerms { total, sem, deg })
}

/// All terms of one batch; absent entries belong to disabled streams.
#[derive(Debug, Clone)]
pub struct LossTerms<'g> {
    pub cls: ClsTerms<'g>,
    pub tri: TripletTerms<'g>,
    pub mcl: Option<MclTerms<'g>>,
    pub hcl: HclTerms<'g>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadBreakdown {
    pub ori: f64,
    pub sem: Option<f64>,
    pub pie: Option<f64>,
    pub deg: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub tri: f64,
    pub mcl: f64,
    pub hcl: f64,
    pub total: f64,
    pub cls_heads: HeadBreakdown,
    /// `deg` is never set: the degradation feature gets no triplet loss.
    pub tri_heads: HeadBreakdown,
    pub mcl_scales: Option<[f64; 3]>,
    pub hcl_sem: Option<f64>,
    pub hcl_deg: Option<f64>,
    pub triplets: usize,
}

impl LossReport {
    /// Names of the sub-terms that contributed to this report.
    pub fn active_terms(&self) -> Vec<&'static str> {
        let mut out = vec!["cls_ori"];
        let opt = |v: Option<f64>, name: &'static str, out: &mut Vec<&'static str>| {
            if v.is_some() {
                out.push(name);
            }
        };
        opt(self.cls_heads.sem, "cls_sem", &mut out);
        opt(self.cls_heads.pie, "cls_pie", &mut out);
        opt(self.cls_heads.deg, "cls_deg", &mut out);
        out.push("tri_ori");
        opt(self.tri_heads.sem, "tri_sem", &mut out);
        opt(self.tri_heads.pie, "tri_pie", &mut out);
        if self.mcl_scales.is_some() {
            out.push("mcl");
        }
        opt(self.hcl_sem, "hcl_sem", &mut out);
        opt(self.hcl_deg, "hcl_deg", &mut out);
        out
    }

    /// `(term name, value)` for each of the five logged scalars.
    pub fn scalars(&self) -> [(&'static str, f64); 5] {
        [("cls", self.cls), ("tri", self.tri), ("mcl", self.mcl), ("hcl", self.hcl), ("total", self.total)]
    }
}

/// `λ1·cls + λ2·tri + λ3·mcl + λ4·hcl` and its report.
pub fn total_loss<'g>(terms: &LossTerms<'g>, weights: &LossWeights) -> (Var<'g>, LossReport) {
    let g = terms.cls.total().graph();
    let cls = terms.cls.total();
    let tri = terms.tri.total;
    let mcl = terms.mcl.map(|m| m.total).unwrap_or_else(|| zero(g));
    let hcl = terms.hcl.total;
    let [l1, l2, l3, l4] = weights.lambda;
    let total = cls.mul_scalar(l1).add(tri.mul_scalar(l2)).add(mcl.mul_scalar(l3)).add(hcl.mul_scalar(l4));
    let item = |v: Option<Var<'g>>| v.map(|v| v.item());
    let report = LossReport {
        cls: cls.item(),
        tri: tri.item(),
        mcl: mcl.item(),
        hcl: hcl.item(),
        total: total.item(),
        cls_heads: HeadBreakdown {
            ori: terms.cls.heads.ori.item(),
            sem: item(terms.cls.heads.sem),
            pie: item(terms.cls.heads.pie),
            deg: item(terms.cls.deg),
        },
        tri_heads: HeadBreakdown { ori: terms.tri.ori.item(), sem: item(terms.tri.sem), pie: item(terms.tri.pie), deg: None },
        mcl_scales: terms.mcl.map(|m| m.scales.map(|s| s.item())),
        hcl_sem: item(terms.hcl.sem),
        hcl_deg: item(terms.hcl.deg),
        triplets: terms.tri.triplets.len(),
    };
    (total, report)
}
