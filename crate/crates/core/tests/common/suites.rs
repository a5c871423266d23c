//! Randomized check suites. Each returns a one-line summary on success and
//! a description of the first failure otherwise.

use igcl::autograd::{Graph, Var};
use igcl::cad::{CadStream, TrunkConfig};
use igcl::dataio::render_person;
use igcl::encoder::{compose_foreground, compose_shielding, degrade_clothing, derive_masks, ClassPartition};
use igcl::eval::{compute_cmc_map, ProtocolConfig, SampleMeta};
use igcl::losses::*;
use igcl::nn::{stack_images, Ctx, ParamStore};
use igcl::pie::stn_sample_var;
use igcl::saj::{apply_jigsaw, plan_jigsaw};
use igcl::tensor::Array;
use igcl::types::{seeded_rng, Batch, ImageTensor, ParseLabelMap, Rng, RngSeed, NUM_PARSE_CLASSES};
use rand::Rng as _;

use super::*;

pub type SuiteResult = std::result::Result<String, String>;

fn random_image(h: usize, w: usize, rng: &mut Rng) -> ImageTensor {
    ImageTensor::from_fn(h, w, 3, |_, _, _| rng.random::<f64>()).unwrap()
}

fn random_parse(h: usize, w: usize, rng: &mut Rng) -> ParseLabelMap {
    ParseLabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..NUM_PARSE_CLASSES)).collect()).unwrap()
}

/// Subset chain and idempotence over random and rendered parse maps.
pub fn mask_algebra(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = seeded_rng(RngSeed(seed));
    let partition = ClassPartition::default();
    let mut violations = 0;
    for i in 0..instances {
        let (image, parse) = if i % 2 == 0 {
            let (h, w) = (rng.random_range(1..24), rng.random_range(1..16));
            (random_image(h, w, &mut rng), random_parse(h, w, &mut rng))
        } else {
            render_person(rng.random_range(0..50), rng.random_range(0..100), (64, 32), RngSeed(rng.random()))
        };
        let m = derive_masks(&parse, &partition);
        if !(m.upper.is_subset_of(&m.clothes) && m.clothes.is_subset_of(&m.foreground)) {
            violations += 1;
        }
        let alpha = rng.random::<f64>();
        let once = degrade_clothing(&image, &m, alpha).unwrap();
        if degrade_clothing(&once, &m, alpha).unwrap() != once {
            return Err(format!("degrade_clothing not idempotent on instance {i}"));
        }
        let fg = compose_foreground(&image, &m).unwrap();
        if compose_foreground(&fg, &m).unwrap() != fg {
            return Err(format!("compose_foreground not idempotent on instance {i}"));
        }
        let shield = compose_shielding(&fg, &m).unwrap();
        if shield.data().iter().chain(once.data()).chain(fg.data()).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(format!("composition left [0,1] on instance {i}"));
        }
    }
    if violations > 0 {
        return Err(format!("{violations} subset-chain violations in {instances} parse maps"));
    }
    Ok(format!("{instances} parse maps, 0 violations, idempotence exact"))
}

/// Each loss against its scalar oracle on random small instances.
pub fn loss_oracles(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = seeded_rng(RngSeed(seed));
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let g = Graph::new();
        let p = rng.random_range(2..5);
        let k = rng.random_range(1..4);
        let b = p * k;
        let labels: Vec<usize> = (0..p).flat_map(|l| std::iter::repeat_n(l, k)).collect();
        let (c, d) = (rng.random_range(2..6).max(p), rng.random_range(1..5));

        let blocks: Vec<Array> = (0..4).map(|_| random_array(&[b, c], 4.0, &mut rng)).collect();
        let v: Vec<Var<'_>> = blocks.iter().map(|a| g.constant(a.clone())).collect();
        let heads = HeadLogits { ori: v[0], sem: Some(v[1]), pie: Some(v[2]), deg: Some(v[3]) };
        let got = classification_loss(&heads, &labels).map_err(|e| e.to_string())?.total().item();
        let want: f64 = blocks.iter().map(|a| cross_entropy_oracle(&rows(a), &labels)).sum();
        worst = worst.max(check("classification", i, got, want)?);

        let (xo, xs) = (random_array(&[b, d], 1.0, &mut rng), random_array(&[b, d], 1.0, &mut rng));
        let margin = rng.random::<f64>();
        let t = triplet_loss(g.constant(xo.clone()), Some(g.constant(xs.clone())), None, &labels, margin, &mut rng).map_err(|e| e.to_string())?;
        for tr in &t.triplets {
            if labels[tr.anchor] != labels[tr.positive] || tr.anchor == tr.positive || labels[tr.anchor] == labels[tr.negative] {
                return Err(format!("invalid triplet {tr:?} on instance {i}"));
            }
        }
        let want = triplet_oracle(&rows(&xo), &t.triplets, margin) + triplet_oracle(&rows(&xs), &t.triplets, margin);
        worst = worst.max(check("triplet", i, t.total.item(), want)?);

        let n = rng.random_range(1..4);
        let sizes = [(rng.random_range(1..6), rng.random_range(1..4)), (rng.random_range(1..4), rng.random_range(1..3)), (1, rng.random_range(1..3))];
        let maps: Vec<Array> = sizes.iter().map(|&(h, w)| Array::from_fn([n, 1, h, w], |_| rng.random())).collect();
        let targets: Vec<Array> = sizes.iter().map(|&(h, w)| Array::from_fn([n, h, w], |_| rng.random())).collect();
        let nest = |a: &Array, h: usize, w: usize| -> Vec<Vec<Vec<f64>>> {
            (0..n).map(|s| (0..h).map(|y| (0..w).map(|x| a.data()[(s * h + y) * w + x]).collect()).collect()).collect()
        };
        let om: Vec<_> = maps.iter().zip(sizes).map(|(a, (h, w))| nest(a, h, w)).collect();
        let ot: Vec<_> = targets.iter().zip(sizes).map(|(a, (h, w))| nest(a, h, w)).collect();
        let mv = [g.constant(maps[0].clone()), g.constant(maps[1].clone()), g.constant(maps[2].clone())];
        let got = midlevel_collab_loss(&mv, &[targets[0].clone(), targets[1].clone(), targets[2].clone()]).map_err(|e| e.to_string())?.total.item();
        worst = worst.max(check("mid-level", i, got, midlevel_oracle(&om, &ot))?);

        let bb = b.max(2);
        let (s, dg, o) = (random_array(&[bb, d], 1.0, &mut rng), random_array(&[bb, d], 1.0, &mut rng), random_array(&[bb, d], 1.0, &mut rng));
        let std = i % 2 == 1;
        let stat = if std { SpreadStat::StdDev } else { SpreadStat::Variance };
        let got = highlevel_collab_loss(Some(g.constant(s.clone())), Some(g.constant(dg.clone())), g.constant(o.clone()), stat).map_err(|e| e.to_string())?.total.item();
        worst = worst.max(check("high-level", i, got, highlevel_oracle(&rows(&s), &rows(&dg), &rows(&o), std))?);
    }
    Ok(format!("{instances} instances per loss, worst relative error {worst:.1e}"))
}

fn check(name: &str, i: usize, got: f64, want: f64) -> std::result::Result<f64, String> {
    let e = if got == want { 0.0 } else { rel_err(got, want) };
    if e > 1e-10 {
        return Err(format!("{name} instance {i}: {got} vs oracle {want} (rel {e:.2e})"));
    }
    Ok(e)
}

/// Analytic gradient of `f` at `x` against central differences at random
/// entries. Returns the worst error.
fn probe(name: &str, x: &Array, f: &dyn for<'g> Fn(Var<'g>) -> Var<'g>, probes: usize, h: f64, rng: &mut Rng) -> std::result::Result<f64, String> {
    let g = Graph::new();
    let v = g.variable(x.clone());
    let loss = f(v);
    let grads = g.backward(loss);
    let grad = grads.get(v).cloned().unwrap_or_else(|| Array::zeros(x.shape().to_vec()));
    let eval = |a: &Array| {
        let g = Graph::new();
        f(g.constant(a.clone())).item()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let i = rng.random_range(0..x.len());
        let fd = central_difference(&eval, x, i, h);
        let e = grad_err(fd, grad.data()[i]);
        if e >= 1e-4 {
            return Err(format!("{name}: entry {i} analytic {} vs finite difference {fd} (rel {e:.2e})", grad.data()[i]));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

pub fn gradients(probes: usize, seed: u64) -> SuiteResult {
    let mut rng = seeded_rng(RngSeed(seed));
    let mut report = Vec::new();
    let labels = [0usize, 0, 1, 1, 2, 2];

    let logits = random_array(&[6, 4], 2.0, &mut rng);
    report.push(("cls", probe("classification", &logits, &|v| cross_entropy(v, &labels).unwrap(), probes, 1e-6, &mut rng)?));

    let feats = random_array(&[6, 3], 1.0, &mut rng);
    let triplets = sample_triplets(&labels, &mut rng);
    report.push(("tri", probe("triplet", &feats, &|v| triplet_term(v, &triplets, 0.8), probes, 1e-6, &mut rng)?));

    let targets = [Array::from_fn([2, 4, 2], |_| 0.5), Array::from_fn([2, 2, 1], |i| i as f64 * 0.2), Array::from_fn([2, 1, 1], |_| 0.1)];
    let maps = random_array(&[2, 1, 4, 2], 1.0, &mut rng);
    let t2 = targets.clone();
    report.push((
        "mcl",
        probe(
            "mid-level",
            &maps,
            &move |v| {
                let g = v.graph();
                let f2 = g.constant(Array::full([2, 1, 2, 1], 0.3));
                let f3 = g.constant(Array::full([2, 1, 1, 1], 0.7));
                midlevel_collab_loss(&[v.sigmoid(), f2, f3], &t2).unwrap().total
            },
            probes,
            1e-6,
            &mut rng,
        )?,
    ));

    let other = random_array(&[5, 3], 1.0, &mut rng);
    let ori = random_array(&[5, 3], 1.0, &mut rng);
    for (stat, name, ori_name) in [(SpreadStat::Variance, "hcl", "hcl/ori"), (SpreadStat::StdDev, "hcl_std", "hcl_std/ori")] {
        let (o1, o2) = (other.clone(), ori.clone());
        let x = random_array(&[5, 3], 1.0, &mut rng);
        report.push((
            name,
            probe(
                name,
                &x,
                &move |v| {
                    let g = v.graph();
                    highlevel_collab_loss(Some(v), Some(g.constant(o1.clone())), g.constant(o2.clone()), stat).unwrap().total
                },
                probes,
                1e-6,
                &mut rng,
            )?,
        ));
        let (o1, x1) = (other.clone(), x.clone());
        report.push((
            ori_name,
            probe(
                ori_name,
                &ori,
                &move |v| {
                    let g = v.graph();
                    highlevel_collab_loss(Some(g.constant(x1.clone())), Some(g.constant(o1.clone())), v, stat).unwrap().total
                },
                probes,
                1e-6,
                &mut rng,
            )?,
        ));
    }

    // smooth image, theta near identity
    let image = Array::from_fn([1, 3, 8, 6], |i| {
        let (c, y, x) = (i / 48, (i / 6) % 8, i % 6);
        0.5 + 0.4 * ((x as f64 * 0.7 + c as f64).sin() * (y as f64 * 0.5).cos())
    });
    let weights = random_array(&[1, 3, 8, 6], 1.0, &mut rng);
    let theta = Array::from_fn([1, 2, 3], |i| [0.9, 0.05, 0.03, -0.04, 0.8, 0.02][i] + 0.01 * rng.random::<f64>());
    report.push((
        "stn",
        probe(
            "stn_sample w.r.t. theta",
            &theta,
            &move |t| {
                let g = t.graph();
                stn_sample_var(g.constant(image.clone()), t).mul(g.constant(weights.clone())).sum_all()
            },
            probes,
            1e-6,
            &mut rng,
        )?,
    ));

    report.push(("mcl/cv1", mcl_wrt_cama(probes, &mut rng)?));
    let worst = report.iter().map(|r| r.1).fold(0.0, f64::max);
    let names: Vec<&str> = report.iter().map(|r| r.0).collect();
    Ok(format!("{} probes each over {}; worst relative error {worst:.1e}", probes, names.join(", ")))
}

/// Mid-level loss of a tiny trunk against a CV1 weight of each attention
/// module.
fn mcl_wrt_cama(probes: usize, rng: &mut Rng) -> std::result::Result<f64, String> {
    let stream = CadStream::new("cad", TrunkConfig::tiny(2)).unwrap();
    let mut store = ParamStore::new();
    stream.init(&mut store, RngSeed(3));
    let img = ImageTensor::from_fn(64, 32, 3, |y, x, c| 0.5 + 0.3 * ((x + c) as f64 * 0.3).sin() * (y as f64 * 0.2).cos()).unwrap();
    let images = stack_images([&img]).unwrap();
    let targets = [Array::full([1, 16, 8], 0.3), Array::full([1, 8, 4], 0.6), Array::full([1, 4, 2], 0.2)];
    let run = |store: &ParamStore| {
        let g = Graph::new();
        let ctx = Ctx::new(&g, store, true);
        let out = stream.forward(&ctx, g.constant(images.clone())).unwrap();
        let loss = midlevel_collab_loss(&out.attention, &targets).unwrap().total;
        (loss.item(), g.backward(loss).by_param())
    };
    let (_, grads) = run(&store);
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for p in 0..probes {
        let name = stream.cama[p % 3].cv1.weight_name();
        let len = store.param(&name).unwrap().len();
        let i = rng.random_range(0..len);
        let mut plus = store.clone();
        plus.param_mut(&name).unwrap().data_mut()[i] += h;
        let mut minus = store.clone();
        minus.param_mut(&name).unwrap().data_mut()[i] -= h;
        let fd = (run(&plus).0 - run(&minus).0) / (2.0 * h);
        let an = grads[&name].data()[i];
        let e = grad_err(fd, an);
        if e >= 1e-4 {
            return Err(format!("mid-level w.r.t. {name}[{i}]: analytic {an} vs finite difference {fd} (rel {e:.2e})"));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

fn random_meta(rng: &mut Rng) -> SampleMeta {
    SampleMeta { identity: rng.random_range(0..3), camera: rng.random_range(0..2), clothing: Some(rng.random_range(0..2)) }
}

pub fn retrieval(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = seeded_rng(RngSeed(seed));
    let mut evaluated = 0;
    for i in 0..instances {
        let (q, g) = (rng.random_range(1..=5), rng.random_range(1..=10));
        let query: Vec<SampleMeta> = (0..q).map(|_| random_meta(&mut rng)).collect();
        let gallery: Vec<SampleMeta> = (0..g).map(|_| random_meta(&mut rng)).collect();
        // coarse values so ties occur
        let dist: Vec<Vec<f64>> = (0..q).map(|_| (0..g).map(|_| rng.random_range(0..6) as f64 * 0.25).collect()).collect();
        let protocol = ProtocolConfig { exclude_same_camera: rng.random(), exclude_same_clothes: rng.random() };
        let flat = Array::new([q, g], dist.iter().flatten().copied().collect());
        let r = compute_cmc_map(&flat, &query, &gallery, &protocol).map_err(|e| e.to_string())?;
        let (map, cmc, valid) = retrieval_oracle(&dist, &query, &gallery, &protocol);
        if r.map != map || r.cmc != cmc || r.valid_queries != valid {
            return Err(format!("instance {i}: mAP {} vs {map}, cmc {:?} vs {cmc:?}", r.map, r.cmc));
        }
        if r.cmc.windows(2).any(|w| w[0] > w[1]) || r.cmc.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(format!("instance {i}: CMC not monotone in [0,1]: {:?}", r.cmc));
        }
        evaluated += valid;
    }
    Ok(format!("{instances} instances ({evaluated} evaluated queries), exact agreement, CMC monotone"))
}

pub fn jigsaw(batches: usize, seed: u64) -> SuiteResult {
    let mut rng = seeded_rng(RngSeed(seed));
    for i in 0..batches {
        let (p, k) = (rng.random_range(1..6), rng.random_range(1..5));
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..5));
        let labels: Vec<usize> = (0..p).map(|i| 3 * i + rng.random_range(0..3)).flat_map(|l| std::iter::repeat_n(l, k)).collect();
        let batch = Batch { indices: (0..p * k).collect(), labels: labels.clone(), p, k };
        let images: Vec<ImageTensor> = (0..p * k).map(|_| random_image(h, w, &mut rng)).collect();
        let plan = plan_jigsaw(&batch, h);
        for &(a, b) in &plan.pairs {
            if labels[a] != labels[b] {
                return Err(format!("batch {i}: pair ({a},{b}) mixes identities"));
            }
        }
        let out = apply_jigsaw(&images, &plan).map_err(|e| e.to_string())?;
        if apply_jigsaw(&out, &plan).map_err(|e| e.to_string())? != images {
            return Err(format!("batch {i}: jigsaw is not an involution"));
        }
        let paired: Vec<usize> = plan.pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        for j in (0..images.len()).filter(|j| !paired.contains(j)) {
            if out[j] != images[j] {
                return Err(format!("batch {i}: unpaired image {j} changed"));
            }
        }
        for &(a, b) in &plan.pairs {
            let sorted = |x: &ImageTensor, y: &ImageTensor| {
                let mut v: Vec<f64> = x.data().iter().chain(y.data()).copied().collect();
                v.sort_by(f64::total_cmp);
                v
            };
            if sorted(&images[a], &images[b]) != sorted(&out[a], &out[b]) {
                return Err(format!("batch {i}: pixel multiset of pair ({a},{b}) changed"));
            }
        }
    }
    Ok(format!("{batches} random batches: involution, label invariance, multiset conservation"))
}

/// Full-size trunk: stage-1 and final shapes, attention range, and the
/// zero-weight forcing of every attention map to one half.
pub fn cama_full_scale(seed: u64) -> SuiteResult {
    use igcl::cad::cama_forward;
    let config = TrunkConfig::full(10);
    let stream = CadStream::new("cad", config).map_err(|e| e.to_string())?;
    let mut store = ParamStore::new();
    stream.init(&mut store, RngSeed(seed));
    let mut rng = seeded_rng(RngSeed(seed));
    let image = random_image(384, 128, &mut rng);
    let out = cama_forward(&image, &stream, &store).map_err(|e| e.to_string())?;
    if out.phi1.shape() != [256, 96, 32] {
        return Err(format!("stage-1 map has shape {:?}", out.phi1.shape()));
    }
    if out.final_map.shape() != [2048, 24, 8] {
        return Err(format!("final map has shape {:?}", out.final_map.shape()));
    }
    let expect = [[96, 32], [48, 16], [24, 8]];
    for (k, a) in out.attention.iter().enumerate() {
        if a.shape() != expect[k] {
            return Err(format!("attention map {k} has shape {:?}", a.shape()));
        }
        if a.data().iter().any(|&v| v <= 0.0 || v >= 1.0) {
            return Err(format!("attention map {k} leaves the open unit interval"));
        }
    }
    for c in &stream.cama {
        for name in [c.cv1.weight_name(), c.cv2.weight_name(), c.cv2.bias_name()] {
            let p = store.param_mut(&name).ok_or(format!("missing {name}"))?;
            *p = Array::zeros(p.shape().to_vec());
        }
    }
    let forced = cama_forward(&image, &stream, &store).map_err(|e| e.to_string())?;
    if forced.attention.iter().any(|a| a.data().iter().any(|&v| v != 0.5)) {
        return Err("zero attention weights did not give 0.5 everywhere".into());
    }
    Ok("stage 1 256×96×32, final 2048×24×8, maps in (0,1), zero forcing gives 0.5".into())
}

/// One training step per row of the ablation table; each added stream must
/// contribute exactly its own loss terms.
pub fn ablation(train: &igcl::dataio::DatasetSplit) -> SuiteResult {
    use igcl::trainer::{run_training, RunOptions, StreamToggles, TrainConfig};
    use std::collections::BTreeSet;
    let rows: [(&str, StreamToggles, &[&str]); 4] = [
        ("baseline", StreamToggles::BASELINE, &["cls_ori", "tri_ori"]),
        ("+CAD", StreamToggles { cad: true, saj: false, pie: false }, &["cls_deg", "mcl", "hcl_deg"]),
        ("+CAD+SAJ", StreamToggles { cad: true, saj: true, pie: false }, &["cls_sem", "tri_sem", "hcl_sem"]),
        ("+CAD+SAJ+PIE", StreamToggles { cad: true, saj: true, pie: true }, &["cls_pie"]),
    ];
    let mut expected = BTreeSet::new();
    for (name, streams, added) in rows {
        expected.extend(added.iter().copied());
        let config = TrainConfig { streams, max_steps: Some(1), ..TrainConfig::tiny() };
        let out = run_training(&config, train, RunOptions::default()).map_err(|e| e.to_string())?;
        let r = &out.log[0].report;
        let got: BTreeSet<&str> = r.active_terms().into_iter().collect();
        if got != expected {
            return Err(format!("{name}: terms {got:?}, expected {expected:?}"));
        }
        let parts = r.cls + r.tri + r.mcl + r.hcl;
        if r.total != parts {
            return Err(format!("{name}: total {} is not the sum of its terms {parts}", r.total));
        }
        if streams == StreamToggles::BASELINE && r.total != r.cls_heads.ori + r.tri_heads.ori {
            return Err(format!("baseline total {} differs from cls_ori + tri_ori", r.total));
        }
    }
    Ok("baseline {cls_ori, tri_ori}; +CAD adds {cls_deg, mcl, hcl_deg}; +SAJ adds {cls_sem, tri_sem, hcl_sem}; +PIE adds {cls_pie}".into())
}

/// Two runs with the same seed write byte-identical logs.
pub fn reproducible_logs(train: &igcl::dataio::DatasetSplit, steps: usize) -> SuiteResult {
    use igcl::trainer::{run_training, RunOptions, TrainConfig, LOG_FILE};
    let config = TrainConfig { max_steps: Some(steps), seed: RngSeed(17), ..TrainConfig::tiny() };
    let mut logs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        run_training(&config, train, RunOptions { out_dir: Some(dir.path().to_path_buf()), ..Default::default() }).map_err(|e| e.to_string())?;
        logs.push(std::fs::read(dir.path().join(LOG_FILE)).map_err(|e| e.to_string())?);
    }
    let lines = logs[0].iter().filter(|&&b| b == b'\n').count();
    if lines != steps {
        return Err(format!("log has {lines} lines, expected {steps}"));
    }
    if logs[0] != logs[1] {
        return Err("logs differ between identical runs".into());
    }
    Ok(format!("{steps}-step logs byte-identical ({} bytes)", logs[0].len()))
}
