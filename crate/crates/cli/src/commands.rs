use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use igcl::backbone::Variant;
use igcl::checkpoint::Checkpoint;
use igcl::dataio::{load_dataset, synth_generate, DatasetLayout, SplitName, SynthSpec};
use igcl::eval::{compute_cmc_map, export_similarity_matrix, l2_normalize, pairwise_euclidean, write_metrics, ProtocolConfig, SampleMeta};
use igcl::losses::SpreadStat;
use igcl::trainer::{extract_features, run_training, InferenceModel, RunOptions, ShieldingMode, StreamToggles, TrainConfig, LOG_FILE};
use igcl::types::{FeatureVector, RngSeed};
use igcl::IgclError;

use crate::config::{Settings, EVAL_KEYS, EXTRACT_KEYS, SYNTH_KEYS, TRAIN_KEYS};
use crate::{CliError, EvalArgs, ExtractArgs, SynthArgs, TrainArgs};

const DATA_ENV: &str = "IGCL_DATA_ROOT";
const OUTPUT_ENV: &str = "IGCL_OUTPUT_ROOT";

fn load_config(s: &mut Settings, path: &Option<PathBuf>) -> Result<(), CliError> {
    match path {
        Some(p) => s.load_file(p),
        None => Ok(()),
    }
}

/// `data` falls back to the data-root variable; `out` to the output root
/// (or `igcl-out`) joined with the command name.
fn default_paths(s: &mut Settings, command: &str) {
    if let Ok(root) = std::env::var(DATA_ENV) {
        s.default("data", root);
    }
    let root = std::env::var(OUTPUT_ENV).unwrap_or_else(|_| "igcl-out".into());
    s.default("out", Path::new(&root).join(command).display());
}

fn required_path(s: &Settings, key: &str, hint: &str) -> Result<PathBuf, CliError> {
    s.get_opt::<PathBuf>(key)?.ok_or_else(|| CliError::Usage(format!("no `{key}` given ({hint})")))
}

/// Invalid settings caught by library validation are usage errors.
fn usage(e: IgclError) -> CliError {
    match e {
        IgclError::InvalidArgument(m) => CliError::Usage(m),
        other => CliError::Core(other),
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(path.display().to_string(), e)
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let mut s = Settings::new("synth", SYNTH_KEYS);
    load_config(&mut s, &a.config)?;
    s.set("out", a.out.as_ref().map(|p| p.display()));
    s.set("ids", a.ids);
    s.set("per_id", a.per_id);
    s.set("clothes", a.clothes);
    s.set("seed", a.seed);
    s.set("height", a.height);
    s.set("width", a.width);
    if let Ok(root) = std::env::var(DATA_ENV) {
        s.default("out", root);
    }
    for (k, v) in [("ids", 4), ("per_id", 8), ("clothes", 2), ("seed", 0), ("height", 64), ("width", 32)] {
        s.default(k, v);
    }
    let out = required_path(&s, "out", "pass --out or set IGCL_DATA_ROOT")?;
    let spec = SynthSpec {
        num_identities: s.get("ids")?,
        images_per_identity: s.get("per_id")?,
        clothes_per_identity: s.get("clothes")?,
        image_size: (s.get("height")?, s.get("width")?),
        seed: RngSeed(s.get("seed")?),
    };
    spec.validate().map_err(usage)?;
    let ds = synth_generate(&spec, &out)?;
    s.write_snapshot(&out)?;
    println!(
        "wrote {}: train {} images ({} ids), query {}, gallery {}",
        out.display(),
        ds.train.len(),
        ds.train.num_identities(),
        ds.query.len(),
        ds.gallery.len()
    );
    Ok(())
}

fn shielding_name(m: ShieldingMode) -> &'static str {
    match m {
        ShieldingMode::Orig => "orig",
        ShieldingMode::OrigShield => "orig_shield",
        ShieldingMode::FgShield => "fg_shield",
    }
}

fn spread_name(s: SpreadStat) -> &'static str {
    match s {
        SpreadStat::Variance => "variance",
        SpreadStat::StdDev => "std",
    }
}

/// Fills every unset training key from the preset of the chosen variant.
fn train_defaults(s: &mut Settings, base: &TrainConfig) {
    s.default("epochs", base.epochs);
    s.default("steps", base.max_steps.unwrap_or(0));
    s.default("lr", base.base_lr);
    s.default("lr_floor", base.lr_floor);
    s.default("momentum", base.momentum);
    s.default("weight_decay", base.weight_decay);
    s.default("alpha", base.alpha);
    s.default("margin", base.weights.margin);
    for (key, w) in ["lambda_cls", "lambda_tri", "lambda_mcl", "lambda_hcl"].into_iter().zip(base.weights.lambda) {
        s.default(key, w);
    }
    s.default("cad", base.streams.cad);
    s.default("saj", base.streams.saj);
    s.default("pie", base.streams.pie);
    s.default("jigsaw", base.jigsaw);
    s.default("shielding", shielding_name(base.shielding));
    s.default("pie_triplet", base.pie_triplet);
    s.default("spread", spread_name(base.spread));
    s.default("p", base.p);
    s.default("k", base.k);
    s.default("seed", base.seed.0);
    s.default("checkpoint_every", base.checkpoint_every);
    s.default("resume", "");
    s.default("pretrained", "");
}

fn train_config(s: &Settings) -> Result<TrainConfig, CliError> {
    let variant = match s.raw("variant") {
        Some("tiny") => Variant::Tiny,
        Some("full") => Variant::Full,
        other => return Err(CliError::Usage(format!("variant must be tiny or full, got {other:?}"))),
    };
    let base = if variant == Variant::Tiny { TrainConfig::tiny() } else { TrainConfig::default() };
    let spread = match s.raw("spread") {
        Some("variance") => SpreadStat::Variance,
        Some("std") => SpreadStat::StdDev,
        other => return Err(CliError::Usage(format!("spread must be variance or std, got {other:?}"))),
    };
    let steps: usize = s.get("steps")?;
    let mut config = TrainConfig {
        variant,
        epochs: s.get("epochs")?,
        max_steps: (steps > 0).then_some(steps),
        base_lr: s.get("lr")?,
        lr_floor: s.get("lr_floor")?,
        momentum: s.get("momentum")?,
        weight_decay: s.get("weight_decay")?,
        alpha: s.get("alpha")?,
        streams: StreamToggles { cad: s.get("cad")?, saj: s.get("saj")?, pie: s.get("pie")? },
        jigsaw: s.get("jigsaw")?,
        shielding: s.get::<ShieldingMode>("shielding")?,
        pie_triplet: s.get("pie_triplet")?,
        spread,
        p: s.get("p")?,
        k: s.get("k")?,
        seed: RngSeed(s.get("seed")?),
        checkpoint_every: s.get("checkpoint_every")?,
        ..base
    };
    config.weights.margin = s.get("margin")?;
    config.weights.lambda = [s.get("lambda_cls")?, s.get("lambda_tri")?, s.get("lambda_mcl")?, s.get("lambda_hcl")?];
    config.validate().map_err(usage)?;
    Ok(config)
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut s = Settings::new("train", TRAIN_KEYS);
    load_config(&mut s, &a.config)?;
    s.set("data", a.data.as_ref().map(|p| p.display()));
    s.set("out", a.out.as_ref().map(|p| p.display()));
    s.set_flag("variant", a.tiny, "tiny");
    s.set("steps", a.steps);
    s.set("epochs", a.epochs);
    s.set("seed", a.seed);
    s.set("lr", a.lr);
    s.set("alpha", a.alpha);
    s.set("p", a.p);
    s.set("k", a.k);
    s.set_flag("cad", a.no_cad, false);
    s.set_flag("saj", a.no_saj, false);
    s.set_flag("pie", a.no_pie, false);
    s.set_flag("jigsaw", a.no_jigsaw, false);
    s.set("shielding", a.shielding.as_ref());
    s.set("checkpoint_every", a.checkpoint_every);
    s.set("resume", a.resume.as_ref().map(|p| p.display()));
    s.set("pretrained", a.pretrained.as_ref().map(|p| p.display()));
    s.default("variant", "full");
    default_paths(&mut s, "train");
    let base = if s.raw("variant") == Some("tiny") { TrainConfig::tiny() } else { TrainConfig::default() };
    train_defaults(&mut s, &base);
    let config = train_config(&s)?;
    let data = required_path(&s, "data", "pass --data or set IGCL_DATA_ROOT")?;
    let out = required_path(&s, "out", "pass --out or set IGCL_OUTPUT_ROOT")?;

    let ds = load_dataset(&data, &DatasetLayout::default())?;
    let resume = s.get_opt::<PathBuf>("resume")?.map(|p| Checkpoint::load(&p)).transpose()?;
    s.write_snapshot(&out)?;
    let options = RunOptions { out_dir: Some(out.clone()), resume, pretrained: s.get_opt("pretrained")? };
    let outcome = run_training(&config, &ds.train, options)?;
    match outcome.log.last() {
        Some(last) => println!(
            "trained {} steps (through step {}, epoch {}): final loss {:.6}; log {}",
            outcome.log.len(),
            last.step,
            last.epoch,
            last.report.total,
            out.join(LOG_FILE).display()
        ),
        None => println!("nothing to train: checkpoint already at step {}", outcome.trainer.progress.step),
    }
    Ok(())
}

fn split_name(s: &Settings, key: &str) -> Result<SplitName, CliError> {
    s.get::<SplitName>(key)
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let mut s = Settings::new("eval", EVAL_KEYS);
    load_config(&mut s, &a.config)?;
    s.set("checkpoint", a.checkpoint.as_ref().map(|p| p.display()));
    s.set("data", a.data.as_ref().map(|p| p.display()));
    s.set("out", a.out.as_ref().map(|p| p.display()));
    s.set("query_split", a.query_split.as_ref());
    s.set("gallery_split", a.gallery_split.as_ref());
    s.set_flag("exclude_same_camera", a.keep_same_camera, false);
    s.set_flag("exclude_same_clothes", a.cloth_changing, true);
    s.set("export_similarity", a.export_similarity);
    default_paths(&mut s, "eval");
    let defaults = ProtocolConfig::default();
    s.default("query_split", "query");
    s.default("gallery_split", "gallery");
    s.default("exclude_same_camera", defaults.exclude_same_camera);
    s.default("exclude_same_clothes", defaults.exclude_same_clothes);
    s.default("export_similarity", 0);
    let checkpoint = required_path(&s, "checkpoint", "pass --checkpoint")?;
    let data = required_path(&s, "data", "pass --data or set IGCL_DATA_ROOT")?;
    let out = required_path(&s, "out", "pass --out or set IGCL_OUTPUT_ROOT")?;
    let (qs, gs) = (split_name(&s, "query_split")?, split_name(&s, "gallery_split")?);
    let protocol = ProtocolConfig { exclude_same_camera: s.get("exclude_same_camera")?, exclude_same_clothes: s.get("exclude_same_clothes")? };
    let similarity: usize = s.get("export_similarity")?;

    let model = InferenceModel::load(&checkpoint)?;
    let ds = load_dataset(&data, &DatasetLayout::default())?;
    let (query, gallery) = (ds.split(qs), ds.split(gs));
    if query.is_empty() || gallery.is_empty() {
        return Err(CliError::Core(IgclError::InvalidArgument(format!("empty split: {} query, {} gallery images", query.len(), gallery.len()))));
    }
    s.write_snapshot(&out)?;
    let qf = l2_normalize(&extract_features(&model, &query.samples)?)?;
    let gf = l2_normalize(&extract_features(&model, &gallery.samples)?)?;
    let qm: Vec<SampleMeta> = query.samples.iter().map(SampleMeta::from).collect();
    let gm: Vec<SampleMeta> = gallery.samples.iter().map(SampleMeta::from).collect();
    let result = compute_cmc_map(&pairwise_euclidean(&qf, &gf)?, &qm, &gm, &protocol)?;
    write_metrics(&out, &result, gallery.len())?;
    println!("mAP      {:.4}", result.map);
    for k in [1, 5, 10, 20] {
        println!("CMC@{k:<4} {:.4}", result.rank(k));
    }
    println!("{} of {} queries evaluated; metrics in {}", result.valid_queries, qm.len(), out.join("metrics.txt").display());

    if similarity > 0 {
        let pool: Vec<FeatureVector> = qf.iter().chain(&gf).take(similarity).cloned().collect();
        if pool.len() < similarity {
            return Err(CliError::Core(IgclError::InvalidArgument(format!("similarity matrix of {similarity} needs that many images, have {}", pool.len()))));
        }
        let png = out.join("similarity.png");
        let m = export_similarity_matrix(&pool, &png)?;
        let mut tsv = String::new();
        for row in m.data().chunks(similarity) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(tsv, "{}", cells.join("\t")).unwrap();
        }
        let path = out.join("similarity.tsv");
        fs::write(&path, tsv).map_err(io(&path))?;
        println!("similarity matrix {similarity}×{similarity}: {}", png.display());
    }
    Ok(())
}

pub const FEATURES_FILE: &str = "features.tsv";
pub const MANIFEST_FILE: &str = "manifest.tsv";

pub fn extract(a: ExtractArgs) -> Result<(), CliError> {
    let mut s = Settings::new("extract", EXTRACT_KEYS);
    load_config(&mut s, &a.config)?;
    s.set("checkpoint", a.checkpoint.as_ref().map(|p| p.display()));
    s.set("data", a.data.as_ref().map(|p| p.display()));
    s.set("out", a.out.as_ref().map(|p| p.display()));
    s.set("split", a.split.as_ref());
    s.set_flag("normalize", a.normalize, true);
    default_paths(&mut s, "extract");
    s.default("split", "query");
    s.default("normalize", false);
    let checkpoint = required_path(&s, "checkpoint", "pass --checkpoint")?;
    let data = required_path(&s, "data", "pass --data or set IGCL_DATA_ROOT")?;
    let out = required_path(&s, "out", "pass --out or set IGCL_OUTPUT_ROOT")?;
    let split = split_name(&s, "split")?;
    let normalize: bool = s.get("normalize")?;

    let model = InferenceModel::load(&checkpoint)?;
    let ds = load_dataset(&data, &DatasetLayout::default())?;
    let samples = &ds.split(split).samples;
    let mut features = extract_features(&model, samples)?;
    if normalize {
        features = l2_normalize(&features)?;
    }
    s.write_snapshot(&out)?;
    let mut rows = String::new();
    for f in &features {
        let cells: Vec<String> = f.0.iter().map(f64::to_string).collect();
        writeln!(rows, "{}", cells.join("\t")).unwrap();
    }
    let path = out.join(FEATURES_FILE);
    fs::write(&path, rows).map_err(io(&path))?;
    let mut manifest = String::from("row\tname\tidentity\tcamera\tclothing\n");
    for (i, sample) in samples.iter().enumerate() {
        let clothing = sample.clothing.map_or_else(|| "-".to_string(), |c| c.to_string());
        writeln!(manifest, "{i}\t{}\t{}\t{}\t{clothing}", sample.name, sample.identity, sample.camera).unwrap();
    }
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(io(&path))?;
    println!("wrote {} features of dimension {} to {}", features.len(), features.first().map_or(0, FeatureVector::dim), out.display());
    Ok(())
}
