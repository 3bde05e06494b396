use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reid_core::augment::{
    apply_mask, normal_pipeline, occluder_mask, random_rectangle_mask, strong_pipeline, BinaryMask, MaskSpec,
    NormalAugConfig, Occluder, StrongAugConfig,
};
use reid_core::checkpoint::Checkpoint;
use reid_core::config::{Preset, TrainConfig};
use reid_core::gradcheck::{run_gradcheck, GradcheckConfig};
use reid_core::imaging::{
    generate_synthetic_dataset, load_dataset, save_samples, split_by_identity, DatasetSplits, ImageBuffer, Split,
    SynthConfig,
};
use reid_core::retrieval::FeatureMode;
use reid_core::trainer::{evaluate_model, resolve_config, run_sweep, Sweep};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::ConfigArgs;

/// Bad input from the command line, reported with exit code 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(core) = cause.downcast_ref::<reid_core::Error>() {
            if matches!(core, reid_core::Error::Config(_) | reid_core::Error::InvalidArgument(_)) {
                return 1;
            }
        }
    }
    2
}

/// Preset, then file, then `--set` pairs, then `--seed`.
pub fn resolve(args: &ConfigArgs) -> Result<TrainConfig> {
    let preset: Preset = args.preset.parse()?;
    let mut cfg = TrainConfig::preset(preset);
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg = cfg.apply_text(&text)?;
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn synth(
    out: &Path,
    ids: usize,
    per_id: usize,
    cams: usize,
    seed: u64,
    size: (usize, usize),
    held_in: bool,
) -> Result<ExitCode> {
    if ids < 2 {
        return Err(usage(format!("--ids must be at least 2 (got {ids})")));
    }
    if per_id < 2 || cams == 0 {
        return Err(usage("--imgs-per-id must be at least 2 and --cams at least 1"));
    }
    let cfg = SynthConfig::new(ids, per_id, cams, seed).with_size(size.0, size.1);
    let samples = generate_synthetic_dataset(&cfg)?;
    let splits = split_by_identity(&samples, held_in)?;
    let mut total = 0;
    for (split, set) in [
        (Split::Train, &splits.train),
        (Split::Query, &splits.query),
        (Split::Gallery, &splits.gallery),
    ] {
        let dir = out.join(split.dir_name());
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        total += save_samples(&dir, set)?.len();
        println!("{}: {} images", split.dir_name(), set.len());
    }
    println!("wrote {total} images to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).with_context(|| format!("reading input directory {}", dir.display()))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn rect_list(mask: &BinaryMask) -> String {
    let parts: Vec<String> = mask
        .rects
        .iter()
        .map(|r| format!("{},{},{},{}", r.top, r.left, r.height, r.width))
        .collect();
    if parts.is_empty() {
        "-".into()
    } else {
        parts.join(";")
    }
}

pub fn augment(
    input: &Path,
    out: &Path,
    pipeline: &str,
    ratio: f64,
    max_size: (usize, usize),
    seed: u64,
) -> Result<ExitCode> {
    let mask_spec = MaskSpec {
        max_height: max_size.0,
        max_width: max_size.1,
        ..MaskSpec::default().with_ratio(ratio)
    };
    mask_spec.validate()?;
    let occluder: Option<Occluder> = match pipeline {
        "mask" | "strong" | "normal" => None,
        other => Some(other.parse()?),
    };
    let files = image_files(input)?;
    if files.is_empty() {
        bail!("no png or jpeg images in {}", input.display());
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut records = String::from("# file seed stream fraction shortfall rects(top,left,height,width)\n");
    let mut fractions = Vec::new();
    for (i, path) in files.iter().enumerate() {
        let img = ImageBuffer::open(path)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (h, w) = (img.height(), img.width());
        let (result, mask) = match (pipeline, &occluder) {
            ("mask", _) => {
                let m = random_rectangle_mask(h, w, &mask_spec.clamped_to(h, w), &mut rng)?;
                (apply_mask(&img, &m)?, Some(m))
            }
            ("strong", _) => {
                let cfg = StrongAugConfig {
                    mask: mask_spec.clone(),
                    ..StrongAugConfig::default()
                };
                let (v, m) = strong_pipeline(&img, &cfg, &mut rng)?;
                (v, Some(m))
            }
            ("normal", _) => (normal_pipeline(&img, &NormalAugConfig::default(), &mut rng), None),
            (_, Some(kind)) => {
                let m = occluder_mask(h, w, kind, &mut rng)?;
                (apply_mask(&img, &m)?, Some(m))
            }
            _ => unreachable!("pipeline validated above"),
        };
        let name = path.file_name().expect("listed file").to_string_lossy().to_string();
        let out_name = Path::new(&name).with_extension("png");
        result.save_png(&out.join(&out_name))?;
        match &mask {
            Some(m) => {
                fractions.push(m.masked_fraction());
                let _ = writeln!(
                    records,
                    "{} {seed} {i} {:.6} {} {}",
                    out_name.display(),
                    m.masked_fraction(),
                    m.shortfall,
                    rect_list(m)
                );
            }
            None => {
                let _ = writeln!(records, "{} {seed} {i} na false -", out_name.display());
            }
        }
    }
    fs::write(out.join("records.txt"), &records).context("writing records.txt")?;
    let summary = if fractions.is_empty() {
        format!("images={} pipeline={pipeline} fraction=na", files.len())
    } else {
        let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
        let min = fractions.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = fractions.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        format!(
            "images={} pipeline={pipeline} ratio={ratio} mean_fraction={mean:.6} min_fraction={min:.6} max_fraction={max:.6}",
            files.len()
        )
    };
    fs::write(out.join("summary.txt"), format!("{summary}\n")).context("writing summary.txt")?;
    println!("{summary}");
    Ok(ExitCode::SUCCESS)
}

fn default_run_dir(seed: u64) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    PathBuf::from("runs").join(format!("{stamp}-seed{seed}"))
}

fn load_split(data: &Path, split: Split, cfg: &TrainConfig) -> Result<Vec<reid_core::imaging::PersonSample>> {
    let size = (cfg.model.encoder.height, cfg.model.encoder.width);
    let loaded = load_dataset(data, split, size)?;
    if loaded.skipped > 0 {
        eprintln!("warning: skipped {} files in {}", loaded.skipped, split.dir_name());
    }
    Ok(loaded.samples)
}

#[derive(Serialize)]
struct SweepRow {
    label: String,
    #[serde(rename = "mAP")]
    map: f64,
    rank1: f64,
    final_loss: f64,
}

pub fn train(data: &Path, args: &ConfigArgs, run_dir: Option<PathBuf>, sweep: Option<&str>) -> Result<ExitCode> {
    let cfg = resolve(args)?;
    let sweep: Option<Sweep> = sweep.map(str::parse).transpose()?;
    let train = load_split(data, Split::Train, &cfg)?;
    let cfg = resolve_config(&cfg, &train)?;
    print!("# resolved config\n{}", cfg.to_text());

    let dir = run_dir.unwrap_or_else(|| default_run_dir(cfg.seed));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.txt"), cfg.to_text()).context("writing config.txt")?;
    println!("# run directory {}", dir.display());

    let mut stdout = std::io::stdout().lock();
    match sweep {
        None => {
            let run = reid_core::trainer::train(&train, &cfg, Some(&dir), &mut stdout)?;
            writeln!(stdout, "# finished {} steps", run.opt.step)?;
        }
        Some(kind) => {
            let splits = DatasetSplits {
                query: load_split(data, Split::Query, &cfg)?,
                gallery: load_split(data, Split::Gallery, &cfg)?,
                train,
            };
            let results = run_sweep(&splits, &cfg, kind, Some(&dir), &mut stdout)?;
            let rows: Vec<SweepRow> = results
                .iter()
                .map(|r| SweepRow {
                    label: r.label.clone(),
                    map: r.report.map,
                    rank1: r.report.rank1,
                    final_loss: r.final_loss,
                })
                .collect();
            for r in &rows {
                writeln!(
                    stdout,
                    "{:<22} mAP={:.4} rank1={:.4} final_loss={:.4}",
                    r.label, r.map, r.rank1, r.final_loss
                )?;
            }
            fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&rows)?).context("writing sweep.json")?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EvalJson {
    #[serde(rename = "mAP")]
    map: f64,
    rank1: f64,
    /// CMC at ranks 1..=50, held at its last value past the gallery size.
    cmc: Vec<f64>,
    n_queries: usize,
    n_excluded: usize,
    config_digest: String,
    checkpoint: String,
    config: BTreeMap<String, String>,
}

pub fn eval(checkpoint: &Path, data: &Path, out: Option<PathBuf>, feature: Option<&str>) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut cfg = TrainConfig::from_text(&ckpt.config_text)?;
    if let Some(f) = feature {
        cfg.eval_feature = f.parse::<FeatureMode>()?;
    }
    let text = cfg.to_text();
    print!("# resolved config\n{text}");
    let query = load_split(data, Split::Query, &cfg)?;
    let gallery = load_split(data, Split::Gallery, &cfg)?;
    let report = evaluate_model(&ckpt.params, &cfg, &query, &gallery)?;
    let json = EvalJson {
        map: report.map,
        rank1: report.rank1,
        cmc: report.cmc_upto(50),
        n_queries: report.n_queries,
        n_excluded: report.n_excluded,
        config_digest: hex::encode(Sha256::digest(text.as_bytes())),
        checkpoint: checkpoint.display().to_string(),
        config: cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    };
    let path = out.unwrap_or_else(|| checkpoint.with_file_name("eval.json"));
    fs::write(&path, serde_json::to_string_pretty(&json)?).with_context(|| format!("writing {}", path.display()))?;
    println!(
        "mAP={:.4} rank1={:.4} queries={} excluded={}",
        report.map, report.rank1, report.n_queries, report.n_excluded
    );
    println!("# report {}", path.display());
    Ok(ExitCode::SUCCESS)
}

/// `blocks.3.attn.qkv.weight` → `blocks.3`; otherwise the first segment.
fn group_of(name: &str) -> String {
    let mut parts = name.split('.');
    let head = parts.next().unwrap_or(name);
    match (head, parts.next()) {
        ("blocks", Some(i)) => format!("blocks.{i}"),
        _ => head.to_string(),
    }
}

pub fn gradcheck(seed: u64, quick: bool) -> Result<ExitCode> {
    let mut cfg = GradcheckConfig {
        seed,
        ..GradcheckConfig::toy()
    };
    if quick {
        cfg.model.encoder.layers = 2;
        cfg.coords = 4;
        cfg.directions = 1;
        cfg.full_limit = 8;
    }
    let r = run_gradcheck(&cfg)?;
    let mut worst: BTreeMap<String, (f64, String)> = BTreeMap::new();
    for c in &r.checks {
        let e = worst.entry(group_of(&c.name)).or_insert((0.0, String::new()));
        if c.rel_err >= e.0 {
            *e = (c.rel_err, format!("{:?} {}", c.objective, c.name));
        }
    }
    println!("{:<14} {:>10}  worst tensor", "group", "rel_err");
    for (g, (err, at)) in &worst {
        println!("{g:<14} {err:>10.3e}  {at}");
    }
    println!("frozen (no gradient): {}", r.frozen.join(", "));
    println!(
        "stop-gradient: stopped path {:.1e}, open path {:.1e}, surrogate gap {:.1e}",
        r.stopped_path_grad, r.open_path_grad, r.surrogate_gap
    );
    let stop_ok = r.stopped_path_grad <= 1e-12 && r.surrogate_gap <= 1e-12;
    let ok = r.passed() && stop_ok;
    println!(
        "{} max rel_err {:.3e} over {} tensor checks (tolerance {:.0e})",
        if ok { "PASS" } else { "FAIL" },
        r.max_rel_err(),
        r.checks.len(),
        r.tolerance
    );
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(overrides: &[&str]) -> ConfigArgs {
        ConfigArgs {
            preset: "toy".into(),
            config: None,
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
            seed: None,
        }
    }

    #[test]
    fn precedence_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.txt");
        fs::write(&file, "lambda=0.8\nepochs=3\n").unwrap();
        let mut a = args(&["lambda=0.9"]);
        a.config = Some(file);
        a.seed = Some(7);
        let c = resolve(&a).unwrap();
        assert_eq!((c.lambda, c.epochs, c.seed), (0.9, 3, 7));

        let e = resolve(&args(&["no_such_key=1"])).unwrap_err();
        assert_eq!(exit_code(&e), 1);
        let e = resolve(&args(&["lambda"])).unwrap_err();
        assert_eq!(exit_code(&e), 1);
    }

    #[test]
    fn groups() {
        assert_eq!(group_of("blocks.3.attn.qkv.weight"), "blocks.3");
        assert_eq!(group_of("cls_token"), "cls_token");
        assert_eq!(group_of("projector.bn0.bias"), "projector");
    }
}
