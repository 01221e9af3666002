use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use c2p::consensus::{infer_consensus, ConsensusConfig, Diagnostics};
use c2p::maskgeo::{extract_geometry, BinaryMask, GeometryDescriptor};
use c2p::model::Model;
use c2p::semknow::{
    builtin_prompt, encode_report, mllm_generate, write_embedding, HttpMllmClient, ImageTriplet, PromptConfig, SemanticReport,
};
use c2p::synthdata::{gen_dataset, load_folder_dataset, read_manifest, write_manifest, Dataset, ManifestEntry, Sample};
use c2p::trainer::{append_metrics, evaluate, fit, FitOutput, InferenceMode, MetricReport};
use serde::Serialize;

use crate::config::RunConfig;

fn warn(msg: impl std::fmt::Display) {
    eprintln!("warning: {msg}");
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn refuse_overwrite(out: &Path, force: bool) -> Result<()> {
    if !force && is_nonempty_dir(out) {
        bail!(c2p::Error::Config(format!(
            "{} exists and is not empty (pass --force to overwrite)",
            out.display()
        )));
    }
    Ok(())
}

fn clear(paths: &[PathBuf]) -> Result<()> {
    for p in paths {
        if p.is_dir() {
            fs::remove_dir_all(p)?;
        } else if p.exists() {
            fs::remove_file(p)?;
        }
    }
    Ok(())
}

/// Sorted regular files in `dir`.
fn files_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn gen_data(cfg: &RunConfig, out: &Path, n: usize, seed: u64, force: bool) -> Result<()> {
    refuse_overwrite(out, force)?;
    let (images, masks, embeds, manifest) = (
        out.join("images"),
        out.join("masks"),
        out.join("embeddings"),
        out.join("manifest.jsonl"),
    );
    clear(&[images.clone(), masks.clone(), embeds.clone(), manifest.clone()])?;
    let samples = gen_dataset(n, seed << 32, cfg.data.size, &cfg.data.styles)?;
    for d in [&images, &masks, &embeds] {
        fs::create_dir_all(d)?;
    }
    let mut entries = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("{i:06}");
        s.to_gray().save(images.join(format!("{stem}.png")))?;
        s.mask.to_luma().save(masks.join(format!("{stem}.png")))?;
        write_embedding(&embeds.join(format!("{stem}.c2pe")), &s.semantic)?;
        entries.push(ManifestEntry {
            stem,
            modality_id: s.modality,
        });
    }
    write_manifest(&manifest, &entries)?;
    eprintln!("wrote {n} samples to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct GeoLine<'a> {
    file: &'a str,
    #[serde(flatten)]
    geometry: GeometryDescriptor,
}

pub fn extract_geo(masks: &Path, out: &Path) -> Result<()> {
    let mut text = String::new();
    let mut count = 0;
    for p in files_in(masks)? {
        let img = match image::open(&p) {
            Ok(i) => i.to_luma8(),
            Err(e) => {
                warn(format!("skipping {}: {e}", p.display()));
                continue;
            }
        };
        let g = extract_geometry(&BinaryMask::from_luma(&img));
        let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        text.push_str(&serde_json::to_string(&GeoLine { file: &name, geometry: g })?);
        text.push('\n');
        count += 1;
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, text)?;
    eprintln!("wrote {count} descriptors to {}", out.display());
    Ok(())
}

pub struct MllmSource<'a> {
    pub images: &'a Path,
    pub masks: &'a Path,
    pub prompt: &'a str,
}

fn load_prompt(spec: &str) -> Result<PromptConfig> {
    let p = Path::new(spec);
    if p.is_file() {
        Ok(PromptConfig::load(p)?)
    } else {
        Ok(builtin_prompt(spec)?)
    }
}

pub fn gen_embeddings(cfg: &RunConfig, reports: Option<&Path>, mllm: Option<MllmSource>, out: &Path) -> Result<()> {
    let mut parsed: Vec<(String, SemanticReport)> = Vec::new();
    match (reports, mllm) {
        (Some(dir), None) => {
            for p in files_in(dir)? {
                if p.extension().and_then(|e| e.to_str()) != Some("json") {
                    warn(format!("skipping {}", p.display()));
                    continue;
                }
                let text = fs::read_to_string(&p)?;
                let r = SemanticReport::from_json(&text)
                    .and_then(|r| r.validate().map(|_| r))
                    .map_err(|e| anyhow::anyhow!(c2p::Error::SchemaViolation(format!("{}: {e}", p.display()))))?;
                parsed.push((stem(&p), r));
            }
        }
        (None, Some(src)) => {
            // Configuration problems surface before any request is sent.
            let client = HttpMllmClient::new(&cfg.mllm)?;
            let prompt = load_prompt(src.prompt)?;
            let _ = cfg.semantic.encoder()?;
            let reports_dir = out.join("reports");
            fs::create_dir_all(&reports_dir)?;
            let ds = load_folder_dataset(src.images, src.masks, None, None, None)?;
            for e in &ds.entries {
                let gray = image::open(&e.image)?.to_luma8();
                let mask = BinaryMask::load(&e.mask)?;
                let triplet = ImageTriplet::build(&gray, &mask)?;
                let r = mllm_generate(&triplet, &prompt, &client, cfg.mllm.max_retries)
                    .with_context(|| format!("report for {}", e.stem))?;
                fs::write(reports_dir.join(format!("{}.json", e.stem)), serde_json::to_string_pretty(&r)?)?;
                parsed.push((e.stem.clone(), r));
            }
        }
        _ => bail!(c2p::Error::Config("pass exactly one of --reports or --mllm".into())),
    }
    let encoder = cfg.semantic.encoder()?;
    fs::create_dir_all(out)?;
    for (stem, r) in &parsed {
        let e = encode_report(r, encoder.as_ref()).with_context(|| format!("encoding {stem}"))?;
        write_embedding(&out.join(format!("{stem}.c2pe")), &e)?;
    }
    eprintln!("wrote {} embeddings to {}", parsed.len(), out.display());
    Ok(())
}

/// Folder dataset at `dir`, or the synthetic split when `dir` is unset.
pub fn open_dataset(cfg: &RunConfig, dir: Option<&Path>, val: bool) -> Result<Box<dyn Dataset>> {
    match dir {
        Some(d) => {
            let manifest_path = d.join("manifest.jsonl");
            let manifest = if manifest_path.exists() {
                Some(read_manifest(&manifest_path)?)
            } else {
                None
            };
            let emb = d.join("embeddings");
            let ds = load_folder_dataset(
                &d.join("images"),
                &d.join("masks"),
                emb.is_dir().then_some(emb.as_path()),
                manifest.as_deref(),
                Some(cfg.data.size),
            )?;
            Ok(Box::new(ds))
        }
        None => {
            let (n, seed) = if val {
                (cfg.data.synthetic_val, (cfg.data.seed << 32) | 0x8000_0000)
            } else {
                (cfg.data.synthetic_train, cfg.data.seed << 32)
            };
            let v: Vec<Sample> = gen_dataset(n, seed, cfg.data.size, &cfg.data.styles)?;
            Ok(Box::new(v))
        }
    }
}

/// Materialize a lazily loaded dataset once so training does not decode
/// files every epoch.
fn in_memory(ds: &dyn Dataset) -> Result<Vec<Sample>> {
    (0..ds.len()).map(|i| Ok(ds.get(i)?)).collect()
}

pub fn train(cfg: &RunConfig, force: bool) -> Result<()> {
    let out = FitOutput {
        dir: cfg.output_dir.clone(),
    };
    let artifacts = [out.metrics(), out.best(), out.last()];
    if !force && artifacts.iter().any(|p| p.exists()) {
        bail!(c2p::Error::Config(format!(
            "{} already holds a run (pass --force to overwrite)",
            out.dir.display()
        )));
    }
    clear(&artifacts)?;
    fs::create_dir_all(&out.dir)?;
    fs::write(out.dir.join("config.toml"), cfg.to_toml()?)?;
    let train = in_memory(open_dataset(cfg, cfg.data.train_dir.as_deref(), false)?.as_ref())?;
    let val = in_memory(open_dataset(cfg, cfg.data.val_dir.as_deref(), true)?.as_ref())?;
    let mut model = Model::new(&cfg.model, cfg.train.seed)?;
    eprintln!(
        "training {} parameters on {} samples, validating on {}",
        model.params.scalar_count(),
        train.len(),
        val.len()
    );
    let report = fit(&mut model, &train, &val, &cfg.train, &cfg.consensus, Some(&out), |r| {
        eprintln!(
            "epoch {} {} dice {:.4} seg {:.4} geo {:.5} sem {:.4}",
            r.epoch, r.split, r.dice, r.l_seg, r.l_geo, r.l_sem
        )
    })?;
    println!(
        "{}",
        serde_json::json!({
            "best_val_dice": report.best_val_dice,
            "best_epoch": report.best_epoch,
            "steps": report.steps,
            "checkpoint": out.best(),
            "metrics": out.metrics(),
        })
    );
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model> {
    let ck = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("best.c2pc"));
    let mut model = Model::new(&cfg.model, cfg.train.seed)?;
    model
        .load_weights(&ck)
        .with_context(|| format!("loading {}", ck.display()))?;
    Ok(model)
}

pub fn evaluate_cmd(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    metrics: Option<&Path>,
    label: Option<String>,
) -> Result<()> {
    let model = load_model(cfg, checkpoint)?;
    let ds = open_dataset(cfg, data.or(cfg.data.val_dir.as_deref()), true)?;
    let mut r: MetricReport = evaluate(&model, ds.as_ref(), cfg.train.inference, &cfg.consensus, &cfg.train.loss)?;
    r.label = label;
    if let Some(p) = metrics {
        append_metrics(p, &r)?;
    }
    println!("{}", serde_json::to_string(&r)?);
    Ok(())
}

#[derive(Serialize)]
struct DiagLine<'a> {
    file: &'a str,
    inference: InferenceMode,
    #[serde(flatten)]
    diagnostics: Diagnostics,
}

pub fn infer(cfg: &RunConfig, checkpoint: Option<&Path>, images: &Path, out: &Path, force: bool) -> Result<()> {
    refuse_overwrite(out, force)?;
    let model = load_model(cfg, checkpoint)?;
    let masks_dir = out.join("masks");
    let diag_path = out.join("diagnostics.jsonl");
    clear(&[masks_dir.clone(), diag_path.clone()])?;
    fs::create_dir_all(&masks_dir)?;
    let mut diag = fs::File::create(&diag_path)?;
    let size = cfg.data.size as u32;
    let mut count = 0;
    for p in files_in(images)? {
        let img = match image::open(&p) {
            Ok(i) => i.to_luma8(),
            Err(e) => {
                warn(format!("skipping {}: {e}", p.display()));
                continue;
            }
        };
        let (w0, h0) = img.dimensions();
        let img = if (w0, h0) == (size, size) {
            img
        } else {
            image::imageops::resize(&img, size, size, image::imageops::FilterType::Triangle)
        };
        let pixels: Vec<f64> = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
        let s = size as usize;
        let (mask, diagnostics) = match cfg.train.inference {
            InferenceMode::None => {
                let m = model.predict(&pixels, s, s)?.mask();
                let final_area = m.count() as f64 / (s * s) as f64;
                (
                    m,
                    Diagnostics {
                        views: vec![],
                        final_area,
                    },
                )
            }
            mode => {
                let cc = if mode == InferenceMode::Tta {
                    ConsensusConfig::tta()
                } else {
                    cfg.consensus.clone()
                };
                let r = infer_consensus(&model, &pixels, s, s, &cc)?;
                (r.mask, r.diagnostics)
            }
        };
        let mut luma = mask.to_luma();
        if (w0, h0) != (size, size) {
            luma = image::imageops::resize(&luma, w0, h0, image::imageops::FilterType::Nearest);
        }
        let name = stem(&p);
        luma.save(masks_dir.join(format!("{name}.png")))?;
        let line = DiagLine {
            file: &p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            inference: cfg.train.inference,
            diagnostics,
        };
        writeln!(diag, "{}", serde_json::to_string(&line)?)?;
        count += 1;
    }
    eprintln!("wrote {count} masks to {}", masks_dir.display());
    Ok(())
}
