//! Synthetic pseudo-modality shapes, augmentation with geometry recomputed
//! from the transformed mask, and image/mask folder ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskgeo::{extract_geometry, BinaryMask, GeometryDescriptor, ViewTransform};
use crate::semknow::{encode_report, read_embedding_shaped, MockEncoder, SemanticEmbedding, SemanticReport, D_TEXT, N_SEM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    None,
    Speckle,
    Stripes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSpec {
    pub name: String,
    pub base_intensity_fg: f64,
    pub base_intensity_bg: f64,
    pub noise_sigma: f64,
    pub texture: Texture,
    pub invert: bool,
}

impl StyleSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if !ok(self.base_intensity_fg) || !ok(self.base_intensity_bg) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("style `{}` has out-of-range intensities", self.name)));
        }
        Ok(())
    }

    pub fn bright_lesion() -> Self {
        Self {
            name: "bright-lesion".into(),
            base_intensity_fg: 0.8,
            base_intensity_bg: 0.3,
            noise_sigma: 0.05,
            texture: Texture::None,
            invert: false,
        }
    }

    pub fn dark_speckle() -> Self {
        Self {
            name: "dark-lesion-speckle".into(),
            base_intensity_fg: 0.25,
            base_intensity_bg: 0.6,
            noise_sigma: 0.05,
            texture: Texture::Speckle,
            invert: false,
        }
    }

    pub fn defaults() -> Vec<Self> {
        vec![Self::bright_lesion(), Self::dark_speckle()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Ellipse,
    Rectangle,
    Blob,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [Self::Ellipse, Self::Rectangle, Self::Blob];
}

/// Analytic shape in pixel-index coordinates.
#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Ellipse { cx: f64, cy: f64, a: f64, b: f64, theta: f64 },
    Rectangle { cx: f64, cy: f64, hw: f64, hh: f64, theta: f64 },
    Blob { cx: f64, cy: f64, r: f64, harmonics: Vec<(f64, f64)> },
}

impl Shape {
    pub fn class(&self) -> ShapeClass {
        match self {
            Shape::Ellipse { .. } => ShapeClass::Ellipse,
            Shape::Rectangle { .. } => ShapeClass::Rectangle,
            Shape::Blob { .. } => ShapeClass::Blob,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let local = |cx: f64, cy: f64, theta: f64| {
            let (dx, dy) = (x - cx, y - cy);
            let (s, c) = theta.sin_cos();
            (dx * c + dy * s, -dx * s + dy * c)
        };
        match *self {
            Shape::Ellipse { cx, cy, a, b, theta } => {
                let (u, v) = local(cx, cy, theta);
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Rectangle { cx, cy, hw, hh, theta } => {
                let (u, v) = local(cx, cy, theta);
                u.abs() <= hw && v.abs() <= hh
            }
            Shape::Blob {
                cx,
                cy,
                r,
                ref harmonics,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                let phi = dy.atan2(dx);
                let scale: f64 = 1.0
                    + harmonics
                        .iter()
                        .enumerate()
                        .map(|(k, &(amp, phase))| amp * ((k as f64 + 2.0) * phi + phase).cos())
                        .sum::<f64>();
                dx.hypot(dy) <= r * scale
            }
        }
    }

    pub fn rasterize(&self, size: usize) -> BinaryMask {
        BinaryMask::from_fn(size, size, |x, y| self.contains(x as f64, y as f64))
    }

    pub fn draw(class: ShapeClass, size: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = size as f64;
        let cx = rng.random_range(0.35..0.65) * s;
        let cy = rng.random_range(0.35..0.65) * s;
        let theta = rng.random_range(0.0..PI);
        match class {
            ShapeClass::Ellipse => {
                let a = rng.random_range(0.12..0.28) * s;
                let b = a * rng.random_range(0.35..1.0);
                Shape::Ellipse { cx, cy, a, b, theta }
            }
            ShapeClass::Rectangle => {
                let hw = rng.random_range(0.1..0.24) * s;
                let hh = hw * rng.random_range(0.4..1.0);
                Shape::Rectangle { cx, cy, hw, hh, theta }
            }
            ShapeClass::Blob => {
                let r = rng.random_range(0.12..0.22) * s;
                let harmonics = (0..3)
                    .map(|_| (rng.random_range(0.0..0.18), rng.random_range(0.0..2.0 * PI)))
                    .collect();
                Shape::Blob { cx, cy, r, harmonics }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in `[0,1]`.
    pub image: Vec<f64>,
    pub mask: BinaryMask,
    pub geometry: GeometryDescriptor,
    pub semantic: Arc<SemanticEmbedding>,
    /// False when no semantic target exists; the semantic loss is skipped.
    pub sem_enabled: bool,
    pub modality: usize,
    pub stem: String,
}

impl Sample {
    pub fn to_gray(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.image[y as usize * self.width + x as usize];
            image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }
}

/// Report text for a (shape, style) pair.
pub fn synthetic_report(class: ShapeClass, style: &StyleSpec) -> SemanticReport {
    let contrast = if style.base_intensity_fg > style.base_intensity_bg {
        "brighter than"
    } else {
        "darker than"
    };
    let (shape, margin, risk) = match class {
        ShapeClass::Ellipse => ("oval, smoothly curved", "smooth and well circumscribed", "low"),
        ShapeClass::Rectangle => ("angular with straight sides and corners", "straight and sharply defined", "intermediate"),
        ShapeClass::Blob => ("irregular and lobulated", "undulating and partly indistinct", "elevated"),
    };
    let texture = match style.texture {
        Texture::None => "homogeneous with fine noise",
        Texture::Speckle => "granular speckle throughout",
        Texture::Stripes => "banded with periodic stripes",
    };
    SemanticReport::from_fields([
        shape.to_string(),
        margin.to_string(),
        format!("{texture}, {contrast} the background"),
        "no invasion of the surrounding region".to_string(),
        format!("clear, the region is {contrast} its surroundings"),
        risk.to_string(),
        format!("a {} solid synthetic region", shape.split(',').next().unwrap_or(shape)),
        format!("the {} style separates it from background texture", style.name),
        format!("synthetic {:?} target", class).to_lowercase(),
    ])
}

/// Semantic targets for every (shape class, style) pair.
#[derive(Clone, Debug)]
pub struct SemanticBank {
    table: BTreeMap<(ShapeClass, usize), Arc<SemanticEmbedding>>,
}

impl SemanticBank {
    pub fn new(styles: &[StyleSpec]) -> Self {
        let enc = MockEncoder::default();
        let mut table = BTreeMap::new();
        for class in ShapeClass::ALL {
            for (i, st) in styles.iter().enumerate() {
                let e = encode_report(&synthetic_report(class, st), &enc).expect("mock encoder cannot fail");
                table.insert((class, i), Arc::new(e));
            }
        }
        Self { table }
    }

    pub fn get(&self, class: ShapeClass, style: usize) -> Arc<SemanticEmbedding> {
        self.table[&(class, style)].clone()
    }
}

fn render(mask: &BinaryMask, style: &StyleSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let noise = Normal::new(0.0, style.noise_sigma.max(0.0)).expect("sigma");
    let stripe_phase = rng.random_range(0.0..2.0 * PI);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let base = if mask.get(x, y) {
                style.base_intensity_fg
            } else {
                style.base_intensity_bg
            };
            let mut v = match style.texture {
                Texture::None => base,
                Texture::Speckle => base * rng.random_range(0.55..1.45),
                Texture::Stripes => base + 0.08 * (2.0 * PI * y as f64 / 8.0 + stripe_phase).sin(),
            };
            if style.noise_sigma > 0.0 {
                v += noise.sample(rng);
            }
            if style.invert {
                v = 1.0 - v;
            }
            out.push(v.clamp(0.0, 1.0));
        }
    }
    out
}

/// One sample from `seed` with a fixed style. The shape draw depends only
/// on the seed, so two styles with one seed share the same mask.
pub fn gen_sample(seed: u64, style: &StyleSpec, style_id: usize, size: usize, bank: &SemanticBank) -> Result<Sample> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::Config(format!("sample size {size} is not a positive multiple of 32")));
    }
    style.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class = ShapeClass::ALL[rng.random_range(0..3)];
    let shape = Shape::draw(class, size, &mut rng);
    let mask = shape.rasterize(size);
    let mut tex_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let image = render(&mask, style, &mut tex_rng);
    Ok(Sample {
        height: size,
        width: size,
        image,
        geometry: extract_geometry(&mask),
        mask,
        semantic: bank.get(class, style_id),
        sem_enabled: true,
        modality: style_id,
        stem: format!("s{seed:06}"),
    })
}

/// Style index for the `i`-th sample of a mixed dataset.
pub fn style_for(seed: u64, n_styles: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0x5bd1_e995);
    rng.random_range(0..n_styles)
}

/// `n` samples with seeds `base_seed + i`, styles drawn per sample.
pub fn gen_dataset(n: usize, base_seed: u64, size: usize, styles: &[StyleSpec]) -> Result<Vec<Sample>> {
    let bank = SemanticBank::new(styles);
    (0..n as u64)
        .map(|i| {
            let seed = base_seed.wrapping_add(i);
            let sid = style_for(seed, styles.len());
            gen_sample(seed, &styles[sid], sid, size, &bank)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub max_rotation_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            max_rotation_deg: 10.0,
            brightness: 0.1,
            contrast: 0.1,
            noise_sigma: 0.02,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            max_rotation_deg: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            noise_sigma: 0.0,
        }
    }

    pub fn spatial_only(&self) -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            noise_sigma: 0.0,
            ..self.clone()
        }
    }

    pub fn photometric_only(&self) -> Self {
        Self {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            max_rotation_deg: 0.0,
            ..self.clone()
        }
    }
}

fn finish(mut s: Sample) -> Sample {
    s.geometry = extract_geometry(&s.mask);
    s
}

pub fn flip_sample(s: &Sample, t: ViewTransform) -> Sample {
    finish(Sample {
        image: t.apply(&s.image, s.height, s.width),
        mask: s.mask.transformed(t),
        ..s.clone()
    })
}

/// Rotate about the image center: bilinear for the image (edge clamped),
/// nearest for the mask (outside is background).
pub fn rotate_sample(s: &Sample, degrees: f64) -> Sample {
    let (h, w) = (s.height, s.width);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut image = vec![0.0; h * w];
    let mut mask = BinaryMask::zeros(h, w);
    let at = |x: isize, y: isize| s.image[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    for y in 0..h {
        for x in 0..w {
            // Inverse map from the output pixel to the source.
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (xi, yi) = (x0 as isize, y0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * at(xi, yi) + fx * at(xi + 1, yi))
                + fy * ((1.0 - fx) * at(xi, yi + 1) + fx * at(xi + 1, yi + 1));
            image[y * w + x] = v;
            let (nx, ny) = (sx.round(), sy.round());
            if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                mask.set(x, y, s.mask.get(nx as usize, ny as usize));
            }
        }
    }
    finish(Sample {
        image,
        mask,
        ..s.clone()
    })
}

/// Brightness shift, contrast scale about the mean, additive noise; the
/// mask and geometry are untouched.
pub fn photometric(s: &Sample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Sample {
    let shift = if cfg.brightness > 0.0 {
        rng.random_range(-cfg.brightness..=cfg.brightness)
    } else {
        0.0
    };
    let gain = if cfg.contrast > 0.0 {
        1.0 + rng.random_range(-cfg.contrast..=cfg.contrast)
    } else {
        1.0
    };
    let mean = s.image.iter().sum::<f64>() / s.image.len() as f64;
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("sigma");
    let image = s
        .image
        .iter()
        .map(|&v| {
            let mut v = (v - mean) * gain + mean + shift;
            if cfg.noise_sigma > 0.0 {
                v += noise.sample(rng);
            }
            v.clamp(0.0, 1.0)
        })
        .collect();
    Sample { image, ..s.clone() }
}

pub fn augment(s: &Sample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Sample {
    let h = rng.random_bool(cfg.hflip_prob.clamp(0.0, 1.0));
    let v = rng.random_bool(cfg.vflip_prob.clamp(0.0, 1.0));
    let t = match (h, v) {
        (false, false) => ViewTransform::Identity,
        (true, false) => ViewTransform::HFlip,
        (false, true) => ViewTransform::VFlip,
        (true, true) => ViewTransform::HvFlip,
    };
    let mut out = if t == ViewTransform::Identity {
        s.clone()
    } else {
        flip_sample(s, t)
    };
    if cfg.max_rotation_deg > 0.0 {
        let deg = rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
        out = rotate_sample(&out, deg);
    }
    if cfg.brightness > 0.0 || cfg.contrast > 0.0 || cfg.noise_sigma > 0.0 {
        out = photometric(&out, cfg, rng);
    }
    out
}

/// Random-access sample source.
pub trait Dataset {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<Sample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

impl Dataset for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn get(&self, index: usize) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stem: String,
    pub modality_id: usize,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::SchemaViolation(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

const IMAGE_EXTS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

fn stems_in(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        if path.is_file() && exts.contains(&ext.as_str()) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Lazily loaded image/mask pairs matched by file stem.
#[derive(Clone, Debug)]
pub struct FolderDataset {
    pub entries: Vec<FolderEntry>,
    /// Resize on load to this square side when set.
    pub size: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct FolderEntry {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub embedding: Option<PathBuf>,
    pub modality: usize,
}

/// Pairs every image with the mask of the same stem. With a manifest,
/// only listed stems are used and each must exist.
pub fn load_folder_dataset(
    images_dir: &Path,
    masks_dir: &Path,
    embeddings_dir: Option<&Path>,
    manifest: Option<&[ManifestEntry]>,
    size: Option<usize>,
) -> Result<FolderDataset> {
    let images = stems_in(images_dir, &IMAGE_EXTS)?;
    let masks = stems_in(masks_dir, &IMAGE_EXTS)?;
    let embeds = match embeddings_dir {
        Some(d) => Some(stems_in(d, &["c2pe"])?),
        None => None,
    };
    let wanted: Vec<(String, usize)> = match manifest {
        Some(m) => m.iter().map(|e| (e.stem.clone(), e.modality_id)).collect(),
        None => {
            let all: BTreeSet<&String> = images.keys().chain(masks.keys()).collect();
            all.into_iter().map(|s| (s.clone(), 0)).collect()
        }
    };
    let mut missing = Vec::new();
    let mut entries = Vec::new();
    for (stem, modality) in wanted {
        let (img, msk) = (images.get(&stem), masks.get(&stem));
        let emb = embeds.as_ref().map(|e| e.get(&stem));
        match (img, msk, emb) {
            (Some(i), Some(m), None) => entries.push(FolderEntry {
                stem,
                image: i.clone(),
                mask: m.clone(),
                embedding: None,
                modality,
            }),
            (Some(i), Some(m), Some(Some(e))) => entries.push(FolderEntry {
                stem,
                image: i.clone(),
                mask: m.clone(),
                embedding: Some(e.clone()),
                modality,
            }),
            (i, m, e) => {
                let mut what = Vec::new();
                if i.is_none() {
                    what.push("image");
                }
                if m.is_none() {
                    what.push("mask");
                }
                if matches!(e, Some(None)) {
                    what.push("embedding");
                }
                missing.push(format!("{stem} (no {})", what.join("/")));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingPair(missing));
    }
    Ok(FolderDataset { entries, size })
}

impl Dataset for FolderDataset {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        let e = &self.entries[index];
        let mut img = image::open(&e.image)?.to_luma8();
        let mut msk = image::open(&e.mask)?.to_luma8();
        if let Some(s) = self.size {
            let s = s as u32;
            if img.dimensions() != (s, s) {
                img = image::imageops::resize(&img, s, s, image::imageops::FilterType::Triangle);
            }
            if msk.dimensions() != (s, s) {
                msk = image::imageops::resize(&msk, s, s, image::imageops::FilterType::Nearest);
            }
        }
        if img.dimensions() != msk.dimensions() {
            return Err(Error::ShapeMismatch(format!(
                "{}: image {:?} vs mask {:?}",
                e.stem,
                img.dimensions(),
                msk.dimensions()
            )));
        }
        let mask = BinaryMask::from_luma(&msk);
        let (semantic, sem_enabled) = match &e.embedding {
            Some(p) => (read_embedding_shaped(p, N_SEM, D_TEXT)?, true),
            None => (SemanticEmbedding::zeros(N_SEM, D_TEXT), false),
        };
        Ok(Sample {
            height: mask.height(),
            width: mask.width(),
            image: img.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
            geometry: extract_geometry(&mask),
            mask,
            semantic: Arc::new(semantic),
            sem_enabled,
            modality: e.modality,
            stem: e.stem.clone(),
        })
    }
}
