//! Optimization loop, Dice metric, evaluation under the three inference
//! modes, metrics log and checkpoints.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::{consensus_with, ConsensusConfig, ViewOutput};
use crate::dynhead::{argmax_mask, PredictionPair};
use crate::error::{Error, Result};
use crate::losses::{geo_loss, seg_loss, sem_loss, total_loss, LossWeights};
use crate::maskgeo::{BinaryMask, ViewTransform};
use crate::model::{Model, Prediction};
use crate::nn::{Adam, AdamConfig, Session};
use crate::semknow::stable_hash;
use crate::synthdata::{augment, AugmentConfig, Dataset, Sample};
use crate::tensor::Tensor;
use crate::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    None,
    Tta,
    GeometryAware,
}

impl InferenceMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Tta => "tta",
            Self::GeometryAware => "geometry_aware",
        }
    }
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "tta" => Ok(Self::Tta),
            "geometry_aware" | "geometry-aware" => Ok(Self::GeometryAware),
            other => Err(Error::Config(format!(
                "unknown inference mode `{other}` (expected none, tta or geometry_aware)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Caps the number of optimizer steps; the cosine schedule spans this
    /// many steps when set.
    pub max_steps: Option<u64>,
    /// Inference mode used for per-epoch validation.
    pub inference: InferenceMode,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 1e-4,
            seed: 0,
            max_steps: None,
            inference: InferenceMode::GeometryAware,
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("train.lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        self.loss.validate()
    }

    pub fn total_steps(&self, train_len: usize) -> u64 {
        let per_epoch = train_len.div_ceil(self.batch_size) as u64;
        let full = per_epoch * self.epochs as u64;
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// `base · ½(1 + cos(π·step/total))`; zero at `step = total`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    base * 0.5 * (1.0 + (PI * t).cos())
}

/// `2|P∩G| / (|P|+|G|)`, with 1 when both masks are empty.
pub fn dice_metric(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::ShapeMismatch(format!(
            "dice on {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let inter = pred.values().iter().zip(gt.values()).filter(|(a, b)| **a != 0 && **b != 0).count();
    let total = pred.count() + gt.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub seg: f64,
    pub geo: f64,
    pub sem: f64,
}

impl LossComponents {
    fn add(&mut self, o: &Self) {
        self.total += o.total;
        self.seg += o.seg;
        self.geo += o.geo;
        self.sem += o.sem;
    }

    fn scaled(mut self, k: f64) -> Self {
        self.total *= k;
        self.seg *= k;
        self.geo *= k;
        self.sem *= k;
        self
    }
}

/// Recorded loss graph for one sample.
pub struct SampleLoss {
    pub total: Var,
    pub parts: LossComponents,
    pub pred: PredictionPair,
    pub geo: Option<Var>,
}

/// Forward plus all loss terms. Geometry and semantic terms are exactly
/// zero when their tokens are disabled; the semantic term is also zero for
/// samples without a semantic target.
pub fn sample_loss(model: &Model, s: &mut Session, sample: &Sample, weights: &LossWeights) -> Result<SampleLoss> {
    let x = s.input(model.image_tensor(&sample.image, sample.height, sample.width)?);
    let out = model.forward(s, x)?;
    let seg = seg_loss(&mut s.g, out.pred, &sample.mask);
    let geo = match out.geo {
        Some(g) => geo_loss(&mut s.g, g, &sample.geometry.to_vec()),
        None => s.g.constant(Tensor::scalar(0.0)),
    };
    let sem = match out.sem {
        Some(p) if sample.sem_enabled => {
            let e = &sample.semantic;
            let want = s.g.shape(p).to_vec();
            if want != [e.rows(), e.cols()] {
                return Err(Error::ShapeMismatch(format!(
                    "semantic target {}x{} for projection {want:?} ({})",
                    e.rows(),
                    e.cols(),
                    sample.stem
                )));
            }
            sem_loss(&mut s.g, p, &Tensor::new(&want, e.to_f64()))
        }
        _ => s.g.constant(Tensor::scalar(0.0)),
    };
    let total = total_loss(&mut s.g, seg, geo, sem, weights);
    let v = |s: &Session, v: Var| s.value(v).item();
    let parts = LossComponents {
        total: v(s, total),
        seg: v(s, seg),
        geo: v(s, geo),
        sem: v(s, sem),
    };
    Ok(SampleLoss {
        total,
        parts,
        pred: out.pred,
        geo: out.geo,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossComponents,
    pub dice: f64,
    pub lr: f64,
}

/// One optimizer update on the batch-mean loss.
pub fn train_step(model: &mut Model, adam: &mut Adam, batch: &[Sample], weights: &LossWeights, lr: f64) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut acc: Vec<Option<Tensor>> = vec![None; model.params.len()];
    let mut losses = LossComponents::default();
    let mut dice = 0.0;
    let step = adam.step + 1;
    for sample in batch {
        let mut s = Session::train(&model.params);
        let sl = sample_loss(model, &mut s, sample, weights)?;
        if !sl.parts.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!(
                    "sample {}: seg {} geo {} sem {}",
                    sample.stem, sl.parts.seg, sl.parts.geo, sl.parts.sem
                ),
            });
        }
        let pred = BinaryMask::new(
            sample.height,
            sample.width,
            argmax_mask(s.value(sl.pred.fg).data(), s.value(sl.pred.bg).data()),
        )?;
        dice += dice_metric(&pred, &sample.mask)?;
        losses.add(&sl.parts);
        let grads = s.g.backward(sl.total);
        for (id, g) in s.param_grads(&grads) {
            match &mut acc[id.index()] {
                Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
    }
    let k = 1.0 / batch.len() as f64;
    let grads: Vec<_> = model
        .params
        .ids()
        .zip(acc)
        .filter_map(|(id, g)| g.map(|g| (id, g.map(|v| v * k))))
        .collect();
    if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("non-finite gradient for {}", model.params.name(*id)),
        });
    }
    adam.update(&mut model.params, &grads, lr);
    Ok(StepReport {
        losses: losses.scaled(k),
        dice: dice * k,
        lr,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub epoch: usize,
    pub split: String,
    pub dice: f64,
    pub l_seg: f64,
    pub l_geo: f64,
    pub l_sem: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference: Option<InferenceMode>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_modality: BTreeMap<usize, f64>,
    #[serde(default)]
    pub n: usize,
    #[serde(default)]
    pub steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Inference for one image in the given mode.
pub fn predict_mask(
    model: &Model,
    image: &[f64],
    height: usize,
    width: usize,
    mode: InferenceMode,
    consensus: &ConsensusConfig,
) -> Result<BinaryMask> {
    match mode {
        InferenceMode::None => Ok(model.predict(image, height, width)?.mask()),
        InferenceMode::Tta => Ok(consensus_with(image, height, width, &ConsensusConfig::tta(), |_, v| {
            Ok(ViewOutput::from(&model.predict(v, height, width)?))
        })?
        .mask),
        InferenceMode::GeometryAware => {
            Ok(crate::consensus::infer_consensus(model, image, height, width, consensus)?.mask)
        }
    }
}

/// Validation metrics. Losses come from the untransformed view.
pub fn evaluate(
    model: &Model,
    data: &dyn Dataset,
    mode: InferenceMode,
    consensus: &ConsensusConfig,
    weights: &LossWeights,
) -> Result<MetricReport> {
    let cc = match mode {
        InferenceMode::Tta => ConsensusConfig::tta(),
        _ => consensus.clone(),
    };
    let mut losses = LossComponents::default();
    let mut dice_sum = 0.0;
    let mut per_mod: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for i in 0..data.len() {
        let sample = data.get(i)?;
        let (h, w) = (sample.height, sample.width);
        let identity = |img: &[f64]| -> Result<(Prediction, LossComponents)> {
            let mut s = Session::eval(&model.params);
            let probe = Sample {
                image: img.to_vec(),
                ..sample.clone()
            };
            let sl = sample_loss(model, &mut s, &probe, weights)?;
            let geo = sl.geo.map(|g| {
                let v = s.value(g).data();
                std::array::from_fn(|k| v[k])
            });
            let p = Prediction {
                height: h,
                width: w,
                p_fg: s.value(sl.pred.fg).data().to_vec(),
                p_bg: s.value(sl.pred.bg).data().to_vec(),
                geo,
            };
            Ok((p, sl.parts))
        };
        let mask = match mode {
            InferenceMode::None => {
                let (p, l) = identity(&sample.image)?;
                losses.add(&l);
                p.mask()
            }
            _ => {
                let r = consensus_with(&sample.image, h, w, &cc, |t, img| {
                    if t == ViewTransform::Identity {
                        let (p, l) = identity(img)?;
                        losses.add(&l);
                        Ok(ViewOutput::from(&p))
                    } else {
                        Ok(ViewOutput::from(&model.predict(img, h, w)?))
                    }
                })?;
                r.mask
            }
        };
        let d = dice_metric(&mask, &sample.mask)?;
        dice_sum += d;
        let e = per_mod.entry(sample.modality).or_default();
        e.0 += d;
        e.1 += 1;
    }
    let n = data.len();
    let k = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let l = losses.scaled(k);
    Ok(MetricReport {
        epoch: 0,
        split: "val".into(),
        dice: if n == 0 { 0.0 } else { dice_sum * k },
        l_seg: l.seg,
        l_geo: l.geo,
        l_sem: l.sem,
        inference: Some(mode),
        per_modality: per_mod.into_iter().map(|(m, (s, c))| (m, s / c as f64)).collect(),
        n,
        steps: 0,
        label: None,
    })
}

pub fn append_metrics(path: &Path, report: &MetricReport) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(report)?)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricReport>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::SchemaViolation(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub history: Vec<MetricReport>,
    pub best_val_dice: f64,
    pub best_epoch: usize,
    pub steps: u64,
    pub best_checkpoint: Option<PathBuf>,
}

/// Where `fit` writes its artifacts.
#[derive(Clone, Debug)]
pub struct FitOutput {
    pub dir: PathBuf,
}

impl FitOutput {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best.c2pc")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.c2pc")
    }
}

fn mix(parts: &[u64]) -> u64 {
    let bytes: Vec<u8> = parts.iter().flat_map(|p| p.to_le_bytes()).collect();
    stable_hash(&bytes)
}

/// Train with per-epoch validation. Epoch 0 is the untrained model.
pub fn fit(
    model: &mut Model,
    train: &dyn Dataset,
    val: &dyn Dataset,
    cfg: &TrainConfig,
    consensus: &ConsensusConfig,
    out: Option<&FitOutput>,
    mut progress: impl FnMut(&MetricReport),
) -> Result<FitReport> {
    cfg.validate()?;
    consensus.validate()?;
    if let Some(o) = out {
        std::fs::create_dir_all(&o.dir)?;
    }
    let total = cfg.total_steps(train.len());
    let mut adam = Adam::new(&model.params, cfg.adam);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let mut record = |model: &Model, r: MetricReport, history: &mut Vec<MetricReport>, best: &mut Option<(f64, usize)>| -> Result<()> {
        if let Some(o) = out {
            append_metrics(&o.metrics(), &r)?;
        }
        if r.split == "val" && best.is_none_or(|(d, _)| r.dice > d) {
            *best = Some((r.dice, r.epoch));
            if let Some(o) = out {
                model.save(&o.best())?;
            }
        }
        progress(&r);
        history.push(r);
        Ok(())
    };

    let val_report = |model: &Model, epoch: usize, steps: u64| -> Result<MetricReport> {
        let mut r = evaluate(model, val, cfg.inference, consensus, &cfg.loss)?;
        r.epoch = epoch;
        r.steps = steps;
        Ok(r)
    };
    let r0 = val_report(model, 0, 0)?;
    record(model, r0, &mut history, &mut best)?;

    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        if step >= total {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, epoch as u64, 1]));
        order.shuffle(&mut rng);
        let (mut sum, mut dice, mut batches) = (LossComponents::default(), 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            let batch = chunk
                .iter()
                .map(|&i| {
                    let s = train.get(i)?;
                    let mut arng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, epoch as u64, i as u64, 2]));
                    Ok(augment(&s, &cfg.augment, &mut arng))
                })
                .collect::<Result<Vec<_>>>()?;
            let lr = cosine_lr(cfg.lr, step, total);
            let rep = train_step(model, &mut adam, &batch, &cfg.loss, lr)?;
            step += 1;
            sum.add(&rep.losses);
            dice += rep.dice;
            batches += 1;
        }
        let k = 1.0 / batches.max(1) as f64;
        let l = sum.scaled(k);
        let tr = MetricReport {
            epoch,
            split: "train".into(),
            dice: dice * k,
            l_seg: l.seg,
            l_geo: l.geo,
            l_sem: l.sem,
            inference: None,
            per_modality: BTreeMap::new(),
            n: train.len(),
            steps: step,
            label: None,
        };
        record(model, tr, &mut history, &mut best)?;
        let vr = val_report(model, epoch, step)?;
        record(model, vr, &mut history, &mut best)?;
    }
    if let Some(o) = out {
        model.save(&o.last())?;
    }
    let (best_val_dice, best_epoch) = best.unwrap_or((0.0, 0));
    Ok(FitReport {
        history,
        best_val_dice,
        best_epoch,
        steps: step,
        best_checkpoint: out.map(|o| o.best()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::ConceptConfig;
    use crate::dynhead::DynHeadConfig;
    use crate::encdec::EncoderConfig;
    use crate::model::{Ablation, ModelConfig};
    use crate::synthdata::{gen_dataset, StyleSpec};

    pub(crate) fn tiny(ablation: Ablation) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                input_size: 32,
                in_channels: 1,
                stage_channels: [4, 8, 8, 16, 16],
                token_dim: 16,
                decoder_channels: 8,
            },
            concepts: ConceptConfig {
                layers: 1,
                heads: 2,
                ffn_mult: 2,
                text_dim: 768,
            },
            head: DynHeadConfig::default(),
            ablation,
        }
    }

    fn mask(f: impl Fn(usize, usize) -> bool) -> BinaryMask {
        BinaryMask::from_fn(8, 8, f)
    }

    #[test]
    fn dice_examples() {
        let g = mask(|x, _| x < 4);
        assert_eq!(dice_metric(&g, &g).unwrap(), 1.0);
        assert_eq!(dice_metric(&mask(|x, _| x >= 4), &g).unwrap(), 0.0);
        assert!((dice_metric(&mask(|x, _| x < 2), &g).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice_metric(&mask(|_, _| false), &mask(|_, _| false)).unwrap(), 1.0);
        assert!(dice_metric(&g, &BinaryMask::zeros(4, 4)).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-20);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("geometry_aware".parse::<InferenceMode>().unwrap(), InferenceMode::GeometryAware);
        assert!("median".parse::<InferenceMode>().is_err());
    }

    fn data(n: usize, seed: u64) -> Vec<Sample> {
        gen_dataset(n, seed, 32, &StyleSpec::defaults()).unwrap()
    }

    #[test]
    fn identical_steps_are_deterministic() {
        let batch = data(2, 0);
        let run = || {
            let mut m = Model::new(&tiny(Ablation::default()), 3).unwrap();
            let mut adam = Adam::new(&m.params, AdamConfig::default());
            let r = train_step(&mut m, &mut adam, &batch, &LossWeights::default(), 1e-3).unwrap();
            (r, m.params.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn disabled_families_report_zero_loss() {
        let batch = data(2, 1);
        for (ab, geo_zero, sem_zero) in [
            (Ablation { use_geo_tokens: false, ..Default::default() }, true, false),
            (Ablation { use_sem_tokens: false, ..Default::default() }, false, true),
            (Ablation::baseline(), true, true),
        ] {
            let mut m = Model::new(&tiny(ab), 0).unwrap();
            let mut adam = Adam::new(&m.params, AdamConfig::default());
            let r = train_step(&mut m, &mut adam, &batch, &LossWeights::default(), 1e-3).unwrap();
            assert_eq!(r.losses.geo == 0.0, geo_zero, "{ab:?}");
            assert_eq!(r.losses.sem == 0.0, sem_zero, "{ab:?}");
            assert!(r.losses.seg > 0.0);
        }
    }

    #[test]
    fn sem_disabled_samples_skip_the_semantic_term() {
        let mut batch = data(1, 2);
        batch[0].sem_enabled = false;
        let mut m = Model::new(&tiny(Ablation::default()), 0).unwrap();
        let mut adam = Adam::new(&m.params, AdamConfig::default());
        let r = train_step(&mut m, &mut adam, &batch, &LossWeights::default(), 1e-3).unwrap();
        assert_eq!(r.losses.sem, 0.0);
    }

    #[test]
    fn non_finite_input_aborts() {
        let mut batch = data(1, 3);
        batch[0].image[5] = f64::NAN;
        let mut m = Model::new(&tiny(Ablation::default()), 0).unwrap();
        let mut adam = Adam::new(&m.params, AdamConfig::default());
        match train_step(&mut m, &mut adam, &batch, &LossWeights::default(), 1e-3) {
            Err(Error::NonFiniteLoss { step: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_epochs_report_the_initial_model() {
        let (tr, va) = (data(4, 10), data(3, 20));
        let mut m = Model::new(&tiny(Ablation::default()), 0).unwrap();
        let before = m.params.clone();
        let cfg = TrainConfig {
            epochs: 0,
            inference: InferenceMode::None,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = FitOutput { dir: dir.path().join("run") };
        let r = fit(&mut m, &tr, &va, &cfg, &ConsensusConfig::default(), Some(&out), |_| {}).unwrap();
        assert_eq!(r.history.len(), 1);
        assert_eq!(r.steps, 0);
        assert_eq!(m.params.iter().count(), before.iter().count());
        assert!(m.params.iter().zip(before.iter()).all(|(a, b)| a == b));
        let logged = read_metrics(&out.metrics()).unwrap();
        assert_eq!(logged, r.history);
        assert!(out.best().exists() && out.last().exists());
    }

    #[test]
    fn fit_logs_every_epoch_and_is_deterministic() {
        let (tr, va) = (data(6, 30), data(2, 40));
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            lr: 1e-3,
            inference: InferenceMode::None,
            ..Default::default()
        };
        let run = || {
            let mut m = Model::new(&tiny(Ablation::default()), 1).unwrap();
            let r = fit(&mut m, &tr, &va, &cfg, &ConsensusConfig::default(), None, |_| {}).unwrap();
            (r, m.predict(&va[0].image, 32, 32).unwrap())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(a.steps, 4);
        let splits: Vec<_> = a.history.iter().map(|r| (r.epoch, r.split.as_str())).collect();
        assert_eq!(splits, [(0, "val"), (1, "train"), (1, "val"), (2, "train"), (2, "val")]);
        assert!(a.history.iter().all(|r| (0.0..=1.0).contains(&r.dice)));
    }

    #[test]
    fn tta_equals_geometry_aware_at_zero_lambda() {
        let va = data(3, 50);
        let m = Model::new(&tiny(Ablation::default()), 4).unwrap();
        let zero = ConsensusConfig {
            lambda: 0.0,
            suppression: false,
            ..Default::default()
        };
        let w = LossWeights::default();
        let a = evaluate(&m, &va, InferenceMode::Tta, &zero, &w).unwrap();
        let b = evaluate(&m, &va, InferenceMode::GeometryAware, &zero, &w).unwrap();
        assert_eq!(a.dice, b.dice);
        let c = evaluate(&m, &va, InferenceMode::None, &zero, &w).unwrap();
        assert_eq!((a.l_seg, a.l_geo, a.l_sem), (c.l_seg, c.l_geo, c.l_sem));
        for r in [a, b, c] {
            assert!((0.0..=1.0).contains(&r.dice));
        }
    }

    #[test]
    fn overfit_loss_trends_down() {
        let batch = data(2, 60);
        let mut m = Model::new(&tiny(Ablation::default()), 0).unwrap();
        let mut adam = Adam::new(&m.params, AdamConfig::default());
        let losses: Vec<f64> = (0..100)
            .map(|_| train_step(&mut m, &mut adam, &batch, &LossWeights::default(), 1e-3).unwrap().losses.total)
            .collect();
        let ma: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
        for pair in ma.windows(2) {
            assert!(pair[1] < pair[0], "moving average rose: {ma:?}");
        }
    }
}
