//! Multi-view inference: flip views, score each by agreement between the
//! regressed and mask-derived area/centroid, drop contradictory views and
//! average the rest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskgeo::{extract_geometry, map_centroid_on_grid, BinaryMask, ViewTransform};
use crate::model::{Model, Prediction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusConfig {
    pub lambda: f64,
    pub fp_area_eps: f64,
    pub binarize_threshold: f64,
    pub suppression: bool,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            fp_area_eps: 1e-3,
            binarize_threshold: 0.5,
            suppression: true,
        }
    }
}

impl ConsensusConfig {
    /// Plain averaging of the four views.
    pub fn tta() -> Self {
        Self {
            lambda: 0.0,
            suppression: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("consensus.lambda must be >= 0, got {}", self.lambda)));
        }
        for (k, v) in [("fp_area_eps", self.fp_area_eps), ("binarize_threshold", self.binarize_threshold)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("consensus.{k} must be in (0,1), got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPrediction {
    pub transform: ViewTransform,
    /// Foreground probability in the original frame.
    pub mask: Vec<f64>,
    /// Regressed area and centroid in the original frame; absent when the
    /// model has no geometry tokens.
    pub a_reg: Option<f64>,
    pub c_reg: Option<[f64; 2]>,
    pub a_px: f64,
    pub c_px: [f64; 2],
}

/// `exp(-lambda * (10 |a_reg - a_px| + ||c_reg - c_px||))`.
pub fn view_weight(a_reg: f64, a_px: f64, c_reg: [f64; 2], c_px: [f64; 2], lambda: f64) -> f64 {
    let dc = (c_reg[0] - c_px[0]).hypot(c_reg[1] - c_px[1]);
    (-lambda * (10.0 * (a_reg - a_px).abs() + dc)).exp()
}

/// True when the regressed area says "nothing there" but the mask clearly
/// has foreground.
pub fn is_false_positive(a_reg: f64, a_px: f64, fp_area_eps: f64) -> bool {
    a_reg < fp_area_eps && a_px > 10.0 * fp_area_eps
}

/// Weight after suppression; views without regressed geometry get 1.
pub fn scored_weight(vp: &ViewPrediction, cfg: &ConsensusConfig) -> f64 {
    match (vp.a_reg, vp.c_reg) {
        (Some(a), Some(c)) => {
            if cfg.suppression && is_false_positive(a, vp.a_px, cfg.fp_area_eps) {
                0.0
            } else {
                view_weight(a, vp.a_px, c, vp.c_px, cfg.lambda)
            }
        }
        _ => 1.0,
    }
}

/// Per-pixel weighted mean; all-zero weights fall back to the plain mean.
pub fn aggregate_views(masks: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    let first = masks.first().ok_or(Error::EmptyViews)?;
    if weights.len() != masks.len() {
        return Err(Error::ShapeMismatch(format!("{} masks but {} weights", masks.len(), weights.len())));
    }
    if let Some(m) = masks.iter().find(|m| m.len() != first.len()) {
        return Err(Error::ShapeMismatch(format!("view sizes {} and {}", first.len(), m.len())));
    }
    let total: f64 = weights.iter().sum();
    let uniform = vec![1.0; masks.len()];
    let (w, total) = if total > 0.0 {
        (weights, total)
    } else {
        (uniform.as_slice(), masks.len() as f64)
    };
    let mut out = vec![0.0; first.len()];
    for (m, &wi) in masks.iter().zip(w) {
        if wi == 0.0 {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(m) {
            *o += wi * v;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(out)
}

/// The four flip views of a row-major image. Each flip is its own inverse.
pub fn make_views(image: &[f64], height: usize, width: usize) -> Vec<(ViewTransform, Vec<f64>)> {
    ViewTransform::ALL
        .iter()
        .map(|&t| (t, t.apply(image, height, width)))
        .collect()
}

/// Foreground probability normalized against the background channel, so
/// thresholding at 0.5 agrees with the fg > bg decision.
pub fn foreground_probability(p: &Prediction) -> Vec<f64> {
    p.p_fg
        .iter()
        .zip(&p.p_bg)
        .map(|(&f, &b)| if f + b > 0.0 { f / (f + b) } else { 0.5 })
        .collect()
}

/// Raw output of one view in that view's frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewOutput {
    pub mask: Vec<f64>,
    pub area: Option<f64>,
    pub centroid: Option<[f64; 2]>,
}

impl From<&Prediction> for ViewOutput {
    fn from(p: &Prediction) -> Self {
        Self {
            mask: foreground_probability(p),
            area: p.geo.map(|g| g[0]),
            centroid: p.geo.map(|g| [g[1], g[2]]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewDiagnostics {
    pub transform: String,
    pub w: f64,
    pub a_reg: Option<f64>,
    pub a_px: f64,
    pub c_reg: Option<[f64; 2]>,
    pub c_px: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub views: Vec<ViewDiagnostics>,
    pub final_area: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusResult {
    pub probability: Vec<f64>,
    pub mask: BinaryMask,
    pub views: Vec<ViewPrediction>,
    pub weights: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// Maps one view's output back to the original frame and measures its mask.
pub fn to_original_frame(t: ViewTransform, out: &ViewOutput, height: usize, width: usize, threshold: f64) -> Result<ViewPrediction> {
    if out.mask.len() != height * width {
        return Err(Error::ShapeMismatch(format!(
            "view mask has {} values, expected {height}x{width}",
            out.mask.len()
        )));
    }
    let mask = t.apply(&out.mask, height, width);
    let bin = BinaryMask::from_probs(height, width, &mask, threshold);
    let g = extract_geometry(&bin);
    let c_reg = out.centroid.map(|c| {
        let m = map_centroid_on_grid((c[0], c[1]), t, width, height);
        [m.0, m.1]
    });
    Ok(ViewPrediction {
        transform: t,
        mask,
        a_reg: out.area,
        c_reg,
        a_px: g.area,
        c_px: g.centroid,
    })
}

/// Consensus over the four flip views with any per-view predictor.
pub fn consensus_with(
    image: &[f64],
    height: usize,
    width: usize,
    cfg: &ConsensusConfig,
    mut predict: impl FnMut(ViewTransform, &[f64]) -> Result<ViewOutput>,
) -> Result<ConsensusResult> {
    cfg.validate()?;
    let mut views = Vec::with_capacity(4);
    for (t, img) in make_views(image, height, width) {
        let out = predict(t, &img)?;
        views.push(to_original_frame(t, &out, height, width, cfg.binarize_threshold)?);
    }
    let weights: Vec<f64> = views.iter().map(|v| scored_weight(v, cfg)).collect();
    let masks: Vec<Vec<f64>> = views.iter().map(|v| v.mask.clone()).collect();
    let probability = aggregate_views(&masks, &weights)?;
    let mask = BinaryMask::from_probs(height, width, &probability, cfg.binarize_threshold);
    let diagnostics = Diagnostics {
        views: views
            .iter()
            .zip(&weights)
            .map(|(v, &w)| ViewDiagnostics {
                transform: v.transform.name().to_string(),
                w,
                a_reg: v.a_reg,
                a_px: v.a_px,
                c_reg: v.c_reg,
                c_px: v.c_px,
            })
            .collect(),
        final_area: mask.count() as f64 / (height * width) as f64,
    };
    Ok(ConsensusResult {
        probability,
        mask,
        views,
        weights,
        diagnostics,
    })
}

pub fn infer_consensus(model: &Model, image: &[f64], height: usize, width: usize, cfg: &ConsensusConfig) -> Result<ConsensusResult> {
    consensus_with(image, height, width, cfg, |_, img| {
        Ok(ViewOutput::from(&model.predict(img, height, width)?))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskgeo::map_centroid_between_views;
    use proptest::prelude::*;

    #[test]
    fn weight_examples() {
        assert_eq!(view_weight(0.3, 0.3, [0.4, 0.6], [0.4, 0.6], 5.0), 1.0);
        assert_eq!(view_weight(0.9, 0.1, [0.0, 0.0], [1.0, 1.0], 0.0), 1.0);
        let w = view_weight(0.25, 0.2, [0.5, 0.5], [0.5, 0.6], 1.0);
        assert!((w - (-0.6f64).exp()).abs() < 1e-12, "{w}");
        assert!((w - 0.54881).abs() < 1e-5);
    }

    #[test]
    fn area_term_is_ten_times_the_centroid_term() {
        for lambda in [0.5, 1.0, 5.0] {
            for delta in [0.01, 0.05, 0.1] {
                let area_only = view_weight(0.2 + delta, 0.2, [0.5, 0.5], [0.5, 0.5], lambda);
                let cent_only = view_weight(0.2, 0.2, [0.5 + delta, 0.5], [0.5, 0.5], lambda);
                let want = (-9.0 * lambda * delta).exp();
                assert!((area_only / cent_only - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weight_is_strictly_decreasing_on_a_grid() {
        for lambda in [0.1, 1.0, 5.0] {
            let steps: Vec<f64> = (0..=10).map(|i| i as f64 * 0.05).collect();
            for pair in steps.windows(2) {
                let a = |d: f64| view_weight(0.2 + d, 0.2, [0.5, 0.5], [0.5, 0.5], lambda);
                let c = |d: f64| view_weight(0.2, 0.2, [0.5, 0.5 + d], [0.5, 0.5], lambda);
                assert!(a(pair[1]) < a(pair[0]));
                assert!(c(pair[1]) < c(pair[0]));
            }
        }
    }

    #[test]
    fn suppression_rule() {
        assert!(is_false_positive(0.0001, 0.2, 1e-3));
        assert!(!is_false_positive(0.0001, 0.0002, 1e-3));
        assert!(!is_false_positive(0.3, 0.3, 1e-3));
        let vp = ViewPrediction {
            transform: ViewTransform::Identity,
            mask: vec![],
            a_reg: Some(0.0001),
            c_reg: Some([0.5, 0.5]),
            a_px: 0.2,
            c_px: [0.5, 0.5],
        };
        assert_eq!(scored_weight(&vp, &ConsensusConfig::default()), 0.0);
        assert!(scored_weight(&vp, &ConsensusConfig::tta()) == 1.0);
    }

    #[test]
    fn aggregation_examples() {
        let zeros = vec![0.0; 4];
        let ones = vec![1.0; 4];
        let out = aggregate_views(&[zeros.clone(), ones.clone()], &[1.0, 3.0]).unwrap();
        assert!(out.iter().all(|&v| v == 0.75));
        let out = aggregate_views(&[zeros.clone(), ones.clone()], &[0.0, 2.0]).unwrap();
        assert!(out.iter().all(|&v| v == 1.0));
        let out = aggregate_views(&[zeros, ones], &[0.0, 0.0]).unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
        assert!(matches!(aggregate_views(&[], &[]), Err(Error::EmptyViews)));
    }

    #[test]
    fn views_invert_and_centroids_round_trip() {
        let mask = BinaryMask::from_fn(8, 8, |x, y| x < 3 && y > 4);
        for t in ViewTransform::ALL {
            assert_eq!(mask.transformed(t).transformed(t), mask);
            let c = map_centroid_between_views(map_centroid_between_views((0.2, 0.3), t), t);
            assert!((c.0 - 0.2).abs() < 1e-15 && (c.1 - 0.3).abs() < 1e-15);
        }
        let sym = vec![1.0; 16];
        let views = make_views(&sym, 4, 4);
        assert_eq!(views.len(), 4);
        assert!(views.iter().all(|(_, v)| *v == sym));
    }

    fn disc(size: usize, cx: f64, cy: f64, r: f64) -> Vec<f64> {
        (0..size * size)
            .map(|i| {
                let (x, y) = ((i % size) as f64, (i / size) as f64);
                if (x - cx).hypot(y - cy) <= r { 0.9 } else { 0.1 }
            })
            .collect()
    }

    /// Predictor that returns the image itself and honest geometry, except
    /// for one view that is replaced by a contradictory mask.
    fn predictor(
        corrupt: Option<ViewTransform>,
        size: usize,
    ) -> impl FnMut(ViewTransform, &[f64]) -> Result<ViewOutput> {
        move |t, img| {
            if Some(t) == corrupt {
                let garbage: Vec<f64> = (0..size * size).map(|i| if i % 3 == 0 { 0.95 } else { 0.05 }).collect();
                return Ok(ViewOutput {
                    mask: garbage,
                    area: Some(0.05),
                    centroid: Some([0.2, 0.8]),
                });
            }
            let g = extract_geometry(&BinaryMask::from_probs(size, size, img, 0.5));
            Ok(ViewOutput {
                mask: img.to_vec(),
                area: Some(g.area),
                centroid: Some(g.centroid),
            })
        }
    }

    #[test]
    fn zero_lambda_is_plain_tta() {
        let img = disc(16, 5.0, 7.0, 3.5);
        let mut noisy = |t: ViewTransform, im: &[f64]| -> Result<ViewOutput> {
            let k = t as usize as f64;
            Ok(ViewOutput {
                mask: im.iter().enumerate().map(|(i, v)| (v + 0.01 * k * ((i % 5) as f64)).min(1.0)).collect(),
                area: Some(0.3 + 0.1 * k),
                centroid: Some([0.1 * k, 0.2]),
            })
        };
        let r = consensus_with(&img, 16, 16, &ConsensusConfig::tta(), &mut noisy).unwrap();
        let mut mean = vec![0.0; 256];
        for (t, v) in make_views(&img, 16, 16) {
            let back = t.apply(&noisy(t, &v).unwrap().mask, 16, 16);
            mean.iter_mut().zip(back).for_each(|(m, b)| *m += b / 4.0);
        }
        let diff = r.probability.iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-12, "{diff}");
    }

    #[test]
    fn corrupted_view_gets_the_smallest_weight() {
        let img = disc(32, 12.0, 18.0, 6.0);
        for bad in ViewTransform::ALL {
            let r = consensus_with(&img, 32, 32, &ConsensusConfig::default(), predictor(Some(bad), 32)).unwrap();
            let bad_w = r.weights[bad as usize];
            for (t, &w) in ViewTransform::ALL.iter().zip(&r.weights) {
                if *t != bad {
                    assert!(bad_w < w, "{bad:?}: {:?}", r.weights);
                }
            }
        }
    }

    #[test]
    fn consistent_views_reproduce_the_single_view() {
        let img = disc(32, 15.5, 15.5, 7.0);
        let r = consensus_with(&img, 32, 32, &ConsensusConfig::default(), predictor(None, 32)).unwrap();
        assert!(r.weights.iter().all(|&w| (w - 1.0).abs() < 1e-12), "{:?}", r.weights);
        assert_eq!(r.mask, BinaryMask::from_probs(32, 32, &img, 0.5));
        let json = serde_json::to_value(&r.diagnostics).unwrap();
        assert_eq!(json["views"].as_array().unwrap().len(), 4);
        assert!(json["views"][0]["transform"].is_string());
    }

    #[test]
    fn missing_geometry_means_uniform_weights() {
        let img = disc(16, 4.0, 4.0, 3.0);
        let r = consensus_with(&img, 16, 16, &ConsensusConfig::default(), |_, im| {
            Ok(ViewOutput {
                mask: im.to_vec(),
                area: None,
                centroid: None,
            })
        })
        .unwrap();
        assert_eq!(r.weights, vec![1.0; 4]);
    }

    #[test]
    fn config_validation() {
        assert!(ConsensusConfig::default().validate().is_ok());
        let bad = ConsensusConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ConsensusConfig {
            binarize_threshold: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn weight_in_unit_interval(a in 0.0..1.0f64, b in 0.0..1.0f64, cx in 0.0..1.0f64, cy in 0.0..1.0f64, l in 0.0..20.0f64) {
            let w = view_weight(a, b, [cx, cy], [0.5, 0.5], l);
            prop_assert!(w > 0.0 && w <= 1.0);
        }

        #[test]
        fn aggregate_stays_within_view_range(m in proptest::collection::vec(proptest::collection::vec(0.0..1.0f64, 6), 1..5), seed in 0u64..1000) {
            let weights: Vec<f64> = (0..m.len()).map(|i| ((seed + i as u64) % 4) as f64).collect();
            let out = aggregate_views(&m, &weights).unwrap();
            for (p, o) in out.iter().enumerate() {
                let lo = m.iter().map(|v| v[p]).fold(f64::INFINITY, f64::min);
                let hi = m.iter().map(|v| v[p]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(*o >= lo - 1e-12 && *o <= hi + 1e-12);
            }
        }
    }
}
