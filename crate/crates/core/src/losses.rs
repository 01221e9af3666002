//! Boundary-weighted structure loss, dice, geometry MSE, semantic cosine
//! alignment and their weighted total, all recorded on the tape.

use serde::{Deserialize, Serialize};

use crate::dynhead::PredictionPair;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::maskgeo::{BinaryMask, GEO_BLOCKS, GEO_SCALARS, N_GEO};
use crate::tensor::Tensor;

pub const FOCAL_GAMMA: f64 = 2.0;
pub const PROB_CLAMP: f64 = 1e-7;
pub const SMOOTH: f64 = 1.0;
pub const POOL_WINDOW: usize = 31;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_seg: f64,
    pub lambda_geo: f64,
    pub lambda_sem: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_seg: 1.0,
            lambda_geo: 1.0,
            lambda_sem: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_seg, self.lambda_geo, self.lambda_sem]
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// `W = 1 + 5·|AvgPool31(M) − M|`, stride 1, zero padding counted in the
/// window average. Returned as `[1,H,W]`.
pub fn boundary_weight(mask: &BinaryMask) -> Tensor {
    let (h, w) = (mask.height(), mask.width());
    let r = POOL_WINDOW / 2;
    // Summed-area table with a zero border row/column.
    let mut sat = vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] = mask.get(x, y) as u32 + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x]
                - sat[y * (w + 1) + x];
        }
    }
    let area = (POOL_WINDOW * POOL_WINDOW) as f64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0];
            let avg = s as f64 / area;
            let m = mask.get(x, y) as u8 as f64;
            out[y * w + x] = 1.0 + 5.0 * (avg - m).abs();
        }
    }
    Tensor::new(&[1, h, w], out)
}

/// Focal term with weight `W`, normalized by `ΣW`.
pub fn weighted_focal(g: &mut Graph, p: Var, m: &Tensor, w: &Tensor, gamma: f64) -> Var {
    let pc = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = g.rsub_scalar(1.0, pc);
    let logp = g.log(pc);
    let logq = g.log(q);
    let qg = g.powf(q, gamma);
    let pg = g.powf(pc, gamma);
    let pos = g.mul(qg, logp);
    let neg = g.mul(pg, logq);
    let mt = g.constant(m.clone());
    let nm = g.constant(m.map(|v| 1.0 - v));
    let pos = g.mul(pos, mt);
    let neg = g.mul(neg, nm);
    let fl = g.add(pos, neg);
    let wt = g.constant(w.clone());
    let wfl = g.mul(fl, wt);
    let total = g.sum(wfl);
    let wsum: f64 = w.data().iter().sum();
    g.scale(total, -1.0 / wsum)
}

/// `1 − (ΣWpm + 1)/(ΣW(p+m) − ΣWpm + 1)` on unclamped `p`.
pub fn weighted_iou(g: &mut Graph, p: Var, m: &Tensor, w: &Tensor) -> Var {
    let wm = Tensor::new(m.shape(), m.data().iter().zip(w.data()).map(|(a, b)| a * b).collect());
    let wm_sum: f64 = wm.data().iter().sum();
    let wmt = g.constant(wm);
    let wt = g.constant(w.clone());
    let pwm = g.mul(p, wmt);
    let inter = g.sum(pwm);
    let pw = g.mul(p, wt);
    let wp = g.sum(pw);
    let num = g.add_scalar(inter, SMOOTH);
    let den = g.sub(wp, inter);
    let den = g.add_scalar(den, wm_sum + SMOOTH);
    let ratio = g.div(num, den);
    g.rsub_scalar(1.0, ratio)
}

pub fn struct_loss(g: &mut Graph, p: Var, m: &Tensor, w: &Tensor) -> Var {
    struct_loss_gamma(g, p, m, w, FOCAL_GAMMA)
}

pub fn struct_loss_gamma(g: &mut Graph, p: Var, m: &Tensor, w: &Tensor, gamma: f64) -> Var {
    let f = weighted_focal(g, p, m, w, gamma);
    let i = weighted_iou(g, p, m, w);
    g.add(f, i)
}

/// `1 − (2Σpm + 1)/(Σp + Σm + 1)`.
pub fn dice_loss(g: &mut Graph, p: Var, m: &Tensor) -> Var {
    let msum: f64 = m.data().iter().sum();
    let mt = g.constant(m.clone());
    let pm = g.mul(p, mt);
    let inter = g.sum(pm);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, SMOOTH);
    let ps = g.sum(p);
    let den = g.add_scalar(ps, msum + SMOOTH);
    let ratio = g.div(num, den);
    g.rsub_scalar(1.0, ratio)
}

/// Structure + dice for both classes; background target is `1 − M`.
pub fn seg_loss(g: &mut Graph, pred: PredictionPair, mask: &BinaryMask) -> Var {
    let (h, w) = (mask.height(), mask.width());
    let m = Tensor::new(&[1, h, w], mask.to_f64());
    let bgm = mask.complement();
    let mb = Tensor::new(&[1, h, w], bgm.to_f64());
    let wf = boundary_weight(mask);
    let wb = boundary_weight(&bgm);
    let a = struct_loss(g, pred.fg, &m, &wf);
    let b = dice_loss(g, pred.fg, &m);
    let c = struct_loss(g, pred.bg, &mb, &wb);
    let d = dice_loss(g, pred.bg, &mb);
    let ab = g.add(a, b);
    let cd = g.add(c, d);
    g.add(ab, cd)
}

/// Per-scalar weights `1/(N_geo · block_len)` realizing the block average.
pub fn geo_scalar_weights() -> [f64; GEO_SCALARS] {
    let mut out = [0.0; GEO_SCALARS];
    let mut i = 0;
    for &b in &GEO_BLOCKS {
        for _ in 0..b {
            out[i] = 1.0 / (N_GEO * b) as f64;
            i += 1;
        }
    }
    out
}

/// Mean over the nine property blocks of each block's own MSE.
pub fn geo_loss(g: &mut Graph, pred: Var, target: &[f64; GEO_SCALARS]) -> Var {
    let t = g.constant(Tensor::new(&[GEO_SCALARS], target.to_vec()));
    let d = g.sub(pred, t);
    let sq = g.square(d);
    let w = g.constant(Tensor::new(&[GEO_SCALARS], geo_scalar_weights().to_vec()));
    let ws = g.mul(sq, w);
    g.sum(ws)
}

/// Mean of `1 − cos` over rows.
pub fn sem_loss(g: &mut Graph, proj: Var, target: &Tensor) -> Var {
    let cos = g.row_cosine(proj, target);
    let m = g.mean(cos);
    g.rsub_scalar(1.0, m)
}

pub fn total_loss(g: &mut Graph, seg: Var, geo: Var, sem: Var, w: &LossWeights) -> Var {
    let a = g.scale(seg, w.lambda_seg);
    let b = g.scale(geo, w.lambda_geo);
    let c = g.scale(sem, w.lambda_sem);
    let ab = g.add(a, b);
    g.add(ab, c)
}
