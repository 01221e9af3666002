//! Token-guided dynamic head: pooled image query attends over refined
//! tokens, an MLP emits per-sample fg/bg conv kernels, and the kernels run
//! over D2.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Init, Linear, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynHeadConfig {
    pub kernel_size: usize,
    pub depth: usize,
}

impl Default for DynHeadConfig {
    fn default() -> Self {
        Self {
            kernel_size: 1,
            depth: 1,
        }
    }
}

impl DynHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 || self.depth == 0 {
            return Err(Error::Config(format!(
                "head kernel_size must be odd and depth at least 1, got {} and {}",
                self.kernel_size, self.depth
            )));
        }
        Ok(())
    }

    /// Scalars per class: `depth · (C·k² + 1)`.
    pub fn params_per_class(&self, channels: usize) -> usize {
        self.depth * (channels * self.kernel_size * self.kernel_size + 1)
    }

    pub fn param_count(&self, channels: usize) -> usize {
        2 * self.params_per_class(channels)
    }
}

/// Full-resolution foreground and background probability maps, each `[1,H,W]`.
#[derive(Clone, Copy, Debug)]
pub struct PredictionPair {
    pub fg: Var,
    pub bg: Var,
}

/// Single-query attention without output projection.
#[derive(Clone, Debug)]
pub struct TokenPool {
    pub k: Linear,
    pub v: Linear,
}

impl TokenPool {
    fn new(ps: &mut ParamStore, init: &mut Init, name: &str, d: usize) -> Self {
        Self {
            k: Linear::new(ps, init, &format!("{name}.k"), d, d),
            v: Linear::new(ps, init, &format!("{name}.v"), d, d),
        }
    }

    /// `q` is `[d]`, `tokens` `[n, d]`; returns `[d]`.
    pub fn forward(&self, s: &mut Session, q: Var, tokens: Var) -> Var {
        let d = self.k.out;
        let k = self.k.forward(s, tokens);
        let v = self.v.forward(s, tokens);
        let q = s.g.reshape(q, &[1, d]);
        let kt = s.g.transpose(k);
        let logits = s.g.matmul(q, kt);
        let logits = s.g.scale(logits, 1.0 / (d as f64).sqrt());
        let a = s.g.softmax_rows(logits);
        let out = s.g.matmul(a, v);
        s.g.reshape(out, &[d])
    }
}

#[derive(Clone, Debug)]
pub struct DynamicHead {
    pub query: Linear,
    pub geo_pool: TokenPool,
    pub sem_pool: TokenPool,
    pub psi_hidden: Linear,
    pub psi_out: Linear,
    pub cfg: DynHeadConfig,
    pub channels: usize,
    pub d: usize,
}

impl DynamicHead {
    pub fn new(ps: &mut ParamStore, init: &mut Init, channels: usize, d: usize, cfg: &DynHeadConfig) -> Self {
        Self {
            query: Linear::new(ps, init, "tgdh.query", channels, d),
            geo_pool: TokenPool::new(ps, init, "tgdh.geo", d),
            sem_pool: TokenPool::new(ps, init, "tgdh.sem", d),
            psi_hidden: Linear::new(ps, init, "tgdh.psi.0", 3 * d, 2 * d),
            psi_out: Linear::new(ps, init, "tgdh.psi.1", 2 * d, cfg.param_count(channels)),
            cfg: cfg.clone(),
            channels,
            d,
        }
    }

    /// `(F_geo, F_sem, Q_img)`; an absent token family contributes zeros.
    pub fn aggregate(&self, s: &mut Session, d2: Var, t_geo: Option<Var>, t_sem: Option<Var>) -> Result<(Var, Var, Var)> {
        let c = s.g.shape(d2)[0];
        if c != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "head expects {} channels, D2 has {c}",
                self.channels
            )));
        }
        let gap = s.g.channel_mean(d2);
        let q = self.query.forward(s, gap);
        let pool = |s: &mut Session, p: &TokenPool, t: Option<Var>| -> Result<Var> {
            match t {
                Some(t) => {
                    if s.g.shape(t).len() != 2 || s.g.shape(t)[1] != self.d {
                        return Err(Error::ShapeMismatch(format!(
                            "tokens {:?} do not have width {}",
                            s.g.shape(t),
                            self.d
                        )));
                    }
                    Ok(p.forward(s, q, t))
                }
                None => Ok(s.input(Tensor::zeros(&[self.d]))),
            }
        };
        let f_geo = pool(s, &self.geo_pool, t_geo)?;
        let f_sem = pool(s, &self.sem_pool, t_sem)?;
        Ok((f_geo, f_sem, q))
    }

    /// Flat kernel vector: fg block then bg block.
    pub fn generate_kernels(&self, s: &mut Session, f_geo: Var, f_sem: Var, q: Var) -> Var {
        let x = s.g.concat(&[f_geo, f_sem, q]);
        let h = self.psi_hidden.forward(s, x);
        let h = s.g.relu(h);
        self.psi_out.forward(s, h)
    }

    pub fn apply_dynamic(&self, s: &mut Session, d2: Var, kernels: Var, out_h: usize, out_w: usize) -> Result<PredictionPair> {
        let c = s.g.shape(d2)[0];
        let per = self.cfg.params_per_class(self.channels);
        if c != self.channels || s.g.shape(kernels) != [2 * per] {
            return Err(Error::ShapeMismatch(format!(
                "kernels {:?} do not fit D2 with {c} channels",
                s.g.shape(kernels)
            )));
        }
        let fg = s.g.slice(kernels, 0, per);
        let bg = s.g.slice(kernels, per, per);
        let fg = self.class_map(s, d2, fg, out_h, out_w);
        let bg = self.class_map(s, d2, bg, out_h, out_w);
        Ok(PredictionPair { fg, bg })
    }

    /// Depthwise `k×k` + scalar bias + ReLU for all but the last layer; the
    /// last layer is a dense `C → 1` conv.
    fn class_map(&self, s: &mut Session, d2: Var, flat: Var, out_h: usize, out_w: usize) -> Var {
        let (c, k) = (self.channels, self.cfg.kernel_size);
        let pad = k / 2;
        let layer_len = c * k * k + 1;
        let mut x = d2;
        for l in 0..self.cfg.depth {
            let w = s.g.slice(flat, l * layer_len, c * k * k);
            let b = s.g.slice(flat, l * layer_len + c * k * k, 1);
            if l + 1 == self.cfg.depth {
                let w = s.g.reshape(w, &[1, c, k, k]);
                x = s.g.conv2d(x, w, Some(b), 1, pad);
            } else {
                let (h, wd) = (s.g.shape(x)[1], s.g.shape(x)[2]);
                let chans: Vec<Var> = (0..c)
                    .map(|ch| {
                        let xc = s.g.slice(x, ch * h * wd, h * wd);
                        let xc = s.g.reshape(xc, &[1, h, wd]);
                        let wc = s.g.slice(w, ch * k * k, k * k);
                        let wc = s.g.reshape(wc, &[1, 1, k, k]);
                        s.g.conv2d(xc, wc, Some(b), 1, pad)
                    })
                    .collect();
                let y = s.g.concat(&chans);
                x = s.g.relu(y);
            }
        }
        to_probability(s, x, out_h, out_w)
    }
}

/// Upsample logits, then sigmoid.
pub fn to_probability(s: &mut Session, logits: Var, out_h: usize, out_w: usize) -> Var {
    let sh = s.g.shape(logits);
    let up = if sh[1] == out_h && sh[2] == out_w {
        logits
    } else {
        s.g.resize_bilinear(logits, out_h, out_w)
    };
    s.g.sigmoid(up)
}

/// Ablation head: one learned 1×1 conv per class, shared by all samples.
#[derive(Clone, Debug)]
pub struct StaticHead {
    pub w: ParamId,
    pub b: ParamId,
}

impl StaticHead {
    pub fn new(ps: &mut ParamStore, init: &mut Init, channels: usize) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        Self {
            w: ps.add("static_head.weight", init.uniform(&[2, channels, 1, 1], bound)),
            b: ps.add("static_head.bias", Tensor::zeros(&[2])),
        }
    }

    pub fn forward(&self, s: &mut Session, d2: Var, out_h: usize, out_w: usize) -> PredictionPair {
        let w = s.p(self.w);
        let b = s.p(self.b);
        let y = s.g.conv2d(d2, w, Some(b), 1, 0);
        let (h, wd) = (s.g.shape(y)[1], s.g.shape(y)[2]);
        let fg = s.g.slice(y, 0, h * wd);
        let fg = s.g.reshape(fg, &[1, h, wd]);
        let bg = s.g.slice(y, h * wd, h * wd);
        let bg = s.g.reshape(bg, &[1, h, wd]);
        PredictionPair {
            fg: to_probability(s, fg, out_h, out_w),
            bg: to_probability(s, bg, out_h, out_w),
        }
    }
}

/// Per-pixel argmax of the two maps; ties go to background.
pub fn argmax_mask(p_fg: &[f64], p_bg: &[f64]) -> Vec<u8> {
    p_fg.iter().zip(p_bg).map(|(f, b)| u8::from(f > b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients_sampled;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const C: usize = 4;
    const D: usize = 6;

    fn build(cfg: &DynHeadConfig) -> (ParamStore, DynamicHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut init = Init { rng: &mut rng };
        let mut ps = ParamStore::new();
        let h = DynamicHead::new(&mut ps, &mut init, C, D, cfg);
        (ps, h)
    }

    fn tokens(n: usize, seed: usize) -> Tensor {
        Tensor::from_fn(&[n, D], |i| (((i + 1) * (seed * 13 + 5)) % 19) as f64 / 19.0 - 0.5)
    }

    fn d2(h: usize, seed: usize) -> Tensor {
        Tensor::from_fn(&[C, h, h], |i| (((i + 3) * (seed * 7 + 3)) % 29) as f64 / 29.0 - 0.3)
    }

    #[test]
    fn parameter_count() {
        assert_eq!(DynHeadConfig::default().param_count(32), 66);
        let cfg = DynHeadConfig {
            kernel_size: 3,
            depth: 2,
        };
        assert_eq!(cfg.param_count(32), 2 * 2 * (32 * 9 + 1));
        let (ps, h) = build(&cfg);
        let mut s = Session::eval(&ps);
        let (g, m, q) = (s.input(Tensor::zeros(&[D])), s.input(Tensor::zeros(&[D])), s.input(Tensor::zeros(&[D])));
        let k = h.generate_kernels(&mut s, g, m, q);
        assert_eq!(s.value(k).len(), cfg.param_count(C));
    }

    #[test]
    fn single_token_pool_is_its_value_projection() {
        let (ps, h) = build(&DynHeadConfig::default());
        let mut s = Session::eval(&ps);
        let q = s.input(Tensor::from_fn(&[D], |i| i as f64));
        let t = s.input(tokens(1, 1));
        let pooled = h.geo_pool.forward(&mut s, q, t);
        let v = h.geo_pool.v.forward(&mut s, t);
        assert!(s.value(pooled).max_abs_diff(&s.value(v).clone().reshape(&[D])) < 1e-12);
    }

    #[test]
    fn zero_d2_gives_zero_query_and_three_vectors() {
        let (ps, h) = build(&DynHeadConfig::default());
        let mut s = Session::eval(&ps);
        let x = s.input(Tensor::zeros(&[C, 4, 4]));
        let tg = s.input(tokens(9, 1));
        let ts = s.input(tokens(9, 2));
        let (g, m, q) = h.aggregate(&mut s, x, Some(tg), Some(ts)).unwrap();
        assert!(s.value(q).data().iter().all(|&v| v == 0.0));
        for v in [g, m, q] {
            assert_eq!(s.g.shape(v), [D]);
        }
        let (g, _, _) = h.aggregate(&mut s, x, None, Some(ts)).unwrap();
        assert!(s.value(g).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_generator_gives_half_probabilities() {
        let (mut ps, h) = build(&DynHeadConfig::default());
        for id in [h.psi_out.w, h.psi_out.b] {
            *ps.get_mut(id) = Tensor::zeros(ps.get(id).shape());
        }
        let mut s = Session::eval(&ps);
        let x = s.input(d2(4, 1));
        let tg = s.input(tokens(9, 1));
        let (g, m, q) = h.aggregate(&mut s, x, Some(tg), None).unwrap();
        let k = h.generate_kernels(&mut s, g, m, q);
        let p = h.apply_dynamic(&mut s, x, k, 16, 16).unwrap();
        assert_eq!(s.g.shape(p.fg), [1, 16, 16]);
        assert!(s.value(p.fg).data().iter().chain(s.value(p.bg).data()).all(|&v| v == 0.5));
    }

    #[test]
    fn different_inputs_give_different_kernels() {
        let (ps, h) = build(&DynHeadConfig::default());
        let run = |seed| {
            let mut s = Session::eval(&ps);
            let x = s.input(d2(4, seed));
            let tg = s.input(tokens(9, seed));
            let ts = s.input(tokens(9, seed + 10));
            let (g, m, q) = h.aggregate(&mut s, x, Some(tg), Some(ts)).unwrap();
            let k = h.generate_kernels(&mut s, g, m, q);
            s.value(k).clone()
        };
        assert!(run(1).max_abs_diff(&run(2)) > 1e-6);
    }

    #[test]
    fn constant_d2_gives_constant_maps_and_classes_are_independent() {
        let (ps, h) = build(&DynHeadConfig::default());
        let per = h.cfg.params_per_class(C);
        let kern = Tensor::from_fn(&[2 * per], |i| (i as f64 * 0.37).sin());
        let mut s = Session::eval(&ps);
        let x = s.input(Tensor::from_fn(&[C, 4, 4], |i| (i / 16) as f64 * 0.5 - 0.7));
        let k = s.input(kern.clone());
        let p = h.apply_dynamic(&mut s, x, k, 16, 16).unwrap();
        let fg = s.value(p.fg).data().to_vec();
        assert!(fg.iter().all(|&v| (v - fg[0]).abs() < 1e-12));

        let mut zeroed = kern.clone();
        zeroed.data_mut()[per..].iter_mut().for_each(|v| *v = 0.0);
        let x2 = s.input(d2(4, 3));
        let k1 = s.input(kern);
        let k2 = s.input(zeroed);
        let a = h.apply_dynamic(&mut s, x2, k1, 16, 16).unwrap();
        let b = h.apply_dynamic(&mut s, x2, k2, 16, 16).unwrap();
        assert_eq!(s.value(a.fg).data(), s.value(b.fg).data());
        assert!(s.value(b.bg).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let (ps, h) = build(&DynHeadConfig::default());
        let mut s = Session::eval(&ps);
        let x = s.input(Tensor::zeros(&[C + 1, 4, 4]));
        let k = s.input(Tensor::zeros(&[h.cfg.param_count(C)]));
        assert!(matches!(h.apply_dynamic(&mut s, x, k, 8, 8), Err(Error::ShapeMismatch(_))));
    }

    fn head_gradcheck(cfg: DynHeadConfig) {
        let (ps, h) = build(&cfg);
        let ids = [h.query.w, h.geo_pool.k.w, h.sem_pool.v.w, h.psi_hidden.w, h.psi_out.w];
        let mut inputs: Vec<Tensor> = ids.iter().map(|&id| ps.get(id).clone()).collect();
        inputs.push(d2(8, 2));
        inputs.push(tokens(9, 3));
        inputs.push(tokens(9, 4));
        let target = Tensor::from_fn(&[1, 16, 16], |i| ((i * 7) % 3 == 0) as u8 as f64);
        let r = check_gradients_sampled(&inputs, 10, 4, |g, v| {
            let mut s = Session::on_graph(&ps, std::mem::take(g));
            for (&id, &var) in ids.iter().zip(v) {
                s.bind(id, var);
            }
            let (a, b, q) = h.aggregate(&mut s, v[5], Some(v[6]), Some(v[7])).unwrap();
            let k = h.generate_kernels(&mut s, a, b, q);
            let p = h.apply_dynamic(&mut s, v[5], k, 16, 16).unwrap();
            let t = s.input(target.clone());
            let diff = s.g.sub(p.fg, t);
            let sq = s.g.square(diff);
            let l1 = s.g.sum(sq);
            let l2 = s.g.mean(p.bg);
            let l = s.g.add(l1, l2);
            *g = s.g;
            l
        });
        assert!(r.max_rel_error <= 1e-3, "{:?}", r.per_input);
    }

    #[test]
    fn end_to_end_head_gradients_match_finite_differences() {
        head_gradcheck(DynHeadConfig::default());
    }

    #[test]
    fn deep_head_gradients_match_finite_differences() {
        head_gradcheck(DynHeadConfig {
            kernel_size: 3,
            depth: 2,
        });
    }

    #[test]
    fn static_head_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init { rng: &mut rng };
        let mut ps = ParamStore::new();
        let h = StaticHead::new(&mut ps, &mut init, C);
        let mut s = Session::eval(&ps);
        let x = s.input(d2(4, 1));
        let p = h.forward(&mut s, x, 16, 16);
        assert_eq!(s.g.shape(p.fg), [1, 16, 16]);
        assert!(s.value(p.bg).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    proptest! {
        #[test]
        fn argmax_mask_is_invariant_to_shared_positive_logit_scaling(
            logits in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..64),
            scale in 0.1f64..3.0,
        ) {
            let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
            let p = |k: f64| -> (Vec<f64>, Vec<f64>) {
                logits.iter().map(|&(a, b)| (sig(k * a), sig(k * b))).unzip()
            };
            let (f1, b1) = p(1.0);
            let (f2, b2) = p(scale);
            prop_assert_eq!(argmax_mask(&f1, &b1), argmax_mask(&f2, &b2));
        }
    }
}
