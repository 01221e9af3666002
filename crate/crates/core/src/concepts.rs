//! GEO/SEM concept tokens, style-content fusion, bidirectional token-image
//! interaction, and the geometry and semantic heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::maskgeo::{GEO_BLOCKS, GEO_SCALARS, N_GEO};
use crate::nn::{Init, LayerNorm, Linear, ParamId, ParamStore, Session};
use crate::semknow::{D_TEXT, N_SEM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub text_dim: usize,
}

impl Default for ConceptConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            text_dim: D_TEXT,
        }
    }
}

impl ConceptConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!("token_dim {d} is not divisible by heads {}", self.heads)));
        }
        if self.ffn_mult == 0 || self.text_dim == 0 {
            return Err(Error::Config("ffn_mult and text_dim must be at least 1".into()));
        }
        Ok(())
    }
}

/// Style from shallow-feature channel statistics, content from pooled deep
/// features, fused by a gated MLP into one modality vector.
#[derive(Clone, Debug)]
pub struct Scfm {
    pub style: Linear,
    pub content: Linear,
    pub gate: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl Scfm {
    pub fn new(ps: &mut ParamStore, init: &mut Init, c2: usize, c5: usize, d: usize) -> Self {
        Self {
            style: Linear::new(ps, init, "scfm.style", 2 * c2, d),
            content: Linear::new(ps, init, "scfm.content", c5, d),
            gate: Linear::new(ps, init, "scfm.gate", 2 * d, d),
            value: Linear::new(ps, init, "scfm.value", 2 * d, d),
            out: Linear::new(ps, init, "scfm.out", d, d),
        }
    }

    /// Concatenated per-channel `[mean; std]` of `E2`.
    pub fn style_vector(s: &mut Session, e2: Var) -> Var {
        let mu = s.g.channel_mean(e2);
        let sd = s.g.channel_std(e2);
        s.g.concat(&[mu, sd])
    }

    /// Returns the modality embedding, shape `[d]`.
    pub fn forward(&self, s: &mut Session, e2: Var, e5: Var) -> Var {
        let st = Self::style_vector(s, e2);
        let st = self.style.forward(s, st);
        let gap = s.g.channel_mean(e5);
        let ct = self.content.forward(s, gap);
        let sc = s.g.concat(&[st, ct]);
        let gate = self.gate.forward(s, sc);
        let gate = s.g.sigmoid(gate);
        let val = self.value.forward(s, sc);
        let val = s.g.tanh(val);
        let fused = s.g.mul(gate, val);
        self.out.forward(s, fused)
    }
}

/// Add `v` to every SEM token row. GEO tokens are never passed here.
pub fn inject_modality(s: &mut Session, t_sem: Var, v: Var) -> Result<Var> {
    let shape = s.g.shape(t_sem).to_vec();
    if shape.len() != 2 || s.g.shape(v) != [shape[1]] {
        return Err(Error::ShapeMismatch(format!(
            "modality vector {:?} does not match tokens {:?}",
            s.g.shape(v),
            shape
        )));
    }
    Ok(s.g.add_row_bias(t_sem, v))
}

/// Multi-head cross-attention with output projection.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new(ps: &mut ParamStore, init: &mut Init, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(ps, init, &format!("{name}.q"), d, d),
            k: Linear::new(ps, init, &format!("{name}.k"), d, d),
            v: Linear::new(ps, init, &format!("{name}.v"), d, d),
            o: Linear::new(ps, init, &format!("{name}.o"), d, d),
            heads,
        }
    }

    pub fn forward(&self, s: &mut Session, queries: Var, kv: Var) -> Var {
        let q = self.q.forward(s, queries);
        let k = self.k.forward(s, kv);
        let v = self.v.forward(s, kv);
        let d = self.q.out;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (s.g.slice_cols(q, c0, c1), s.g.slice_cols(k, c0, c1), s.g.slice_cols(v, c0, c1))
            };
            let kt = s.g.transpose(kh);
            let logits = s.g.matmul(qh, kt);
            let logits = s.g.scale(logits, scale);
            let a = s.g.softmax_rows(logits);
            outs.push(s.g.matmul(a, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { s.g.concat_cols(&outs) };
        self.o.forward(s, cat)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, init: &mut Init, name: &str, d: usize, mult: usize) -> Self {
        Self {
            up: Linear::new(ps, init, &format!("{name}.up"), d, d * mult),
            down: Linear::new(ps, init, &format!("{name}.down"), d * mult, d),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let h = self.up.forward(s, x);
        let h = s.g.gelu(h);
        self.down.forward(s, h)
    }
}

/// Pre-norm residual block: `x + attn(LN(x), other)`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct HalfLayer {
    pub ln_attn: LayerNorm,
    pub attn: CrossAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl HalfLayer {
    fn new(ps: &mut ParamStore, init: &mut Init, name: &str, d: usize, cfg: &ConceptConfig) -> Self {
        Self {
            ln_attn: LayerNorm::new(ps, &format!("{name}.ln1"), d),
            attn: CrossAttention::new(ps, init, &format!("{name}.attn"), d, cfg.heads),
            ln_ffn: LayerNorm::new(ps, &format!("{name}.ln2"), d),
            ffn: FeedForward::new(ps, init, &format!("{name}.ffn"), d, cfg.ffn_mult),
        }
    }

    fn forward(&self, s: &mut Session, x: Var, other: Var) -> Var {
        let n = self.ln_attn.forward(s, x);
        let a = self.attn.forward(s, n, other);
        let x = s.g.add(x, a);
        let n = self.ln_ffn.forward(s, x);
        let f = self.ffn.forward(s, n);
        s.g.add(x, f)
    }

    /// Parameters whose zeroing turns this block into the identity.
    pub fn output_projections(&self) -> [ParamId; 4] {
        [self.attn.o.w, self.attn.o.b, self.ffn.down.w, self.ffn.down.b]
    }
}

#[derive(Clone, Debug)]
pub struct InteractionLayer {
    pub tokens: HalfLayer,
    pub image: HalfLayer,
}

/// Token update then image update, repeated per layer.
pub fn interact(s: &mut Session, layers: &[InteractionLayer], mut tokens: Var, mut feats: Var) -> Result<(Var, Var)> {
    let (ts, fs) = (s.g.shape(tokens).to_vec(), s.g.shape(feats).to_vec());
    if ts.len() != 2 || fs.len() != 2 || ts[1] != fs[1] {
        return Err(Error::ShapeMismatch(format!("tokens {ts:?} vs image features {fs:?}")));
    }
    for layer in layers {
        tokens = layer.tokens.forward(s, tokens, feats);
        feats = layer.image.forward(s, feats, tokens);
    }
    Ok((tokens, feats))
}

/// One small MLP per GEO token, each emitting its property block.
#[derive(Clone, Debug)]
pub struct GeoHead {
    pub heads: Vec<(Linear, Linear)>,
}

impl GeoHead {
    pub fn new(ps: &mut ParamStore, init: &mut Init, d: usize) -> Self {
        let heads = GEO_BLOCKS
            .iter()
            .enumerate()
            .map(|(i, &width)| {
                (
                    Linear::new(ps, init, &format!("geo_head.{i}.0"), d, d),
                    Linear::new(ps, init, &format!("geo_head.{i}.1"), d, width),
                )
            })
            .collect();
        Self { heads }
    }

    /// `t_geo_out` is `[N_geo, d]`; returns `[13]` in `(0,1)`.
    pub fn forward(&self, s: &mut Session, t_geo_out: Var) -> Var {
        let mut parts = Vec::with_capacity(N_GEO);
        for (i, (a, b)) in self.heads.iter().enumerate() {
            let row = s.g.slice_rows(t_geo_out, i, i + 1);
            let h = a.forward(s, row);
            let h = s.g.relu(h);
            let y = b.forward(s, h);
            parts.push(s.g.reshape(y, &[b.out]));
        }
        let flat = s.g.concat(&parts);
        debug_assert_eq!(s.g.shape(flat), [GEO_SCALARS]);
        s.g.sigmoid(flat)
    }
}

/// Which token families take part in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSwitches {
    pub geo: bool,
    pub sem: bool,
}

#[derive(Clone, Debug)]
pub struct ConceptOutput {
    /// `[N_geo, d]` refined GEO tokens.
    pub t_geo: Option<Var>,
    /// `[N_sem, d]` refined SEM tokens.
    pub t_sem: Option<Var>,
    /// E5 after token guidance, same shape as E5.
    pub refined_e5: Var,
    pub modality: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Concepts {
    pub geo_tokens: ParamId,
    pub sem_tokens: ParamId,
    pub pos: ParamId,
    pub in_proj: Linear,
    pub out_proj: Linear,
    pub scfm: Scfm,
    pub layers: Vec<InteractionLayer>,
    pub geo_head: GeoHead,
    pub sem_proj: Linear,
    pub d: usize,
    /// Use the learnable positional table.
    pub use_pos: bool,
}

impl Concepts {
    pub fn new(ps: &mut ParamStore, init: &mut Init, c2: usize, c5: usize, d: usize, grid: usize, cfg: &ConceptConfig) -> Self {
        let geo_tokens = ps.add("tokens.geo", init.trunc_normal(&[N_GEO, d], 0.02));
        let sem_tokens = ps.add("tokens.sem", init.trunc_normal(&[N_SEM, d], 0.02));
        let pos = ps.add("interact.pos", init.trunc_normal(&[d, grid, grid], 0.02));
        let layers = (0..cfg.layers)
            .map(|l| InteractionLayer {
                tokens: HalfLayer::new(ps, init, &format!("interact.{l}.tok"), d, cfg),
                image: HalfLayer::new(ps, init, &format!("interact.{l}.img"), d, cfg),
            })
            .collect();
        Self {
            geo_tokens,
            sem_tokens,
            pos,
            in_proj: Linear::new(ps, init, "interact.in_proj", c5, d),
            out_proj: Linear::new(ps, init, "interact.out_proj", d, c5),
            scfm: Scfm::new(ps, init, c2, c5, d),
            layers,
            geo_head: GeoHead::new(ps, init, d),
            sem_proj: Linear::new(ps, init, "sem_proj", d, cfg.text_dim),
            d,
            use_pos: true,
        }
    }

    /// Flatten `[C5,h,w]` to `[hw, d]` and add the positional table,
    /// resampled to `h×w` when needed.
    pub fn image_tokens(&self, s: &mut Session, e5: Var) -> Var {
        let sh = s.g.shape(e5).to_vec();
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let flat = s.g.reshape(e5, &[c, h * w]);
        let flat = s.g.transpose(flat);
        let f = self.in_proj.forward(s, flat);
        if !self.use_pos {
            return f;
        }
        let mut pos = s.p(self.pos);
        let psh = s.g.shape(pos).to_vec();
        if psh[1] != h || psh[2] != w {
            pos = s.g.resize_bilinear(pos, h, w);
        }
        let pos = s.g.reshape(pos, &[self.d, h * w]);
        let pos = s.g.transpose(pos);
        s.g.add(f, pos)
    }

    pub fn forward(&self, s: &mut Session, e2: Var, e5: Var, on: TokenSwitches) -> Result<ConceptOutput> {
        if !on.geo && !on.sem {
            return Ok(ConceptOutput {
                t_geo: None,
                t_sem: None,
                refined_e5: e5,
                modality: None,
            });
        }
        let mut parts = Vec::new();
        if on.geo {
            parts.push(s.p(self.geo_tokens));
        }
        let mut modality = None;
        if on.sem {
            let v = self.scfm.forward(s, e2, e5);
            let t_sem = s.p(self.sem_tokens);
            parts.push(inject_modality(s, t_sem, v)?);
            modality = Some(v);
        }
        let tokens = if parts.len() == 1 { parts[0] } else { s.g.concat(&parts) };
        let feats = self.image_tokens(s, e5);
        let (t_out, f_out) = interact(s, &self.layers, tokens, feats)?;
        let (t_geo, t_sem) = match (on.geo, on.sem) {
            (true, true) => (
                Some(s.g.slice_rows(t_out, 0, N_GEO)),
                Some(s.g.slice_rows(t_out, N_GEO, N_GEO + N_SEM)),
            ),
            (true, false) => (Some(t_out), None),
            _ => (None, Some(t_out)),
        };
        let sh = s.g.shape(e5).to_vec();
        let back = self.out_proj.forward(s, f_out);
        let back = s.g.transpose(back);
        let back = s.g.reshape(back, &sh);
        let refined_e5 = s.g.add(e5, back);
        Ok(ConceptOutput {
            t_geo,
            t_sem,
            refined_e5,
            modality,
        })
    }

    pub fn regress_geometry(&self, s: &mut Session, t_geo: Var) -> Var {
        self.geo_head.forward(s, t_geo)
    }

    /// `[N_sem, d]` to `[N_sem, text_dim]`.
    pub fn project_semantic(&self, s: &mut Session, t_sem: Var) -> Var {
        self.sem_proj.forward(s, t_sem)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients_sampled;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: usize = 8;

    fn build(layers: usize, grid: usize) -> (ParamStore, Concepts) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut init = Init { rng: &mut rng };
        let mut ps = ParamStore::new();
        let cfg = ConceptConfig {
            layers,
            heads: 2,
            ffn_mult: 2,
            text_dim: 12,
        };
        let c = Concepts::new(&mut ps, &mut init, 3, 5, D, grid, &cfg);
        (ps, c)
    }

    fn map(c: usize, h: usize, seed: u64) -> Tensor {
        Tensor::from_fn(&[c, h, h], |i| (((i as u64 + 1) * (seed * 31 + 7)) % 23) as f64 / 23.0 - 0.4)
    }

    #[test]
    fn constant_channel_has_zero_std_and_shift_keeps_std() {
        let (ps, _) = build(1, 2);
        let mut s = Session::eval(&ps);
        let e2 = s.input(Tensor::from_fn(&[3, 4, 4], |i| (i / 16) as f64 * 0.7));
        let st = Scfm::style_vector(&mut s, e2);
        assert!(s.value(st).data()[3..].iter().all(|&v| v == 0.0));

        let base = map(3, 4, 1);
        let shifted = base.map(|v| v + 2.5);
        let a = s.input(base);
        let b = s.input(shifted);
        let sa = Scfm::style_vector(&mut s, a);
        let sb = Scfm::style_vector(&mut s, b);
        let (va, vb) = (s.value(sa).data().to_vec(), s.value(sb).data().to_vec());
        for i in 0..3 {
            assert!((vb[i] - va[i] - 2.5).abs() < 1e-12);
            assert!((vb[3 + i] - va[3 + i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_features_with_zero_bias_give_zero_modality() {
        let (ps, c) = build(1, 2);
        let mut s = Session::eval(&ps);
        let e2 = s.input(Tensor::zeros(&[3, 4, 4]));
        let e5 = s.input(Tensor::zeros(&[5, 2, 2]));
        let v = c.scfm.forward(&mut s, e2, e5);
        assert_eq!(s.value(v).shape(), &[D]);
        assert!(s.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn injection_shifts_every_sem_row_and_leaves_geo_alone() {
        let (ps, c) = build(1, 2);
        let mut s = Session::eval(&ps);
        let geo_before = ps.get(c.geo_tokens).clone();
        let t_sem = s.p(c.sem_tokens);
        let zero = s.input(Tensor::zeros(&[D]));
        let same = inject_modality(&mut s, t_sem, zero).unwrap();
        assert_eq!(s.value(same).data(), ps.get(c.sem_tokens).data());
        let vt = Tensor::from_fn(&[D], |i| i as f64 * 0.25);
        let v = s.input(vt.clone());
        let out = inject_modality(&mut s, t_sem, v).unwrap();
        for j in 0..N_SEM {
            for k in 0..D {
                let want = ps.get(c.sem_tokens).data()[j * D + k] + vt.data()[k];
                assert_eq!(s.value(out).data()[j * D + k], want);
            }
        }
        let bad = s.input(Tensor::zeros(&[D + 1]));
        assert!(matches!(inject_modality(&mut s, t_sem, bad), Err(Error::ShapeMismatch(_))));

        let e2 = s.input(map(3, 4, 2));
        let e5 = s.input(map(5, 2, 3));
        let out = c.forward(&mut s, e2, e5, TokenSwitches { geo: true, sem: true }).unwrap();
        assert!(out.modality.is_some());
        assert_eq!(ps.get(c.geo_tokens).data(), geo_before.data());
        let gt = s.p(c.geo_tokens);
        assert_eq!(s.value(gt).data(), geo_before.data());
    }

    #[test]
    fn interaction_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init { rng: &mut rng };
        let mut ps = ParamStore::new();
        let c = Concepts::new(&mut ps, &mut init, 32, 256, 128, 2, &ConceptConfig::default());
        let mut s = Session::eval(&ps);
        let t = s.input(Tensor::from_fn(&[18, 128], |i| (i % 5) as f64 * 0.1));
        let f = s.input(Tensor::from_fn(&[4, 128], |i| (i % 3) as f64 * 0.1));
        let (to, fo) = interact(&mut s, &c.layers, t, f).unwrap();
        assert_eq!(s.g.shape(to), [18, 128]);
        assert_eq!(s.g.shape(fo), [4, 128]);
    }

    #[test]
    fn zero_output_projections_and_zero_layers_are_identity() {
        let (mut ps, c) = build(2, 2);
        for l in &c.layers {
            for id in l.tokens.output_projections().into_iter().chain(l.image.output_projections()) {
                *ps.get_mut(id) = Tensor::zeros(ps.get(id).shape());
            }
        }
        let tt = Tensor::from_fn(&[18, D], |i| (i % 11) as f64 * 0.1 - 0.5);
        let ft = Tensor::from_fn(&[4, D], |i| (i % 7) as f64 * 0.2 - 0.6);
        let mut s = Session::eval(&ps);
        let t = s.input(tt.clone());
        let f = s.input(ft.clone());
        let (to, fo) = interact(&mut s, &c.layers, t, f).unwrap();
        assert_eq!(s.value(to).data(), tt.data());
        assert_eq!(s.value(fo).data(), ft.data());

        let (ps, c) = build(2, 2);
        let mut s = Session::eval(&ps);
        let t = s.input(tt.clone());
        let f = s.input(ft.clone());
        let (to, fo) = interact(&mut s, &c.layers[..0], t, f).unwrap();
        assert_eq!(s.value(to).data(), tt.data());
        assert_eq!(s.value(fo).data(), ft.data());
    }

    fn permute_positions(t: &Tensor, perm: &[usize]) -> Tensor {
        let (c, hw) = (t.shape()[0], perm.len());
        Tensor::from_fn(t.shape(), |i| {
            let (ch, p) = (i / hw, i % hw);
            t.data()[ch * hw + perm[p]]
        })
        .reshape(&[c, 2, 2])
    }

    #[test]
    fn token_output_is_position_permutation_invariant_only_without_pos() {
        let (ps, mut c) = build(2, 2);
        let e5 = map(5, 2, 9);
        let e5p = permute_positions(&e5, &[3, 1, 0, 2]);
        let run = |c: &Concepts, x: &Tensor| {
            let mut s = Session::eval(&ps);
            let e5 = s.input(x.clone());
            let f = c.image_tokens(&mut s, e5);
            let t = s.p(c.geo_tokens);
            let (to, _) = interact(&mut s, &c.layers, t, f).unwrap();
            s.value(to).clone()
        };
        c.use_pos = false;
        assert!(run(&c, &e5).max_abs_diff(&run(&c, &e5p)) < 1e-12);
        c.use_pos = true;
        assert!(run(&c, &e5).max_abs_diff(&run(&c, &e5p)) > 1e-9);
    }

    #[test]
    fn geo_head_range_and_zero_init() {
        let (mut ps, c) = build(1, 2);
        let mut s = Session::eval(&ps);
        let t = s.input(Tensor::from_fn(&[N_GEO, D], |i| (i % 13) as f64 - 6.0));
        let y = c.regress_geometry(&mut s, t);
        assert_eq!(s.value(y).len(), GEO_SCALARS);
        assert!(s.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
        drop(s);
        for (_, b) in &c.geo_head.heads {
            *ps.get_mut(b.w) = Tensor::zeros(ps.get(b.w).shape());
            *ps.get_mut(b.b) = Tensor::zeros(ps.get(b.b).shape());
        }
        let mut s = Session::eval(&ps);
        let t = s.input(Tensor::from_fn(&[N_GEO, D], |i| i as f64));
        let y = c.regress_geometry(&mut s, t);
        assert!(s.value(y).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn semantic_projection_shape_and_linearity() {
        let (mut ps, c) = build(1, 2);
        *ps.get_mut(c.sem_proj.b) = Tensor::zeros(&[12]);
        let mut s = Session::eval(&ps);
        let tt = Tensor::from_fn(&[N_SEM, D], |i| (i % 5) as f64 - 2.0);
        let t = s.input(tt.clone());
        let t2 = s.input(tt.map(|v| 2.0 * v));
        let a = c.project_semantic(&mut s, t);
        let b = c.project_semantic(&mut s, t2);
        assert_eq!(s.g.shape(a), [N_SEM, 12]);
        let twice = s.value(a).map(|v| 2.0 * v);
        assert!(twice.max_abs_diff(s.value(b)) < 1e-12);
    }

    #[test]
    fn full_size_projection_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init { rng: &mut rng };
        let mut ps = ParamStore::new();
        let c = Concepts::new(&mut ps, &mut init, 32, 256, 128, 2, &ConceptConfig::default());
        let mut s = Session::eval(&ps);
        let t = s.input(Tensor::zeros(&[N_SEM, 128]));
        let y = c.project_semantic(&mut s, t);
        assert_eq!(s.g.shape(y), [9, 768]);
    }

    #[test]
    fn pos_table_is_resampled_for_other_grids() {
        let (ps, c) = build(1, 2);
        let mut s = Session::eval(&ps);
        let e5 = s.input(map(5, 4, 1));
        let f = c.image_tokens(&mut s, e5);
        assert_eq!(s.g.shape(f), [16, D]);
    }

    #[test]
    fn token_scfm_attention_gradients_match_finite_differences() {
        let (ps, c) = build(2, 2);
        let ids = [
            c.geo_tokens,
            c.sem_tokens,
            c.pos,
            c.scfm.gate.w,
            c.scfm.style.w,
            c.layers[0].tokens.attn.q.w,
            c.layers[1].image.attn.k.w,
            c.geo_head.heads[2].0.w,
        ];
        let mut inputs: Vec<Tensor> = ids.iter().map(|&id| ps.get(id).clone()).collect();
        inputs.push(map(3, 4, 5));
        inputs.push(map(5, 2, 6));
        let target = Tensor::from_fn(&[N_SEM, 12], |i| ((i * 7) % 5) as f64 - 2.0);
        let r = check_gradients_sampled(&inputs, 10, 2, |g, v| {
            let mut s = Session::on_graph(&ps, std::mem::take(g));
            for (&id, &var) in ids.iter().zip(v) {
                s.bind(id, var);
            }
            let out = c.forward(&mut s, v[8], v[9], TokenSwitches { geo: true, sem: true }).unwrap();
            let geo = c.regress_geometry(&mut s, out.t_geo.unwrap());
            let sem = c.project_semantic(&mut s, out.t_sem.unwrap());
            let cos = s.g.row_cosine(sem, &target);
            let a = s.g.sum(geo);
            let b = s.g.sum(cos);
            let r = s.g.sum(out.refined_e5);
            let ab = s.g.sub(a, b);
            let l = s.g.add(ab, r);
            *g = s.g;
            l
        });
        assert!(r.max_rel_error <= 1e-3, "{:?}", r.per_input);
    }
}
