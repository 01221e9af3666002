//! Full network wiring and the named-parameter checkpoint format.
//!
//! Checkpoint layout (all little-endian):
//!
//! ```text
//! magic   b"C2PC"
//! version u32 = 1
//! count   u32
//! count × { name_len u32, name utf-8, ndim u32, dims ndim×u32, payload f32×prod(dims) }
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::{ConceptConfig, Concepts, TokenSwitches};
use crate::dynhead::{argmax_mask, DynHeadConfig, DynamicHead, PredictionPair, StaticHead};
use crate::encdec::{Decoder, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::maskgeo::{BinaryMask, GEO_SCALARS};
use crate::nn::{Init, ParamStore, Session};
use crate::tensor::Tensor;

/// Component switches of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_geo_tokens: bool,
    pub use_sem_tokens: bool,
    pub use_dynamic_head: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_geo_tokens: true,
            use_sem_tokens: true,
            use_dynamic_head: true,
        }
    }
}

impl Ablation {
    pub fn baseline() -> Self {
        Self {
            use_geo_tokens: false,
            use_sem_tokens: false,
            use_dynamic_head: false,
        }
    }

    pub fn tokens(&self) -> TokenSwitches {
        TokenSwitches {
            geo: self.use_geo_tokens,
            sem: self.use_sem_tokens,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub concepts: ConceptConfig,
    pub head: DynHeadConfig,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.concepts.validate(self.encoder.token_dim)?;
        self.head.validate()
    }

    /// Smaller widths used for the CPU-budget experiments.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig {
                stage_channels: [8, 16, 32, 64, 128],
                token_dim: 64,
                decoder_channels: 16,
                ..Default::default()
            },
            ..Default::default()
        }
    }
}

/// Graph handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub pred: PredictionPair,
    /// `[13]` regressed geometry when GEO tokens are enabled.
    pub geo: Option<Var>,
    /// `[N_sem, text_dim]` projected SEM tokens when enabled.
    pub sem: Option<Var>,
    pub modality: Option<Var>,
}

/// Plain-value result of an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub height: usize,
    pub width: usize,
    pub p_fg: Vec<f64>,
    pub p_bg: Vec<f64>,
    pub geo: Option<[f64; GEO_SCALARS]>,
}

impl Prediction {
    pub fn mask(&self) -> BinaryMask {
        BinaryMask::new(self.height, self.width, argmax_mask(&self.p_fg, &self.p_bg)).expect("prediction dims")
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub concepts: Concepts,
    pub head: DynamicHead,
    pub static_head: StaticHead,
}

impl Model {
    /// Every component is built regardless of the ablation switches so the
    /// parameter set and init stream do not depend on them.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut ps = ParamStore::new();
        let e = &cfg.encoder;
        let c = e.stage_channels;
        let encoder = Encoder::new(&mut ps, &mut init, e);
        let decoder = Decoder::new(&mut ps, &mut init, e);
        let concepts = Concepts::new(&mut ps, &mut init, c[1], c[4], e.token_dim, e.e5_grid(), &cfg.concepts);
        let head = DynamicHead::new(&mut ps, &mut init, e.decoder_channels, e.token_dim, &cfg.head);
        let static_head = StaticHead::new(&mut ps, &mut init, e.decoder_channels);
        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            encoder,
            decoder,
            concepts,
            head,
            static_head,
        })
    }

    /// Record one sample's forward pass. `image` is `[C,H,W]`.
    pub fn forward(&self, s: &mut Session, image: Var) -> Result<ForwardOutput> {
        let ab = self.cfg.ablation;
        let (h, w) = (s.g.shape(image)[1], s.g.shape(image)[2]);
        let enc = self.encoder.forward(s, image)?;
        let co = self.concepts.forward(s, enc.e2(), enc.e5(), ab.tokens())?;
        let d2 = self.decoder.forward(s, co.refined_e5, &enc)?;
        let pred = if ab.use_dynamic_head {
            let (fg, fs, q) = self.head.aggregate(s, d2, co.t_geo, co.t_sem)?;
            let k = self.head.generate_kernels(s, fg, fs, q);
            self.head.apply_dynamic(s, d2, k, h, w)?
        } else {
            self.static_head.forward(s, d2, h, w)
        };
        let geo = co.t_geo.map(|t| self.concepts.regress_geometry(s, t));
        let sem = co.t_sem.map(|t| self.concepts.project_semantic(s, t));
        Ok(ForwardOutput {
            pred,
            geo,
            sem,
            modality: co.modality,
        })
    }

    pub fn image_tensor(&self, pixels: &[f64], height: usize, width: usize) -> Result<Tensor> {
        let c = self.cfg.encoder.in_channels;
        if pixels.len() != c * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {c}x{height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Tensor::new(&[c, height, width], pixels.to_vec()))
    }

    pub fn predict(&self, pixels: &[f64], height: usize, width: usize) -> Result<Prediction> {
        let t = self.image_tensor(pixels, height, width)?;
        let mut s = Session::eval(&self.params);
        let x = s.input(t);
        let out = self.forward(&mut s, x)?;
        let geo = out.geo.map(|g| {
            let v = s.value(g).data();
            std::array::from_fn(|i| v[i])
        });
        Ok(Prediction {
            height,
            width,
            p_fg: s.value(out.pred.fg).data().to_vec(),
            p_bg: s.value(out.pred.bg).data().to_vec(),
            geo,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, checkpoint_bytes(&self.params))?;
        Ok(())
    }

    /// Load weights into a model built from the same config.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let loaded = parse_checkpoint(&fs::read(path)?)?;
        self.params.assign_from(&loaded).map_err(Error::CorruptFile)
    }
}

const CKPT_MAGIC: &[u8; 4] = b"C2PC";
const CKPT_VERSION: u32 = 1;

pub fn checkpoint_bytes(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptFile(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::CorruptFile("bad magic, expected C2PC".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::CorruptFile(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut ps = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::CorruptFile("parameter name is not utf-8".into()))?
            .to_string();
        if ps.id(&name).is_some() {
            return Err(Error::CorruptFile(format!("duplicate parameter {name}")));
        }
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| Error::CorruptFile(format!("{name}: shape overflow")))?;
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::CorruptFile("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        ps.add(name, Tensor::new(&dims, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptFile(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                input_size: 32,
                stage_channels: [4, 4, 8, 8, 8],
                token_dim: 8,
                decoder_channels: 4,
                ..Default::default()
            },
            concepts: ConceptConfig {
                layers: 1,
                heads: 2,
                ffn_mult: 2,
                text_dim: 16,
            },
            ..Default::default()
        }
    }

    fn image() -> Vec<f64> {
        (0..32 * 32).map(|i| ((i * 31) % 17) as f64 / 17.0).collect()
    }

    #[test]
    fn prediction_shapes_and_ranges() {
        let m = Model::new(&tiny(), 1).unwrap();
        let p = m.predict(&image(), 32, 32).unwrap();
        assert_eq!(p.p_fg.len(), 32 * 32);
        assert!(p.p_fg.iter().chain(&p.p_bg).all(|&v| v > 0.0 && v < 1.0));
        assert!(p.geo.unwrap().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p.mask().height(), 32);
    }

    #[test]
    fn ablations_run_and_drop_heads() {
        for ab in [
            Ablation::baseline(),
            Ablation {
                use_geo_tokens: false,
                ..Default::default()
            },
            Ablation {
                use_sem_tokens: false,
                ..Default::default()
            },
            Ablation {
                use_dynamic_head: false,
                ..Default::default()
            },
        ] {
            let cfg = ModelConfig { ablation: ab, ..tiny() };
            let m = Model::new(&cfg, 1).unwrap();
            let mut s = Session::eval(&m.params);
            let x = s.input(m.image_tensor(&image(), 32, 32).unwrap());
            let out = m.forward(&mut s, x).unwrap();
            assert_eq!(out.geo.is_some(), ab.use_geo_tokens);
            assert_eq!(out.sem.is_some(), ab.use_sem_tokens);
        }
    }

    #[test]
    fn checkpoint_round_trip_reproduces_outputs() {
        let m = Model::new(&tiny(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.c2pc");
        m.save(&path).unwrap();
        let mut other = Model::new(&tiny(), 99).unwrap();
        assert_ne!(other.predict(&image(), 32, 32).unwrap(), m.predict(&image(), 32, 32).unwrap());
        other.load_weights(&path).unwrap();
        let (a, b) = (m.predict(&image(), 32, 32).unwrap(), other.predict(&image(), 32, 32).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let m = Model::new(&tiny(), 5).unwrap();
        let bytes = checkpoint_bytes(&m.params);
        assert!(parse_checkpoint(&bytes).is_ok());
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(parse_checkpoint(&bad), Err(Error::CorruptFile(_))));
        assert!(matches!(parse_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::CorruptFile(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(parse_checkpoint(&long), Err(Error::CorruptFile(_))));

        let mut other_cfg = tiny();
        other_cfg.encoder.decoder_channels = 8;
        let mut other = Model::new(&other_cfg, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.c2pc");
        m.save(&path).unwrap();
        assert!(matches!(other.load_weights(&path), Err(Error::CorruptFile(_))));
    }
}
