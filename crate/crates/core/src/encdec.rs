//! Five-stage conv encoder with taps at stride 4 (E2) and stride 32 (E5),
//! and a skip-connected decoder back to stride 4 (D2).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{ConvBlock, Init, ParamStore, Session};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub stage_channels: [usize; 5],
    pub token_dim: usize,
    pub decoder_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            in_channels: 1,
            stage_channels: [16, 32, 64, 128, 256],
            token_dim: 128,
            decoder_channels: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size {} is not a positive multiple of 32",
                self.input_size
            )));
        }
        let all = self
            .stage_channels
            .iter()
            .chain([&self.in_channels, &self.token_dim, &self.decoder_channels]);
        if all.into_iter().any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn e5_grid(&self) -> usize {
        self.input_size / 32
    }

    pub fn d2_grid(&self) -> usize {
        self.input_size / 4
    }
}

/// Stage outputs `E1..E5`; stage `k` (1-based) is at stride `2^k`.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub stages: Vec<Var>,
}

impl EncoderOutput {
    pub fn e2(&self) -> Var {
        self.stages[1]
    }

    pub fn e5(&self) -> Var {
        self.stages[4]
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stages: Vec<[ConvBlock; 2]>,
    in_channels: usize,
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, init: &mut Init, cfg: &EncoderConfig) -> Self {
        let mut cin = cfg.in_channels;
        let stages = cfg
            .stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let a = ConvBlock::new(ps, init, &format!("enc.s{}.0", i + 1), cin, c, 2);
                let b = ConvBlock::new(ps, init, &format!("enc.s{}.1", i + 1), c, c, 1);
                cin = c;
                [a, b]
            })
            .collect();
        Self {
            stages,
            in_channels: cfg.in_channels,
        }
    }

    /// `image` is `[C,H,W]` with `H == W`, divisible by 32.
    pub fn forward(&self, s: &mut Session, image: Var) -> Result<EncoderOutput> {
        let shape = s.g.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != self.in_channels || shape[1] != shape[2] || shape[1] % 32 != 0 || shape[1] == 0
        {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects a square {}-channel image with side divisible by 32, got {:?}",
                self.in_channels, shape
            )));
        }
        let mut x = image;
        let mut stages = Vec::with_capacity(5);
        for [a, b] in &self.stages {
            x = a.forward(s, x);
            x = b.forward(s, x);
            stages.push(x);
        }
        Ok(EncoderOutput { stages })
    }
}

/// Upsample ×2, concatenate the skip, conv block; repeated from stride 32
/// down to stride 4 using skips E4, E3, E2.
#[derive(Clone, Debug)]
pub struct Decoder {
    blocks: Vec<ConvBlock>,
    c5: usize,
}

impl Decoder {
    pub fn new(ps: &mut ParamStore, init: &mut Init, cfg: &EncoderConfig) -> Self {
        let c = cfg.stage_channels;
        let plan = [
            (c[4] + c[3], c[3]),
            (c[3] + c[2], c[2]),
            (c[2] + c[1], cfg.decoder_channels),
        ];
        let blocks = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| ConvBlock::new(ps, init, &format!("dec.b{i}"), cin, cout, 1))
            .collect();
        Self { blocks, c5: c[4] }
    }

    pub fn forward(&self, s: &mut Session, refined_e5: Var, enc: &EncoderOutput) -> Result<Var> {
        let want = s.g.shape(enc.e5()).to_vec();
        if s.g.shape(refined_e5) != want.as_slice() || want[0] != self.c5 {
            return Err(Error::ShapeMismatch(format!(
                "decoder expects {:?}, got {:?}",
                want,
                s.g.shape(refined_e5)
            )));
        }
        let mut x = refined_e5;
        for (block, skip) in self.blocks.iter().zip([enc.stages[3], enc.stages[2], enc.stages[1]]) {
            let up = s.g.upsample_nearest(x, 2);
            let cat = s.g.concat(&[up, skip]);
            x = block.forward(s, cat);
        }
        Ok(x)
    }
}
