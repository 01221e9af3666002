//! Structured nine-dimension reports, their sentence encoding, and the
//! `C2PE` embedding file format.
//!
//! `C2PE` layout (all little-endian):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `b"C2PE"`               |
//! | 4      | 4    | version `u32` = 1             |
//! | 8      | 4    | `n_rows: u32`                 |
//! | 12     | 4    | `n_cols: u32`                 |
//! | 16     | 4·n  | row-major `f32` payload       |

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use base64::Engine as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskgeo::BinaryMask;

pub const N_SEM: usize = 9;
pub const D_TEXT: usize = 768;

/// Field names in schema order.
pub const FIELDS: [&str; N_SEM] = [
    "morphology",
    "margin_definition",
    "internal_texture",
    "surrounding_interaction",
    "boundary_distinctness",
    "malignancy_risk",
    "pathological_inference",
    "differential_reasoning",
    "predicted_diagnosis",
];

/// Sentence stems, one per field, in schema order.
pub const TEMPLATES: [&str; N_SEM] = [
    "The geometric shape and orientation of the lesion is",
    "The boundaries and margins of the lesion are",
    "The internal echo-texture and composition is",
    "The interaction with surrounding tissue shows",
    "The visual distinctness and contrast of the lesion edge is",
    "The estimated clinical malignancy risk assessment is",
    "The inferred micro-structural tissue characteristics are",
    "The clinical reasoning for distinguishing this from other mimics is",
    "The most likely specific diagnosis is",
];

/// Unknown keys are ignored when deserializing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticReport {
    pub morphology: String,
    pub margin_definition: String,
    pub internal_texture: String,
    pub surrounding_interaction: String,
    pub boundary_distinctness: String,
    pub malignancy_risk: String,
    pub pathological_inference: String,
    pub differential_reasoning: String,
    pub predicted_diagnosis: String,
}

impl SemanticReport {
    pub fn from_fields(values: [String; N_SEM]) -> Self {
        let [a, b, c, d, e, f, g, h, i] = values;
        Self {
            morphology: a,
            margin_definition: b,
            internal_texture: c,
            surrounding_interaction: d,
            boundary_distinctness: e,
            malignancy_risk: f,
            pathological_inference: g,
            differential_reasoning: h,
            predicted_diagnosis: i,
        }
    }

    pub fn fields(&self) -> [&str; N_SEM] {
        [
            &self.morphology,
            &self.margin_definition,
            &self.internal_texture,
            &self.surrounding_interaction,
            &self.boundary_distinctness,
            &self.malignancy_risk,
            &self.pathological_inference,
            &self.differential_reasoning,
            &self.predicted_diagnosis,
        ]
    }

    pub fn field_mut(&mut self, index: usize) -> &mut String {
        match index {
            0 => &mut self.morphology,
            1 => &mut self.margin_definition,
            2 => &mut self.internal_texture,
            3 => &mut self.surrounding_interaction,
            4 => &mut self.boundary_distinctness,
            5 => &mut self.malignancy_risk,
            6 => &mut self.pathological_inference,
            7 => &mut self.differential_reasoning,
            8 => &mut self.predicted_diagnosis,
            _ => panic!("report has {N_SEM} fields, index {index}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in FIELDS.iter().zip(self.fields()) {
            if value.trim().is_empty() {
                return Err(Error::SchemaViolation(format!("field `{name}` is empty")));
            }
        }
        Ok(())
    }

    /// Parse and validate a JSON object. The object may be wrapped in prose
    /// or a fenced code block; the outermost `{...}` span is used.
    pub fn from_json(text: &str) -> Result<Self> {
        let start = text
            .find('{')
            .ok_or_else(|| Error::SchemaViolation("no JSON object in response".into()))?;
        let end = text
            .rfind('}')
            .filter(|&e| e > start)
            .ok_or_else(|| Error::SchemaViolation("unterminated JSON object".into()))?;
        let report: SemanticReport = serde_json::from_str(&text[start..=end])
            .map_err(|e| Error::SchemaViolation(e.to_string()))?;
        report.validate()?;
        Ok(report)
    }
}

/// Inject every field into its sentence stem, in schema order.
pub fn build_sentences(report: &SemanticReport) -> Result<Vec<String>> {
    report.validate()?;
    Ok(TEMPLATES
        .iter()
        .zip(report.fields())
        .map(|(stem, value)| format!("{stem} {}", value.trim()))
        .collect())
}

pub trait TextEncoder {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// Must be deterministic: equal input gives an equal vector.
    fn encode(&self, sentence: &str) -> std::result::Result<Vec<f32>, String>;
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Offline stand-in encoder: a unit vector of standard normals seeded by the
/// sentence hash.
#[derive(Clone, Debug)]
pub struct MockEncoder {
    pub dim: usize,
}

impl Default for MockEncoder {
    fn default() -> Self {
        Self { dim: D_TEXT }
    }
}

pub fn mock_encode(sentence: &str, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(sentence.as_bytes()));
    let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    raw.iter().map(|v| (v / norm) as f32).collect()
}

impl TextEncoder for MockEncoder {
    fn name(&self) -> &str {
        "mock"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, sentence: &str) -> std::result::Result<Vec<f32>, String> {
        Ok(mock_encode(sentence, self.dim))
    }
}

/// Encoder backed by an OpenAI-style `/embeddings` endpoint.
pub struct HttpTextEncoder {
    pub endpoint: String,
    pub model: String,
    pub dim: usize,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpTextEncoder {
    pub fn new(endpoint: &str, model: &str, dim: usize, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            dim,
            api_key,
            agent,
        }
    }
}

impl TextEncoder for HttpTextEncoder {
    fn name(&self) -> &str {
        &self.model
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, sentence: &str) -> std::result::Result<Vec<f32>, String> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let body = serde_json::json!({ "model": self.model, "input": sentence });
        let mut resp = req.send_json(&body).map_err(|e| e.to_string())?;
        let v: serde_json::Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        let arr = v["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| "response has no data[0].embedding".to_string())?;
        let out: Vec<f32> = arr.iter().filter_map(|x| x.as_f64()).map(|x| x as f32).collect();
        if out.len() != self.dim {
            return Err(format!("expected {} dims, got {}", self.dim, out.len()));
        }
        Ok(out)
    }
}

/// `rows × cols` matrix of `f32`, one row per report dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEmbedding {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl SemanticEmbedding {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} embedding needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::SchemaViolation("embedding has non-finite entries".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(EMBED_MAGIC);
        out.extend_from_slice(&EMBED_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::CorruptFile(format!("header truncated ({} bytes)", bytes.len())));
        }
        if &bytes[0..4] != EMBED_MAGIC {
            return Err(Error::CorruptFile("bad magic, expected C2PE".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != EMBED_VERSION {
            return Err(Error::CorruptFile(format!("unsupported version {version}")));
        }
        let (rows, cols) = (word(8) as usize, word(12) as usize);
        let want = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::CorruptFile(format!("dimensions {rows}x{cols} overflow")))?;
        let payload = &bytes[16..];
        if payload.len() != want {
            return Err(Error::CorruptFile(format!(
                "{rows}x{cols} payload needs {want} bytes, found {}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(rows, cols, data).map_err(|e| Error::CorruptFile(e.to_string()))
    }
}

const EMBED_MAGIC: &[u8; 4] = b"C2PE";
const EMBED_VERSION: u32 = 1;

pub fn write_embedding(path: &Path, emb: &SemanticEmbedding) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&emb.to_bytes())?;
    Ok(())
}

pub fn read_embedding(path: &Path) -> Result<SemanticEmbedding> {
    SemanticEmbedding::from_bytes(&fs::read(path)?)
}

/// Read and require a specific shape.
pub fn read_embedding_shaped(path: &Path, rows: usize, cols: usize) -> Result<SemanticEmbedding> {
    let e = read_embedding(path)?;
    if e.rows != rows || e.cols != cols {
        return Err(Error::CorruptFile(format!(
            "{}: expected {rows}x{cols}, found {}x{}",
            path.display(),
            e.rows,
            e.cols
        )));
    }
    Ok(e)
}

/// Encode each templated sentence independently; row `j` is sentence `j`.
pub fn encode_report(report: &SemanticReport, encoder: &dyn TextEncoder) -> Result<SemanticEmbedding> {
    let sentences = build_sentences(report)?;
    let dim = encoder.dim();
    let mut data = Vec::with_capacity(N_SEM * dim);
    for (j, s) in sentences.iter().enumerate() {
        let v = encoder.encode(s).map_err(|message| Error::Encoder { dimension: j, message })?;
        if v.len() != dim {
            return Err(Error::Encoder {
                dimension: j,
                message: format!("expected {dim} values, got {}", v.len()),
            });
        }
        data.extend(v);
    }
    SemanticEmbedding::new(N_SEM, dim, data).map_err(|e| Error::Encoder {
        dimension: 0,
        message: e.to_string(),
    })
}

/// Modality-specific slots of the report prompt.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub role: String,
    pub tasks: String,
    pub image_mode: String,
    pub context: String,
}

impl PromptConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Base prompt shared by every modality; slots are `{ROLE}`, `{TASKS}`,
/// `{IMAGE_MODE}` and `{CONTEXT}`.
pub const BASE_PROMPT: &str = include_str!("../prompts/base_prompt.txt");

/// Built-in modality prompt files, by name.
pub const BUILTIN_PROMPTS: [(&str, &str); 4] = [
    ("ultrasound", include_str!("../prompts/modalities/ultrasound.json")),
    ("dermoscopy", include_str!("../prompts/modalities/dermoscopy.json")),
    ("endoscopy", include_str!("../prompts/modalities/endoscopy.json")),
    ("synthetic", include_str!("../prompts/modalities/synthetic.json")),
];

pub fn builtin_prompt(name: &str) -> Result<PromptConfig> {
    let (_, text) = BUILTIN_PROMPTS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Config(format!("no built-in prompt named `{name}`")))?;
    serde_json::from_str(text).map_err(|e| Error::Config(format!("built-in prompt `{name}`: {e}")))
}

pub fn render_prompt(template: &str, cfg: &PromptConfig) -> String {
    template
        .replace("{ROLE}", &cfg.role)
        .replace("{TASKS}", &cfg.tasks)
        .replace("{IMAGE_MODE}", &cfg.image_mode)
        .replace("{CONTEXT}", &cfg.context)
}

/// Raw image, contour-annotated image, and binary mask, PNG-encoded.
#[derive(Clone, Debug)]
pub struct ImageTriplet {
    pub raw_png: Vec<u8>,
    pub annotated_png: Vec<u8>,
    pub mask_png: Vec<u8>,
}

fn png_bytes<P, C>(img: &image::ImageBuffer<P, C>) -> Result<Vec<u8>>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Overlay the mask contour, dilated by `radius` pixels, in red.
pub fn contour_overlay(gray: &image::GrayImage, mask: &BinaryMask, radius: usize) -> image::RgbImage {
    let (w, h) = (mask.width(), mask.height());
    let on_contour = |x: usize, y: usize| {
        if !mask.get(x, y) {
            return false;
        }
        (x == 0 || !mask.get(x - 1, y))
            || (x + 1 == w || !mask.get(x + 1, y))
            || (y == 0 || !mask.get(x, y - 1))
            || (y + 1 == h || !mask.get(x, y + 1))
    };
    let contour = BinaryMask::from_fn(h, w, on_contour);
    let r = radius as isize;
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (xi, yi) = (x as isize, y as isize);
        let near = (-r..=r).any(|dy| {
            (-r..=r).any(|dx| {
                let (nx, ny) = (xi + dx, yi + dy);
                nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && contour.get(nx as usize, ny as usize)
            })
        });
        if near {
            image::Rgb([255, 0, 0])
        } else {
            let g = gray.get_pixel(x, y).0[0];
            image::Rgb([g, g, g])
        }
    })
}

impl ImageTriplet {
    pub fn build(gray: &image::GrayImage, mask: &BinaryMask) -> Result<Self> {
        Ok(Self {
            raw_png: png_bytes(gray)?,
            annotated_png: png_bytes(&contour_overlay(gray, mask, 2))?,
            mask_png: png_bytes(&mask.to_luma())?,
        })
    }
}

pub struct MllmRequest<'a> {
    pub prompt: String,
    pub triplet: &'a ImageTriplet,
}

pub trait MllmClient {
    /// Raw text of the model's reply.
    fn complete(&self, request: &MllmRequest) -> Result<String>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MllmConfig {
    pub endpoint: Option<String>,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
}

impl Default for MllmConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: "qwen3-vl-plus".into(),
            timeout_secs: 120,
            max_retries: 2,
            api_key_env: "MLLM_API_KEY".into(),
        }
    }
}

/// Chat-completions client sending the triplet as inline PNG data URLs.
pub struct HttpMllmClient {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpMllmClient {
    /// Fails without touching the network when no endpoint is configured.
    pub fn new(cfg: &MllmConfig) -> Result<Self> {
        let endpoint = cfg
            .endpoint
            .clone()
            .filter(|e| !e.trim().is_empty())
            .ok_or_else(|| Error::Config("mllm.endpoint is not set".into()))?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build()
            .into();
        Ok(Self {
            endpoint,
            model: cfg.model.clone(),
            api_key: std::env::var(&cfg.api_key_env).ok(),
            agent,
        })
    }
}

impl MllmClient for HttpMllmClient {
    fn complete(&self, request: &MllmRequest) -> Result<String> {
        let url = |png: &[u8]| {
            format!(
                "data:image/png;base64,{}",
                base64::engine::general_purpose::STANDARD.encode(png)
            )
        };
        let t = request.triplet;
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{
                "role": "user",
                "content": [
                    { "type": "text", "text": request.prompt },
                    { "type": "image_url", "image_url": { "url": url(&t.raw_png) } },
                    { "type": "image_url", "image_url": { "url": url(&t.annotated_png) } },
                    { "type": "image_url", "image_url": { "url": url(&t.mask_png) } },
                ],
            }],
        });
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| Error::Transport(e.to_string()))?;
        let v: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Transport(e.to_string()))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Transport("reply has no choices[0].message.content".into()))
    }
}

/// Offline client replaying canned replies in order (the last one repeats).
pub struct CannedClient {
    replies: Vec<String>,
    calls: std::cell::Cell<usize>,
}

impl CannedClient {
    pub fn new(replies: Vec<String>) -> Self {
        assert!(!replies.is_empty());
        Self {
            replies,
            calls: std::cell::Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl MllmClient for CannedClient {
    fn complete(&self, _request: &MllmRequest) -> Result<String> {
        let i = self.calls.get();
        self.calls.set(i + 1);
        Ok(self.replies[i.min(self.replies.len() - 1)].clone())
    }
}

/// Ask the model for a report, retrying malformed replies up to
/// `max_retries` times. Transport failures are returned immediately.
pub fn mllm_generate(
    triplet: &ImageTriplet,
    prompt: &PromptConfig,
    client: &dyn MllmClient,
    max_retries: u32,
) -> Result<SemanticReport> {
    let request = MllmRequest {
        prompt: render_prompt(BASE_PROMPT, prompt),
        triplet,
    };
    let mut last = None;
    for _ in 0..=max_retries {
        let reply = client.complete(&request)?;
        match SemanticReport::from_json(&reply) {
            Ok(r) => return Ok(r),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::SchemaViolation("no reply".into())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(value: &str) -> SemanticReport {
        SemanticReport::from_fields(std::array::from_fn(|_| value.to_string()))
    }

    #[test]
    fn builtin_prompts_parse() {
        for (name, _) in BUILTIN_PROMPTS {
            let p = builtin_prompt(name).unwrap();
            assert!(!render_prompt(BASE_PROMPT, &p).contains("{ROLE}"));
        }
        assert!(builtin_prompt("xray").is_err());
    }

    #[test]
    fn first_sentence_uses_morphology_stem() {
        let mut r = report("X");
        r.morphology = "irregular, taller-than-wide".into();
        let s = build_sentences(&r).unwrap();
        assert_eq!(
            s[0],
            "The geometric shape and orientation of the lesion is irregular, taller-than-wide"
        );
    }

    #[test]
    fn all_sentences_end_with_value() {
        let s = build_sentences(&report("X")).unwrap();
        assert_eq!(s.len(), N_SEM);
        assert!(s.iter().all(|x| x.ends_with('X')));
    }

    #[test]
    fn empty_field_is_schema_violation() {
        let mut r = report("X");
        r.margin_definition = "  ".into();
        assert!(matches!(build_sentences(&r), Err(Error::SchemaViolation(m)) if m.contains("margin_definition")));
    }

    #[test]
    fn mock_encoder_is_deterministic_unit_and_spread() {
        let a = mock_encode("a", D_TEXT);
        assert_eq!(a, mock_encode("a", D_TEXT));
        let n: f64 = a.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        let b = mock_encode("b", D_TEXT);
        let cos: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
        assert!(cos.abs() < 0.3, "cos = {cos}");
    }

    #[test]
    fn encode_report_shapes_and_row_independence() {
        let enc = MockEncoder::default();
        let r1 = report("same");
        let e1 = encode_report(&r1, &enc).unwrap();
        assert_eq!((e1.rows(), e1.cols()), (N_SEM, D_TEXT));
        assert!(e1.data().iter().all(|v| v.is_finite()));
        assert_eq!(e1, encode_report(&r1, &enc).unwrap());

        let mut r2 = r1.clone();
        *r2.field_mut(4) = "different".into();
        let e2 = encode_report(&r2, &enc).unwrap();
        for j in 0..N_SEM {
            assert_eq!(e1.row(j) == e2.row(j), j != 4, "row {j}");
        }
    }

    struct FailingEncoder;
    impl TextEncoder for FailingEncoder {
        fn name(&self) -> &str {
            "failing"
        }
        fn dim(&self) -> usize {
            4
        }
        fn encode(&self, sentence: &str) -> std::result::Result<Vec<f32>, String> {
            if sentence.starts_with("The internal") {
                Err("boom".into())
            } else {
                Ok(vec![1.0; 4])
            }
        }
    }

    #[test]
    fn encoder_failure_names_dimension() {
        let err = encode_report(&report("x"), &FailingEncoder).unwrap_err();
        assert!(matches!(err, Error::Encoder { dimension: 2, .. }));
    }

    #[test]
    fn embedding_file_errors() {
        let e = SemanticEmbedding::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, -0.0]).unwrap();
        let bytes = e.to_bytes();
        assert_eq!(SemanticEmbedding::from_bytes(&bytes).unwrap(), e);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(SemanticEmbedding::from_bytes(&bad), Err(Error::CorruptFile(_))));
        assert!(matches!(
            SemanticEmbedding::from_bytes(&bytes[..bytes.len() - 2]),
            Err(Error::CorruptFile(_))
        ));
        assert!(matches!(SemanticEmbedding::from_bytes(&bytes[..10]), Err(Error::CorruptFile(_))));
        let mut wrong_dims = bytes.clone();
        wrong_dims[8] = 3;
        assert!(matches!(SemanticEmbedding::from_bytes(&wrong_dims), Err(Error::CorruptFile(_))));
    }

    fn triplet() -> ImageTriplet {
        let img = image::GrayImage::from_pixel(8, 8, image::Luma([100]));
        let mask = BinaryMask::from_fn(8, 8, |x, y| (2..6).contains(&x) && (2..6).contains(&y));
        ImageTriplet::build(&img, &mask).unwrap()
    }

    fn reply_json(extra: &str, skip: Option<&str>) -> String {
        let mut parts: Vec<String> = FIELDS
            .iter()
            .filter(|f| Some(**f) != skip)
            .map(|f| format!("\"{f}\": \"value of {f}\""))
            .collect();
        if !extra.is_empty() {
            parts.push(extra.to_string());
        }
        format!("{{{}}}", parts.join(", "))
    }

    #[test]
    fn canned_reply_parses() {
        let client = CannedClient::new(vec![format!("```json\n{}\n```", reply_json("", None))]);
        let r = mllm_generate(&triplet(), &PromptConfig::default(), &client, 0).unwrap();
        assert_eq!(r.predicted_diagnosis, "value of predicted_diagnosis");
        assert_eq!(build_sentences(&r).unwrap().len(), N_SEM);
    }

    #[test]
    fn missing_field_fails_after_retries() {
        let client = CannedClient::new(vec![reply_json("", Some("predicted_diagnosis"))]);
        let err = mllm_generate(&triplet(), &PromptConfig::default(), &client, 2).unwrap_err();
        assert!(matches!(err, Error::SchemaViolation(_)));
        assert_eq!(client.calls(), 3);
    }

    #[test]
    fn extra_keys_are_ignored_and_retry_recovers() {
        let client = CannedClient::new(vec![
            "not json at all".into(),
            reply_json("\"confidence\": 0.9", None),
        ]);
        let r = mllm_generate(&triplet(), &PromptConfig::default(), &client, 1).unwrap();
        assert_eq!(r.morphology, "value of morphology");
        assert_eq!(client.calls(), 2);
    }

    #[test]
    fn http_client_requires_endpoint() {
        assert!(matches!(HttpMllmClient::new(&MllmConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn prompt_slots_are_filled() {
        let cfg = PromptConfig {
            role: "R0".into(),
            tasks: "T0".into(),
            image_mode: "M0".into(),
            context: "C0".into(),
        };
        let p = render_prompt(BASE_PROMPT, &cfg);
        for s in ["R0", "T0", "M0", "C0"] {
            assert!(p.contains(s));
        }
        assert!(!p.contains("{ROLE}"));
        for f in FIELDS {
            assert!(BASE_PROMPT.contains(f), "base prompt lists {f}");
        }
    }
}
