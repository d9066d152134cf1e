//! Textual-semantic information: captions, keyword stripping, noise-difference
//! masks and token embeddings, all behind pluggable providers.

mod cache;
pub mod fixtures;

use std::collections::HashMap;
use std::fmt;
use std::sync::Mutex;

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::image::Image;
use crate::tensor::{rng, Tensor};

pub use cache::{encode_mask, read_captions, read_mask, write_captions, write_mask, MASK_MAGIC};
pub(crate) use cache::write_atomic;

#[derive(Debug, Error)]
pub enum SigError {
    #[error("captioner failed on {image}: {reason}")]
    Caption { image: String, reason: String },
    #[error("captioner returned an empty caption for {image}")]
    EmptyCaption { image: String },
    #[error("text encoder failed: {0}")]
    Encoder(String),
    #[error("denoiser failed: {0}")]
    Denoiser(String),
    #[error("{what}: expected {expected:?}, got {got:?}")]
    Shape { what: &'static str, expected: Vec<usize>, got: Vec<usize> },
    #[error("cannot embed an empty text description")]
    EmptyText,
    #[error("mask file {path}: {reason}")]
    MaskFile { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SigError>;

/// Caption text stored as its whitespace tokens; `text()` is their single-space join.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TextDescription {
    tokens: Vec<String>,
}

impl TextDescription {
    /// Canonicalize whitespace. May be empty; generated captions are checked by [`describe`].
    pub fn new(text: &str) -> Self {
        Self { tokens: text.split_whitespace().map(str::to_owned).collect() }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Case-insensitive whole-word test.
    pub fn contains_word(&self, word: &str) -> bool {
        self.position(word).is_some()
    }

    fn position(&self, word: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t.eq_ignore_ascii_case(word))
    }
}

impl fmt::Display for TextDescription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeywordSource {
    Config,
    VocabularyMatch,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeywordSpec {
    pub keyword: String,
    pub source: KeywordSource,
}

impl KeywordSpec {
    pub fn fixed(keyword: impl Into<String>) -> Self {
        Self { keyword: keyword.into(), source: KeywordSource::Config }
    }

    /// The vocabulary word occurring earliest in `text`.
    pub fn select(text: &TextDescription, vocabulary: &[String]) -> Option<Self> {
        vocabulary
            .iter()
            .filter_map(|w| text.position(w).map(|pos| (pos, w)))
            .min_by_key(|&(pos, _)| pos)
            .map(|(pos, _)| Self { keyword: text.tokens[pos].to_lowercase(), source: KeywordSource::VocabularyMatch })
    }
}

/// Remove every whole-word, case-insensitive occurrence of the keyword.
/// Returns a warning when the keyword does not occur.
pub fn strip_keyword(text: &TextDescription, spec: &KeywordSpec) -> (TextDescription, Option<String>) {
    if !text.contains_word(&spec.keyword) {
        let warning = format!("keyword `{}` not found in \"{}\"", spec.keyword, text);
        return (text.clone(), Some(warning));
    }
    let tokens = text.tokens.iter().filter(|t| !t.eq_ignore_ascii_case(&spec.keyword)).cloned().collect();
    (TextDescription { tokens }, None)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![true; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, bits }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(SigError::Shape { what: "mask bits", expected: vec![height * width], got: vec![bits.len()] });
        }
        Ok(Self { height, width, bits })
    }

    /// Axis-aligned rectangle `[top, top+h) × [left, left+w)` set to one.
    pub fn rect(height: usize, width: usize, top: usize, left: usize, h: usize, w: usize) -> Self {
        Self::from_fn(height, width, |y, x| y >= top && y < top + h && x >= left && x < left + w)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self { bits: self.bits.iter().map(|b| !b).collect(), ..self.clone() }
    }

    pub fn union(&self, other: &BinaryMask) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self { bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(), ..self.clone() })
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        assert!(top + height <= self.height && left + width <= self.width, "mask crop out of bounds");
        Self::from_fn(height, width, |y, x| self.get(top + y, left + x))
    }

    pub fn pad_reflect_to(&self, height: usize, width: usize) -> Self {
        use crate::image::reflect_index;
        Self::from_fn(height, width, |y, x| {
            self.get(reflect_index(y as isize, self.height), reflect_index(x as isize, self.width))
        })
    }

    /// 0/1 values as `f64`, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(SigError::Shape {
                what: "mask",
                expected: vec![self.height, self.width],
                got: vec![other.height, other.width],
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskProvenance {
    VisOnly,
    IrOnly,
    Union,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSemantics {
    pub mask: BinaryMask,
    pub complement: BinaryMask,
    pub provenance: MaskProvenance,
}

impl MaskSemantics {
    pub fn from_mask(mask: BinaryMask, provenance: MaskProvenance) -> Self {
        let complement = mask.complement();
        Self { mask, complement, provenance }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        Self::from_mask(self.mask.crop(top, left, height, width), self.provenance)
    }
}

pub fn union_masks(vis: &BinaryMask, ir: &BinaryMask) -> Result<MaskSemantics> {
    Ok(MaskSemantics::from_mask(vis.union(ir)?, MaskProvenance::Union))
}

/// `L × D_t` token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct TextSemantics {
    embeddings: Tensor,
}

impl TextSemantics {
    pub fn new(embeddings: Tensor) -> Result<Self> {
        let shape = embeddings.shape().to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(SigError::Shape { what: "text embeddings", expected: vec![1, 0], got: shape });
        }
        if !embeddings.is_finite() {
            return Err(SigError::Encoder("non-finite embedding".into()));
        }
        Ok(Self { embeddings })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }
}

/// Image → caption.
pub trait Captioner: Send + Sync {
    fn caption(&self, image: &Image) -> std::result::Result<String, String>;
    /// Exclusive providers are never called concurrently.
    fn is_exclusive(&self) -> bool {
        false
    }
}

/// Caption → `L × D_t` embeddings, one row per token.
pub trait TextEncoder: Send + Sync {
    fn encode(&self, text: &TextDescription) -> std::result::Result<Tensor, String>;
    fn is_exclusive(&self) -> bool {
        false
    }
}

/// `(noisy image, text, noise level)` → noise estimate with the image's shape.
pub trait Denoiser: Send + Sync {
    fn estimate(&self, noisy: &Image, text: &TextDescription, noise_level: f64) -> std::result::Result<Image, String>;
    fn is_exclusive(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum ThresholdPolicy {
    Fixed(f64),
    #[default]
    Otsu,
}

pub fn embed_text(text: &TextDescription, encoder: &dyn TextEncoder) -> Result<TextSemantics> {
    if text.is_empty() {
        return Err(SigError::EmptyText);
    }
    let e = encoder.encode(text).map_err(SigError::Encoder)?;
    if e.ndim() != 2 || e.shape()[0] != text.len() {
        return Err(SigError::Shape { what: "text embeddings", expected: vec![text.len(), 0], got: e.shape().to_vec() });
    }
    TextSemantics::new(e)
}

/// Add seeded Gaussian noise, query the denoiser under both texts, and
/// binarize the normalized channel-mean absolute difference.
pub fn mask_from_noise_diff(
    image: &Image,
    text: &TextDescription,
    stripped: &TextDescription,
    denoiser: &dyn Denoiser,
    noise_seed: u64,
    noise_level: f64,
    policy: ThresholdPolicy,
) -> Result<BinaryMask> {
    let noisy = add_noise(image, noise_seed, noise_level);
    let with = checked_estimate(denoiser, &noisy, text, noise_level)?;
    let without = checked_estimate(denoiser, &noisy, stripped, noise_level)?;
    let diff = noise_difference(&with, &without);
    Ok(binarize(&normalize_min_max(&diff), image.height(), image.width(), policy))
}

fn checked_estimate(denoiser: &dyn Denoiser, noisy: &Image, text: &TextDescription, level: f64) -> Result<Image> {
    let e = denoiser.estimate(noisy, text, level).map_err(SigError::Denoiser)?;
    if (e.channels(), e.height(), e.width()) != (noisy.channels(), noisy.height(), noisy.width()) {
        return Err(SigError::Shape {
            what: "noise estimate",
            expected: vec![noisy.channels(), noisy.height(), noisy.width()],
            got: vec![e.channels(), e.height(), e.width()],
        });
    }
    Ok(e)
}

pub fn add_noise(image: &Image, seed: u64, level: f64) -> Image {
    let mut r = rng::stream(seed, &[rng::label("sig.noise")]);
    let mut out = image.clone();
    for v in out.data_mut() {
        let n: f64 = StandardNormal.sample(&mut r);
        *v += level * n;
    }
    out
}

/// Per-pixel mean over channels of `|a − b|`.
pub fn noise_difference(a: &Image, b: &Image) -> Vec<f64> {
    let n = a.height() * a.width();
    let mut d = vec![0.0; n];
    for c in 0..a.channels() {
        for (i, (x, y)) in a.plane(c).iter().zip(b.plane(c)).enumerate() {
            d[i] += (x - y).abs();
        }
    }
    let k = a.channels() as f64;
    d.iter_mut().for_each(|v| *v /= k);
    d
}

/// Min-max to [0, 1]; a flat map becomes all zeros.
pub fn normalize_min_max(d: &[f64]) -> Vec<f64> {
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; d.len()];
    }
    d.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn bin256(v: f64) -> usize {
    ((v * 255.0).round() as i64).clamp(0, 255) as usize
}

/// Otsu threshold bin over 256 bins of a [0,1] map; foreground is `bin > k`.
pub fn otsu_bin(values: &[f64]) -> usize {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[bin256(v)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w_b, mut sum_b) = (0.0, 0.0);
    let (mut best, mut best_k) = (-1.0, 0);
    for (k, &c) in hist.iter().enumerate() {
        w_b += c as f64;
        sum_b += k as f64 * c as f64;
        let w_f = total - w_b;
        if w_b == 0.0 {
            continue;
        }
        if w_f == 0.0 {
            break;
        }
        let m_b = sum_b / w_b;
        let m_f = (sum_all - sum_b) / w_f;
        let between = w_b * w_f * (m_b - m_f) * (m_b - m_f);
        if between > best {
            best = between;
            best_k = k;
        }
    }
    best_k
}

/// Binarize a normalized map. An all-zero map always yields an empty mask.
pub fn binarize(normalized: &[f64], height: usize, width: usize, policy: ThresholdPolicy) -> BinaryMask {
    if normalized.iter().all(|&v| v == 0.0) {
        return BinaryMask::zeros(height, width);
    }
    let bits = match policy {
        ThresholdPolicy::Fixed(tau) => normalized.iter().map(|&v| v > tau).collect(),
        ThresholdPolicy::Otsu => {
            let k = otsu_bin(normalized);
            normalized.iter().map(|&v| bin256(v) > k).collect()
        }
    };
    BinaryMask { height, width, bits }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SigConfig {
    /// Candidate keywords; the earliest one present in the caption is stripped.
    pub vocabulary: Vec<String>,
    /// Used instead of the vocabulary when set.
    pub keyword: Option<String>,
    pub noise_level: f64,
    pub noise_seed: u64,
    pub threshold: ThresholdPolicy,
}

impl Default for SigConfig {
    fn default() -> Self {
        Self {
            vocabulary: ["person", "people", "car", "bike", "bicycle", "bus", "truck", "motorcycle"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            keyword: None,
            noise_level: 0.5,
            noise_seed: 0,
            threshold: ThresholdPolicy::Otsu,
        }
    }
}

/// Everything produced for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSemantics {
    pub text: TextDescription,
    pub stripped: TextDescription,
    pub mask: MaskSemantics,
    pub text_semantics: TextSemantics,
    pub warnings: Vec<String>,
}

/// Runs providers with a caption cache keyed by image content hash and a gate
/// that serializes calls to providers declaring themselves exclusive.
pub struct SemanticGenerator<'p> {
    captioner: &'p dyn Captioner,
    encoder: &'p dyn TextEncoder,
    config: SigConfig,
    captions: Mutex<HashMap<String, TextDescription>>,
    gate: Mutex<()>,
}

impl<'p> SemanticGenerator<'p> {
    pub fn new(captioner: &'p dyn Captioner, encoder: &'p dyn TextEncoder, config: SigConfig) -> Self {
        Self { captioner, encoder, config, captions: Mutex::new(HashMap::new()), gate: Mutex::new(()) }
    }

    pub fn config(&self) -> &SigConfig {
        &self.config
    }

    /// Seed the caption cache, e.g. from a sidecar file.
    pub fn preload_caption(&self, hash: String, text: TextDescription) {
        self.captions.lock().unwrap().insert(hash, text);
    }

    pub fn cached_captions(&self) -> Vec<(String, TextDescription)> {
        let mut v: Vec<_> = self.captions.lock().unwrap().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    fn gated<T>(&self, exclusive: bool, f: impl FnOnce() -> T) -> T {
        if exclusive {
            let _g = self.gate.lock().unwrap_or_else(|e| e.into_inner());
            f()
        } else {
            f()
        }
    }

    pub fn describe(&self, image: &Image, image_id: &str) -> Result<TextDescription> {
        let hash = image.content_hash();
        if let Some(t) = self.captions.lock().unwrap().get(&hash) {
            return Ok(t.clone());
        }
        let raw = self
            .gated(self.captioner.is_exclusive(), || self.captioner.caption(image))
            .map_err(|reason| SigError::Caption { image: image_id.to_string(), reason })?;
        let text = TextDescription::new(&raw);
        if text.is_empty() {
            return Err(SigError::EmptyCaption { image: image_id.to_string() });
        }
        self.captions.lock().unwrap().insert(hash, text.clone());
        Ok(text)
    }

    pub fn keyword_for(&self, text: &TextDescription) -> Option<KeywordSpec> {
        match &self.config.keyword {
            Some(k) => Some(KeywordSpec::fixed(k.clone())),
            None => KeywordSpec::select(text, &self.config.vocabulary),
        }
    }

    pub fn mask(&self, image: &Image, text: &TextDescription, stripped: &TextDescription, denoiser: &dyn Denoiser) -> Result<BinaryMask> {
        let c = &self.config;
        self.gated(denoiser.is_exclusive(), || {
            mask_from_noise_diff(image, text, stripped, denoiser, c.noise_seed, c.noise_level, c.threshold)
        })
    }

    pub fn embed(&self, text: &TextDescription) -> Result<TextSemantics> {
        self.gated(self.encoder.is_exclusive(), || embed_text(text, self.encoder))
    }

    /// Caption from the visible image; both masks use that caption.
    pub fn generate(&self, vis: &Image, ir: &Image, pair_id: &str, denoiser: &dyn Denoiser) -> Result<PairSemantics> {
        if vis.dims() != ir.dims() {
            return Err(SigError::Shape {
                what: "pair",
                expected: vec![vis.height(), vis.width()],
                got: vec![ir.height(), ir.width()],
            });
        }
        let text = self.describe(vis, pair_id)?;
        let mut warnings = Vec::new();
        let stripped = match self.keyword_for(&text) {
            Some(spec) => {
                let (s, w) = strip_keyword(&text, &spec);
                warnings.extend(w);
                s
            }
            None => {
                warnings.push(format!("no vocabulary keyword in \"{text}\""));
                text.clone()
            }
        };
        let m_vis = self.mask(vis, &text, &stripped, denoiser)?;
        let m_ir = self.mask(ir, &text, &stripped, denoiser)?;
        let mask = union_masks(&m_vis, &m_ir)?;
        let text_semantics = self.embed(&text)?;
        Ok(PairSemantics { text, stripped, mask, text_semantics, warnings })
    }
}
