//! Deterministic stand-ins for the pretrained captioner, text encoder and denoiser.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::{BinaryMask, Captioner, Denoiser, TextDescription, TextEncoder};
use crate::image::Image;
use crate::tensor::{rng, Tensor};

/// Captions looked up by image content hash, with an optional fallback.
#[derive(Clone, Debug, Default)]
pub struct LookupCaptioner {
    by_hash: HashMap<String, String>,
    fallback: Option<String>,
}

impl LookupCaptioner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fallback(caption: impl Into<String>) -> Self {
        Self { by_hash: HashMap::new(), fallback: Some(caption.into()) }
    }

    pub fn insert(&mut self, image: &Image, caption: impl Into<String>) {
        self.by_hash.insert(image.content_hash(), caption.into());
    }

    pub fn insert_hash(&mut self, hash: impl Into<String>, caption: impl Into<String>) {
        self.by_hash.insert(hash.into(), caption.into());
    }
}

impl Captioner for LookupCaptioner {
    fn caption(&self, image: &Image) -> Result<String, String> {
        let hash = image.content_hash();
        self.by_hash
            .get(&hash)
            .or(self.fallback.as_ref())
            .cloned()
            .ok_or_else(|| format!("no caption for image hash {hash}"))
    }
}

/// Each token maps to a standard-normal vector seeded by the SHA-256 of its
/// lowercase bytes, so equal tokens embed identically.
#[derive(Clone, Copy, Debug)]
pub struct HashTextEncoder {
    pub dim: usize,
}

impl HashTextEncoder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let digest = Sha256::digest(token.to_lowercase().as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
        rng::normal_vec(&mut rng::stream(seed, &[self.dim as u64]), self.dim)
    }
}

impl TextEncoder for HashTextEncoder {
    fn encode(&self, text: &TextDescription) -> Result<Tensor, String> {
        let data = text.tokens().iter().flat_map(|t| self.token_vector(t)).collect();
        Tensor::new([text.len(), self.dim], data).map_err(|e| e.to_string())
    }
}

/// Predicts half the noisy input, plus `strength` inside a planted region
/// whenever the conditioning text mentions the keyword. Conditioning on a
/// caption and on its keyword-stripped form therefore differs exactly on the
/// region.
#[derive(Clone, Debug)]
pub struct PlantedRegionDenoiser {
    pub keyword: String,
    pub region: BinaryMask,
    pub strength: f64,
}

impl PlantedRegionDenoiser {
    pub fn new(keyword: impl Into<String>, region: BinaryMask) -> Self {
        Self { keyword: keyword.into(), region, strength: 1.0 }
    }
}

impl Denoiser for PlantedRegionDenoiser {
    fn estimate(&self, noisy: &Image, text: &TextDescription, _noise_level: f64) -> Result<Image, String> {
        if noisy.dims() != self.region.dims() {
            return Err(format!(
                "planted region is {}x{}, image is {}x{}",
                self.region.height(),
                self.region.width(),
                noisy.height(),
                noisy.width()
            ));
        }
        let boost = if text.contains_word(&self.keyword) { self.strength } else { 0.0 };
        let region = &self.region;
        Ok(Image::from_fn(noisy.channels(), noisy.height(), noisy.width(), |c, y, x| {
            0.5 * noisy.get(c, y, x) + if region.get(y, x) { boost } else { 0.0 }
        }))
    }
}
