//! Dataset loading and semantic preparation shared by the commands.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use textfuse::io::{self, DatasetLayout};
use textfuse::model::{ImagePair, Semantics};
use textfuse::sig::fixtures::{HashTextEncoder, LookupCaptioner, PlantedRegionDenoiser};
use textfuse::sig::{self, MaskProvenance, MaskSemantics, PairSemantics, SemanticGenerator, TextDescription};
use textfuse::train::TrainSample;

use crate::CliError;

/// A loaded pair with its masks, captions and text embeddings.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub pair: ImagePair,
    pub semantics: PairSemantics,
}

impl PreparedPair {
    pub fn model_semantics(&self) -> Semantics {
        Semantics { mask: self.semantics.mask.clone(), text: self.semantics.text_semantics.clone() }
    }
}

pub fn load_pairs(layout: &DatasetLayout) -> Result<Vec<ImagePair>, CliError> {
    layout.pairs.iter().map(|f| io::load_pair(f).map_err(CliError::from)).collect()
}

/// Captions come from `captions/<id>.txt` (or the configured fallback) through
/// the lookup captioner; masks from `masks/<id>.msk` when present, otherwise
/// from the planted-region denoiser driven by `regions.txt`.
pub fn prepare(layout: &DatasetLayout, pairs: Vec<ImagePair>, cfg: &io::RunConfig) -> Result<Vec<PreparedPair>, CliError> {
    let mut captioner = match &cfg.caption_fallback {
        Some(c) => LookupCaptioner::with_fallback(c.clone()),
        None => LookupCaptioner::new(),
    };
    for (files, pair) in layout.pairs.iter().zip(&pairs) {
        if let Some(path) = &files.caption {
            let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            captioner.insert(&pair.vis, text.trim());
        }
    }
    let encoder = HashTextEncoder::new(cfg.train.model.text_dim);
    let regions = if layout.regions_file().is_file() { io::read_regions(&layout.regions_file())? } else { HashMap::new() };
    let generator = SemanticGenerator::new(&captioner, &encoder, cfg.sig.clone());

    let mut out = Vec::with_capacity(pairs.len());
    for (files, pair) in layout.pairs.iter().zip(pairs) {
        let text = generator.describe(&pair.vis, &pair.id)?;
        let spec = generator.keyword_for(&text);
        let semantics = match &files.mask {
            Some(path) => {
                let mask = sig::read_mask(path)?;
                if mask.dims() != pair.dims() {
                    return Err(CliError::Runtime(format!(
                        "{}: mask is {:?}, pair `{}` is {:?}",
                        path.display(),
                        mask.dims(),
                        pair.id,
                        pair.dims()
                    )));
                }
                let (stripped, warning) = match &spec {
                    Some(s) => sig::strip_keyword(&text, s),
                    None => (text.clone(), None),
                };
                PairSemantics {
                    text_semantics: generator.embed(&text)?,
                    mask: MaskSemantics::from_mask(mask, MaskProvenance::Union),
                    text,
                    stripped,
                    warnings: warning.into_iter().collect(),
                }
            }
            None => {
                let (h, w) = pair.dims();
                let rects = regions.get(&pair.id).map(Vec::as_slice).unwrap_or(&[]);
                let keyword = spec.map(|s| s.keyword).unwrap_or_default();
                let denoiser = PlantedRegionDenoiser::new(keyword, io::region_mask(h, w, rects));
                generator.generate(&pair.vis, &pair.ir, &pair.id, &denoiser)?
            }
        };
        for w in &semantics.warnings {
            eprintln!("warning: {}: {w}", pair.id);
        }
        out.push(PreparedPair { pair, semantics });
    }
    Ok(out)
}

pub fn load_prepared(root: &Path, cfg: &io::RunConfig) -> Result<(DatasetLayout, Vec<PreparedPair>), CliError> {
    let layout = DatasetLayout::scan(root)?;
    for id in &layout.unmatched {
        eprintln!("warning: `{id}` has no counterpart in the other modality; skipped");
    }
    let pairs = load_pairs(&layout)?;
    let prepared = prepare(&layout, pairs, cfg)?;
    Ok((layout, prepared))
}

pub fn train_samples(prepared: &[PreparedPair]) -> Vec<TrainSample> {
    prepared.iter().map(|p| TrainSample { pair: p.pair.clone(), semantics: p.model_semantics() }).collect()
}

/// Caption cache entries keyed by visible-image content hash, sorted.
pub fn caption_entries(prepared: &[PreparedPair]) -> Vec<(String, TextDescription)> {
    let mut v: Vec<_> = prepared.iter().map(|p| (p.pair.vis.content_hash(), p.semantics.text.clone())).collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v.dedup_by(|a, b| a.0 == b.0);
    v
}
