//! Image files, dataset layout, run configuration and the synthetic dataset generator.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use thiserror::Error;

use crate::image::Image;
use crate::loss::LossWeights;
use crate::metrics::{self, MetricRecord, MetricReport};
use crate::model::{ImagePair, ModelConfig, Variant};
use crate::sig::{BinaryMask, SigConfig, ThresholdPolicy};
use crate::tensor::{rng, AdamW};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {reason}")]
    Image { path: String, reason: String },
    #[error("pair `{id}`: {vis} is {vis_dims:?} but {ir} is {ir_dims:?}")]
    PairDims { id: String, vis: String, ir: String, vis_dims: (usize, usize), ir_dims: (usize, usize) },
    #[error("dataset {root}: {reason}")]
    Dataset { root: String, reason: String },
    #[error("config {path}, line {line}: {reason}")]
    Config { path: String, line: usize, reason: String },
    #[error("{path}: {source}")]
    Fs { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, IoError>;

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs { path: path.display().to_string(), source }
}

pub const IMAGE_EXTENSIONS: [&str; 5] = ["png", "pgm", "ppm", "pnm", "pam"];

/// Load an 8- or 16-bit gray or RGB PNG/PNM file as values in [0, 1].
/// Alpha is dropped; gray+alpha loads as one channel.
pub fn load_image(path: &Path) -> Result<Image> {
    let err = |reason: String| IoError::Image { path: path.display().to_string(), reason };
    let img = image::ImageReader::open(path)
        .map_err(|e| err(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| err(e.to_string()))?
        .decode()
        .map_err(|e| err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = img.color();
    let sixteen = color.bytes_per_pixel() / color.channel_count() as u8 > 1;
    let (channels, raw): (usize, Vec<f64>) = match (color.has_color(), sixteen) {
        (false, false) => (1, img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()),
        (false, true) => (1, img.to_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()),
        (true, false) => (3, img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()),
        (true, true) => (3, img.to_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()),
    };
    // interleaved HWC → planar CHW
    let mut data = vec![0.0; raw.len()];
    for (i, v) in raw.into_iter().enumerate() {
        let (pix, c) = (i / channels, i % channels);
        data[c * h * w + pix] = v;
    }
    Image::new(channels, h, w, data).map_err(|e| err(e.to_string()))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save a 1- or 3-channel image as 8-bit; format from the extension.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let err = |reason: String| IoError::Image { path: path.display().to_string(), reason };
    let (h, w) = img.dims();
    let dynamic = match img.channels() {
        1 => DynamicImage::ImageLuma8(GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([to_u8(img.get(0, y as usize, x as usize))])
        })),
        3 => DynamicImage::ImageRgb8(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([to_u8(img.get(0, y, x)), to_u8(img.get(1, y, x)), to_u8(img.get(2, y, x))])
        })),
        c => return Err(err(format!("cannot save a {c}-channel image"))),
    };
    dynamic.save(path).map_err(|e| err(e.to_string()))
}

/// Save a 16-bit gray image (PNG or PNM).
pub fn save_gray16(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = img.dims();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(img.get(0, y as usize, x as usize).clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    buf.save(path).map_err(|e| IoError::Image { path: path.display().to_string(), reason: e.to_string() })
}

/// Mask preview: foreground white.
pub fn save_mask_preview(mask: &BinaryMask, path: &Path) -> Result<()> {
    let img = Image::new(1, mask.height(), mask.width(), mask.to_f64()).expect("mask dims");
    save_image(&img, path)
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(fs_err(dir))? {
        let path = entry.map_err(fs_err(dir))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Files of one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairFiles {
    pub id: String,
    pub vis: PathBuf,
    pub ir: PathBuf,
    pub mask: Option<PathBuf>,
    pub caption: Option<PathBuf>,
}

/// `root/vis/<id>.*`, `root/ir/<id>.*`, optional `root/masks/<id>.msk`,
/// `root/captions/<id>.txt` and `root/regions.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetLayout {
    pub root: PathBuf,
    /// Sorted by id.
    pub pairs: Vec<PairFiles>,
    /// Ids with only one modality.
    pub unmatched: Vec<String>,
}

impl DatasetLayout {
    pub fn scan(root: &Path) -> Result<Self> {
        let dataset_err = |reason: String| IoError::Dataset { root: root.display().to_string(), reason };
        let (vis_dir, ir_dir) = (root.join("vis"), root.join("ir"));
        if !vis_dir.is_dir() || !ir_dir.is_dir() {
            return Err(dataset_err("expected vis/ and ir/ subdirectories".into()));
        }
        let vis = list_images(&vis_dir)?;
        let ir = list_images(&ir_dir)?;
        let mut pairs = Vec::new();
        let mut unmatched = Vec::new();
        for (id, v) in &vis {
            match ir.get(id) {
                Some(i) => {
                    let mask = root.join("masks").join(format!("{id}.msk"));
                    let caption = root.join("captions").join(format!("{id}.txt"));
                    pairs.push(PairFiles {
                        id: id.clone(),
                        vis: v.clone(),
                        ir: i.clone(),
                        mask: mask.is_file().then_some(mask),
                        caption: caption.is_file().then_some(caption),
                    });
                }
                None => unmatched.push(id.clone()),
            }
        }
        unmatched.extend(ir.keys().filter(|id| !vis.contains_key(*id)).cloned());
        unmatched.sort();
        if pairs.is_empty() {
            return Err(dataset_err("no vis/ir pairs found".into()));
        }
        Ok(Self { root: root.to_path_buf(), pairs, unmatched })
    }

    pub fn regions_file(&self) -> PathBuf {
        self.root.join("regions.txt")
    }
}

/// Load a pair; gray visible images are replicated to three channels and RGB
/// infrared images reduced to luminance.
pub fn load_pair(files: &PairFiles) -> Result<ImagePair> {
    let vis = load_image(&files.vis)?;
    let ir = load_image(&files.ir)?;
    if vis.dims() != ir.dims() {
        return Err(IoError::PairDims {
            id: files.id.clone(),
            vis: files.vis.display().to_string(),
            ir: files.ir.display().to_string(),
            vis_dims: vis.dims(),
            ir_dims: ir.dims(),
        });
    }
    let vis = if vis.channels() == 1 { Image::from_fn(3, vis.height(), vis.width(), |_, y, x| vis.get(0, y, x)) } else { vis };
    let ir = ir.luminance();
    ImagePair::new(files.id.clone(), vis, ir).map_err(|e| IoError::Dataset {
        root: files.vis.display().to_string(),
        reason: e.to_string(),
    })
}

/// Rectangles per pair id: lines `id top left height width`, `#` comments.
pub fn read_regions(path: &Path) -> Result<HashMap<String, Vec<[usize; 4]>>> {
    let text = fs::read_to_string(path).map_err(fs_err(path))?;
    let mut out: HashMap<String, Vec<[usize; 4]>> = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || IoError::Config {
            path: path.display().to_string(),
            line: n + 1,
            reason: "expected `id top left height width`".into(),
        };
        if parts.len() != 5 {
            return Err(bad());
        }
        let nums: Vec<usize> = parts[1..].iter().map(|p| p.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        out.entry(parts[0].to_string()).or_default().push([nums[0], nums[1], nums[2], nums[3]]);
    }
    Ok(out)
}

/// Union of rectangles as an `h×w` mask.
pub fn region_mask(h: usize, w: usize, rects: &[[usize; 4]]) -> BinaryMask {
    BinaryMask::from_fn(h, w, |y, x| rects.iter().any(|r| y >= r[0] && y < r[0] + r[2] && x >= r[1] && x < r[1] + r[3]))
}

/// Every key of the run configuration with its default and meaning.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "seed for initialization, crops, shuffling and mask noise"),
    ("variant", "full", "full | no-mgca | no-tivr | no-gaf"),
    ("patch", "4", "patch size p"),
    ("dim", "64", "token width D"),
    ("heads", "4", "attention heads h"),
    ("text_dim", "64", "text embedding width D_t"),
    ("depth", "4", "transformer blocks per encoder and in the decoder"),
    ("gate_kernel", "3", "gate convolution kernel (odd)"),
    ("base_size", "96", "image side the position tables are stored for"),
    ("epochs", "140", "training epochs"),
    ("batch_size", "8", "pairs per optimizer step"),
    ("crop", "96", "random crop side"),
    ("lr", "0.0001", "AdamW learning rate"),
    ("beta1", "0.9", "AdamW beta1"),
    ("beta2", "0.999", "AdamW beta2"),
    ("eps", "1e-8", "AdamW epsilon"),
    ("weight_decay", "0.01", "AdamW decoupled weight decay"),
    ("cosine", "false", "cosine learning-rate decay to zero"),
    ("steps", "0", "total optimizer steps; 0 derives epochs x ceil(pairs/batch)"),
    ("checkpoint_every", "0", "checkpoint cadence in steps; 0 writes only the final one"),
    ("w_ssim", "1", "SSIM loss weight"),
    ("w_grad", "10", "gradient loss weight"),
    ("w_int", "10", "intensity loss weight"),
    ("w_color", "5", "colour loss weight"),
    ("keyword", "", "fixed keyword to strip; empty selects from the vocabulary"),
    ("vocabulary", "person,people,car,bike,bicycle,bus,truck,motorcycle", "candidate keywords, comma separated"),
    ("noise_level", "0.5", "std of the Gaussian noise added before denoising"),
    ("threshold", "otsu", "otsu | a fixed value in [0,1]"),
    ("caption_fallback", "", "caption used when a pair has no captions/<id>.txt"),
    ("jobs", "1", "worker threads for fuse and eval"),
];

/// Parsed run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub sig: SigConfig,
    pub caption_fallback: Option<String>,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::parse("", Path::new("<defaults>")).expect("defaults parse")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(fs_err(path))?;
        Self::parse(&text, path)
    }

    /// `key = value` lines; `#` starts a comment. Unknown or repeated keys are rejected.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut values: BTreeMap<&str, (String, usize)> =
            CONFIG_KEYS.iter().map(|(k, d, _)| (*k, (d.to_string(), 0))).collect();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| IoError::Config { path: path.display().to_string(), line: n + 1, reason };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            let (k, v) = (k.trim(), v.trim());
            let slot = values.get_mut(k).ok_or_else(|| err(format!("unknown key `{k}`")))?;
            if seen.insert(k.to_string(), n + 1).is_some() {
                return Err(err(format!("key `{k}` given twice")));
            }
            *slot = (v.to_string(), n + 1);
        }

        let get = |k: &str| -> (&str, usize) {
            let (v, l) = &values[k];
            (v.as_str(), *l)
        };
        let err = |k: &str, what: &str| {
            let (v, l) = get(k);
            IoError::Config { path: path.display().to_string(), line: l, reason: format!("`{k}`: {what}, got `{v}`") }
        };
        let uint = |k: &str| get(k).0.parse::<u64>().map_err(|_| err(k, "expected a non-negative integer"));
        let float = |k: &str| {
            get(k).0.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| err(k, "expected a finite number"))
        };
        let boolean = |k: &str| match get(k).0 {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(err(k, "expected true or false")),
        };
        let text_opt = |k: &str| Some(get(k).0.to_string()).filter(|s| !s.is_empty());

        let seed = uint("seed")?;
        let model = ModelConfig {
            patch: uint("patch")? as usize,
            dim: uint("dim")? as usize,
            heads: uint("heads")? as usize,
            text_dim: uint("text_dim")? as usize,
            depth: uint("depth")? as usize,
            gate_kernel: uint("gate_kernel")? as usize,
            base_size: uint("base_size")? as usize,
            seed,
        };
        let variant: Variant = get("variant").0.parse().map_err(|e: String| err("variant", &e))?;
        let weights =
            LossWeights { ssim: float("w_ssim")?, grad: float("w_grad")?, int: float("w_int")?, color: float("w_color")? };
        let steps = uint("steps")?;
        let train = TrainConfig {
            model,
            variant,
            epochs: uint("epochs")? as usize,
            batch_size: uint("batch_size")? as usize,
            crop: uint("crop")? as usize,
            lr: float("lr")?,
            cosine: boolean("cosine")?,
            optimizer: AdamW {
                lr: float("lr")?,
                beta1: float("beta1")?,
                beta2: float("beta2")?,
                eps: float("eps")?,
                weight_decay: float("weight_decay")?,
            },
            seed,
            weights,
            steps: (steps > 0).then_some(steps),
            checkpoint_every: uint("checkpoint_every")?,
        };
        train.validate().map_err(|e| IoError::Config { path: path.display().to_string(), line: 0, reason: e.to_string() })?;
        let threshold = match get("threshold").0 {
            "otsu" => ThresholdPolicy::Otsu,
            s => ThresholdPolicy::Fixed(
                s.parse().ok().filter(|t: &f64| (0.0..=1.0).contains(t)).ok_or_else(|| err("threshold", "expected otsu or a value in [0,1]"))?,
            ),
        };
        let sig = SigConfig {
            vocabulary: get("vocabulary").0.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            keyword: text_opt("keyword"),
            noise_level: float("noise_level")?,
            noise_seed: seed,
            threshold,
        };
        let jobs = uint("jobs")?.max(1) as usize;
        Ok(Self { train, sig, caption_fallback: text_opt("caption_fallback"), jobs })
    }

    /// Reference page: every key, its default and meaning.
    pub fn reference() -> String {
        let mut s = String::new();
        for (k, d, help) in CONFIG_KEYS {
            let _ = writeln!(s, "{k} = {d}\t# {help}");
        }
        s
    }
}

/// One generated scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub pair: ImagePair,
    pub caption: String,
    /// `[top, left, height, width]` of the hot target.
    pub region: [usize; 4],
}

/// Textured visible scene with a coloured target and an infrared image that
/// shares the scene structure and shows the target hot.
pub fn synth_pair(id: &str, seed: u64, h: usize, w: usize) -> SynthPair {
    use rand::Rng;
    let mut r = rng::stream(seed, &[rng::label("synth"), rng::label(id)]);
    let th = r.random_range(h / 5..=h / 3).max(1);
    let tw = r.random_range(w / 6..=w / 3).max(1);
    let top = r.random_range(0..=h - th);
    let left = r.random_range(0..=w - tw);
    let (fx, fy) = (r.random_range(0.05..0.2), r.random_range(0.05..0.2));
    let phase: f64 = r.random_range(0.0..6.28);
    let tint = [r.random_range(0.3..0.9), r.random_range(0.3..0.9), r.random_range(0.3..0.9)];
    let target_color = [r.random_range(0.6..1.0), r.random_range(0.0..0.4), r.random_range(0.0..0.4)];
    let road = h * 2 / 3;
    let inside = |y: usize, x: usize| y >= top && y < top + th && x >= left && x < left + tw;
    let base = |y: usize, x: usize| {
        let stripes = 0.5 + 0.25 * ((x as f64) * fx + phase).sin() * ((y as f64) * fy).cos();
        if y >= road {
            0.25 + 0.1 * stripes
        } else {
            stripes
        }
    };
    let vis = Image::from_fn(3, h, w, |c, y, x| {
        if inside(y, x) {
            target_color[c]
        } else {
            (base(y, x) * tint[c]).clamp(0.0, 1.0)
        }
    });
    let ir = Image::from_fn(1, h, w, |_, y, x| if inside(y, x) { 0.95 } else { 0.2 + 0.4 * base(y, x) });
    let subject = if r.random_bool(0.5) { "car" } else { "person" };
    let caption = if subject == "car" { "a car parked on a street" } else { "a person walking near a building" };
    SynthPair {
        pair: ImagePair::new(id, vis, ir).expect("synthetic pair shapes"),
        caption: caption.to_string(),
        region: [top, left, th, tw],
    }
}

/// Write `n` synthetic pairs under `root` in the dataset layout, with captions and regions.
pub fn write_synth_dataset(root: &Path, n: usize, size: usize, seed: u64) -> Result<Vec<SynthPair>> {
    for d in ["vis", "ir", "captions"] {
        let p = root.join(d);
        fs::create_dir_all(&p).map_err(fs_err(&p))?;
    }
    let mut regions = String::from("# id top left height width\n");
    let mut out = Vec::new();
    for i in 0..n {
        let id = format!("{i:04}");
        let s = synth_pair(&id, seed, size, size);
        save_image(&s.pair.vis, &root.join("vis").join(format!("{id}.png")))?;
        save_image(&s.pair.ir, &root.join("ir").join(format!("{id}.png")))?;
        let cap = root.join("captions").join(format!("{id}.txt"));
        fs::write(&cap, format!("{}\n", s.caption)).map_err(fs_err(&cap))?;
        let [t, l, h, w] = s.region;
        let _ = writeln!(regions, "{id} {t} {l} {h} {w}");
        out.push(s);
    }
    let rp = root.join("regions.txt");
    fs::write(&rp, regions).map_err(fs_err(&rp))?;
    Ok(out)
}

/// Metrics for every id present in all three directories, `jobs` workers.
/// Ids missing from any directory, or that fail to load or evaluate, are listed as skipped.
pub fn evaluate_dataset(fused_dir: &Path, vis_dir: &Path, ir_dir: &Path, jobs: usize) -> Result<MetricReport> {
    let fused = list_images(fused_dir)?;
    let vis = list_images(vis_dir)?;
    let ir = list_images(ir_dir)?;
    let mut skipped: Vec<String> = Vec::new();
    let mut ids = Vec::new();
    for id in fused.keys().chain(vis.keys()).chain(ir.keys()).collect::<std::collections::BTreeSet<_>>() {
        if fused.contains_key(id) && vis.contains_key(id) && ir.contains_key(id) {
            ids.push(id.clone());
        } else {
            skipped.push(id.clone());
        }
    }
    let eval_one = |id: &String| -> std::result::Result<MetricRecord, String> {
        let f = load_image(&fused[id]).map_err(|e| e.to_string())?;
        let files = PairFiles { id: id.clone(), vis: vis[id].clone(), ir: ir[id].clone(), mask: None, caption: None };
        let pair = load_pair(&files).map_err(|e| e.to_string())?;
        if f.dims() != pair.dims() {
            return Err(format!("fused {:?} vs sources {:?}", f.dims(), pair.dims()));
        }
        metrics::evaluate(id, &f, &pair.vis, &pair.ir).map_err(|e| e.to_string())
    };
    let jobs = jobs.clamp(1, ids.len().max(1));
    let chunk = ids.len().div_ceil(jobs).max(1);
    let results: Vec<(String, std::result::Result<MetricRecord, String>)> = std::thread::scope(|s| {
        let handles: Vec<_> = ids
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|id| (id.clone(), eval_one(id))).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("metric worker panicked")).collect()
    });
    let mut records = Vec::new();
    for (id, r) in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => skipped.push(format!("{id}: {e}")),
        }
    }
    Ok(MetricReport::new(records, skipped))
}
