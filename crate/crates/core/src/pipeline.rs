//! Dataset synthesis and ingestion, two-phase training, checkpoints and the
//! end-to-end inpainting path.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{write_atomic, TensorArchive};
use crate::encoders::{
    concat_latent, encode_attributes, encode_identity, load_encoder, resize_node, EncoderBackend, EncoderRole, LatentZ,
    MlpEncoder,
};
use crate::error::{Error, Result};
use crate::generator::{generate, load_generator, sample_prior, GeneratorBackend};
use crate::graph::{Graph, Var};
use crate::imaging::{
    apply_mask, build_periocular_mask, crop_window, filter_sample, Image, LandmarkDetector, LandmarkSet, MarginConfig,
    Mask, PoseEstimator, TemplateLandmarks,
};
use crate::inversion::{invert, objective_at, InversionConfig, InversionResult};
use crate::latent::{
    adv_loss_d_graph, adv_loss_g_graph, map_to_w, mean_of, LatentDiscriminator, Mapper, StyleW, DEFAULT_GAMMA,
    DEFAULT_MAPPER_LAYERS, MAPPER_DEPTHS,
};
use crate::losses::{loss_total, training_components_graph, LossBackends, LossBundle, LossComponents, LossWeights};
use crate::metrics::{verification_curves, PairList, VerificationCurves};
use crate::nn::{seeded_rng, Adam, AdamConfig};
use crate::tensor::Tensor;

/// Fraction of synthetic samples held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.1;
pub const DEFAULT_CHECKPOINT_EVERY: u64 = 500;
pub const DEFAULT_ADV_WEIGHT: f64 = 0.1;
pub const LOG_COLUMNS: [&str; 8] = [
    "step", "l_perc", "l_style", "l_id", "l_lnd", "l_rec", "l_adv_g", "l_total",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Synthetic pairs with known `w`; the latent discriminator trains.
    StyleGanDb,
    /// Real faces, no `w`; the discriminator is frozen.
    RealImages,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::StyleGanDb => "stylegandb",
            Phase::RealImages => "real-images",
        }
    }

    pub fn trains_discriminator(self) -> bool {
        self == Phase::StyleGanDb
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stylegandb" => Ok(Phase::StyleGanDb),
            "real-images" => Ok(Phase::RealImages),
            _ => Err(Error::Config(format!("unknown phase `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub mapper_layers: usize,
    pub gamma: f64,
    /// Weight of the generator-side adversarial term in the objective.
    pub adv_weight: f64,
    pub seed: u64,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub generator: String,
    pub identity: String,
    pub attribute: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            phase: Phase::StyleGanDb,
            batch_size: 16,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weights: LossWeights::default(),
            mapper_layers: DEFAULT_MAPPER_LAYERS,
            gamma: DEFAULT_GAMMA,
            adv_weight: DEFAULT_ADV_WEIGHT,
            seed: 0,
            steps: 1000,
            checkpoint_every: DEFAULT_CHECKPOINT_EVERY,
            manifest: None,
            out_dir: PathBuf::from("run"),
            generator: "toy".into(),
            identity: "toy".into(),
            attribute: "toy".into(),
        }
    }
}

/// Keys that do not affect what a step computes; left out of the hash so a
/// run can be extended or moved on resume.
const UNHASHED_KEYS: [&str; 3] = ["steps", "out_dir", "checkpoint.every"];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

impl RunConfig {
    /// Flat `key = value` lines; `#` starts a comment.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_str(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let w = &mut self.weights;
        match key {
            "phase" => self.phase = v.parse()?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "adam.beta1" => self.beta1 = parse(key, v)?,
            "adam.beta2" => self.beta2 = parse(key, v)?,
            "loss.id" => w.id = parse(key, v)?,
            "loss.lnd" => w.lnd = parse(key, v)?,
            "loss.perc" => w.perc = parse(key, v)?,
            "loss.style" => w.style = parse(key, v)?,
            "loss.rec" => w.rec = parse(key, v)?,
            "loss.perc_o" => w.perc_o = parse(key, v)?,
            "loss.id_o" => w.id_o = parse(key, v)?,
            "loss.alpha" => w.alpha = parse(key, v)?,
            "mapper.n_layers" => self.mapper_layers = parse(key, v)?,
            "adv.gamma" => self.gamma = parse(key, v)?,
            "adv.weight" => self.adv_weight = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "checkpoint.every" => self.checkpoint_every = parse(key, v)?,
            "data.manifest" => self.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "backend.generator" => self.generator = v.to_string(),
            "backend.identity" => self.identity = v.to_string(),
            "backend.attribute" => self.attribute = v.to_string(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("adv.gamma must be ≥ 0, got {}", self.gamma)));
        }
        if !(self.adv_weight >= 0.0 && self.adv_weight.is_finite()) {
            return Err(Error::Config(format!(
                "adv.weight must be ≥ 0, got {}",
                self.adv_weight
            )));
        }
        if self.checkpoint_every < 1 {
            return Err(Error::Config("checkpoint.every must be at least 1".into()));
        }
        self.weights.validate()?;
        if !MAPPER_DEPTHS.contains(&self.mapper_layers) {
            return Err(Error::Config(format!(
                "mapper.n_layers must be one of {MAPPER_DEPTHS:?}, got {}",
                self.mapper_layers
            )));
        }
        Ok(())
    }

    fn entries(&self) -> BTreeMap<&'static str, String> {
        let w = &self.weights;
        BTreeMap::from([
            ("phase", self.phase.as_str().to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("adam.beta1", self.beta1.to_string()),
            ("adam.beta2", self.beta2.to_string()),
            ("loss.id", w.id.to_string()),
            ("loss.lnd", w.lnd.to_string()),
            ("loss.perc", w.perc.to_string()),
            ("loss.style", w.style.to_string()),
            ("loss.rec", w.rec.to_string()),
            ("loss.perc_o", w.perc_o.to_string()),
            ("loss.id_o", w.id_o.to_string()),
            ("loss.alpha", w.alpha.to_string()),
            ("mapper.n_layers", self.mapper_layers.to_string()),
            ("adv.gamma", self.gamma.to_string()),
            ("adv.weight", self.adv_weight.to_string()),
            ("seed", self.seed.to_string()),
            ("steps", self.steps.to_string()),
            ("checkpoint.every", self.checkpoint_every.to_string()),
            (
                "data.manifest",
                self.manifest
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("out_dir", self.out_dir.display().to_string()),
            ("backend.generator", self.generator.clone()),
            ("backend.identity", self.identity.clone()),
            ("backend.attribute", self.attribute.clone()),
        ])
    }

    /// Canonical text form, keys sorted.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 over the canonical form of every key that affects training.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !UNHASHED_KEYS.contains(&k) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub gt: PathBuf,
    pub mask: PathBuf,
    pub crop: PathBuf,
    pub w: Option<PathBuf>,
    pub split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    gt: String,
    mask: String,
    crop: String,
    w: String,
    split: Split,
}

/// Sample records; paths are stored relative to `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn split(&self, s: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == s)
    }

    pub fn counts(&self) -> (usize, usize) {
        let t = self.split(Split::Train).count();
        (t, self.records.len() - t)
    }

    pub fn has_latents(&self) -> bool {
        self.records.iter().all(|r| r.w.is_some())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let s = |p: &Path| p.to_string_lossy().replace('\\', "/");
        for r in &self.records {
            w.serialize(ManifestRow {
                gt: s(&r.gt),
                mask: s(&r.mask),
                crop: s(&r.crop),
                w: r.w.as_deref().map(s).unwrap_or_default(),
                split: r.split,
            })?;
        }
        w.into_inner().map_err(|e| Error::InvalidValue(e.to_string()))
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        write_atomic(&path, &self.to_csv()?)?;
        Ok(path)
    }

    /// Read a manifest CSV; `root` is its directory. Every referenced file
    /// must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(text.as_slice());
        let mut records = Vec::new();
        for row in r.deserialize::<ManifestRow>() {
            let row = row?;
            records.push(ManifestRecord {
                gt: row.gt.into(),
                mask: row.mask.into(),
                crop: row.crop.into(),
                w: (!row.w.is_empty()).then(|| PathBuf::from(row.w)),
                split: row.split,
            });
        }
        let m = Self { root, records };
        for r in &m.records {
            for p in [Some(&r.gt), Some(&r.mask), Some(&r.crop), r.w.as_ref()]
                .into_iter()
                .flatten()
            {
                let full = m.resolve(p);
                if !full.is_file() {
                    return Err(Error::io(&full, std::io::Error::from(std::io::ErrorKind::NotFound)));
                }
            }
        }
        Ok(m)
    }
}

const SPLIT_SALT: u64 = 0x5eed_0000_0090_0010;

/// Deterministic train/validation assignment: `⌊count/10⌋` validation
/// samples chosen by a seeded shuffle.
pub fn split_assignment(count: usize, seed: u64) -> Vec<Split> {
    let n_val = (count as f64 * VALIDATION_FRACTION).floor() as usize;
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut seeded_rng(seed ^ SPLIT_SALT));
    let mut out = vec![Split::Train; count];
    for &i in &idx[..n_val] {
        out[i] = Split::Val;
    }
    out
}

/// Per-sample file names inside a dataset directory.
fn sample_paths(name: &str) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    (
        Path::new("images").join(format!("{name}.png")),
        Path::new("masks").join(format!("{name}.png")),
        Path::new("crops").join(format!("{name}.png")),
        Path::new("latents").join(format!("{name}.pfnt")),
    )
}

/// Removes every file it tracked unless disarmed.
struct Cleanup {
    files: Vec<PathBuf>,
    armed: bool,
}

impl Cleanup {
    fn new() -> Self {
        Self {
            files: Vec::new(),
            armed: true,
        }
    }

    fn track(&mut self, p: PathBuf) {
        self.files.push(p);
    }
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        if self.armed {
            for f in &self.files {
                let _ = fs::remove_file(f);
            }
        }
    }
}

/// Landmarks, mask and crop used for every synthetic or ingested sample.
#[derive(Debug, Clone, Copy)]
pub struct MaskingOptions {
    pub margins: MarginConfig,
    pub crop_dims: (usize, usize),
}

impl Default for MaskingOptions {
    fn default() -> Self {
        Self {
            margins: MarginConfig::default(),
            crop_dims: crate::encoders::TOY_ID_RESOLUTION,
        }
    }
}

/// Supplies the binary mask for an image; periocular masks are the default.
pub trait MaskProvider: Send + Sync {
    fn mask(&self, image: &Image, landmarks: &LandmarkSet) -> Result<Mask>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PeriocularMasks {
    pub margins: MarginConfig,
}

impl MaskProvider for PeriocularMasks {
    fn mask(&self, image: &Image, landmarks: &LandmarkSet) -> Result<Mask> {
        build_periocular_mask(landmarks, image.dims(), &self.margins)
    }
}

/// The masked input and identity crop derived from `mask`.
pub fn masked_views(image: &Image, mask: &Mask, crop_dims: (usize, usize)) -> Result<(Image, Image)> {
    let win = mask
        .visible_window()
        .ok_or_else(|| Error::DegenerateMask("mask keeps no pixels".into()))?;
    Ok((apply_mask(image, mask)?, crop_window(image, win, crop_dims)?))
}

/// Draw `count` samples from the generator prior and write image, mask,
/// crop and true `w` for each, plus `manifest.csv`, under `out_dir`. On
/// failure every file written so far is removed.
pub fn synthesize_stylegandb(
    count: usize,
    seed: u64,
    backend: &dyn GeneratorBackend,
    out_dir: &Path,
    opts: &MaskingOptions,
) -> Result<DatasetManifest> {
    let mut cleanup = Cleanup::new();
    let manifest = synthesize_into(count, seed, backend, out_dir, opts, &mut cleanup)?;
    cleanup.armed = false;
    Ok(manifest)
}

fn synthesize_into(
    count: usize,
    seed: u64,
    backend: &dyn GeneratorBackend,
    out_dir: &Path,
    opts: &MaskingOptions,
    cleanup: &mut Cleanup,
) -> Result<DatasetManifest> {
    let samples = sample_prior(count, seed, backend)?;
    let (h, w) = backend.resolution();
    let landmarks = TemplateLandmarks::for_dims(h, w);
    let mask = build_periocular_mask(&landmarks, (h, w), &opts.margins)?;
    for sub in ["images", "masks", "crops", "latents"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let splits = split_assignment(count, seed);
    let mut records = Vec::with_capacity(count);
    for (i, s) in samples.iter().enumerate() {
        let (gt_p, mask_p, crop_p, w_p) = sample_paths(&format!("{i:06}"));
        let (_, crop) = masked_views(&s.image, &mask, opts.crop_dims)?;
        cleanup.track(out_dir.join(&gt_p));
        s.image.save_png(&out_dir.join(&gt_p))?;
        cleanup.track(out_dir.join(&mask_p));
        mask.save_png(&out_dir.join(&mask_p))?;
        cleanup.track(out_dir.join(&crop_p));
        crop.save_png(&out_dir.join(&crop_p))?;
        let mut a = TensorArchive::new();
        a.insert("w", s.w.to_tensor());
        a.insert("noise", Tensor::vector(s.noise.clone()));
        a.meta.insert("seed".into(), seed.to_string());
        a.meta.insert("index".into(), i.to_string());
        cleanup.track(out_dir.join(&w_p));
        a.save(&out_dir.join(&w_p))?;
        records.push(ManifestRecord {
            gt: gt_p,
            mask: mask_p,
            crop: crop_p,
            w: Some(w_p),
            split: splits[i],
        });
    }
    let m = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
    };
    cleanup.track(out_dir.join(MANIFEST_FILE));
    m.save()?;
    log::info!("synthesized {count} samples into {}", out_dir.display());
    Ok(m)
}

/// Load the true `w` stored for a synthetic sample.
pub fn load_latent(path: &Path) -> Result<StyleW> {
    StyleW::new(TensorArchive::load(path)?.require("w")?.data().to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    pub file: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Working resolution every face is resized to.
    pub resolution: (usize, usize),
    pub masking: MaskingOptions,
    pub seed: u64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            resolution: crate::generator::TOY_RESOLUTION,
            masking: MaskingOptions::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub manifest: DatasetManifest,
    pub rejections: Vec<Rejection>,
}

/// Resize, landmark, pose-filter, mask and crop every PNG in `image_dir`.
/// Unreadable or filtered files are logged to `rejections.csv` and skipped.
pub fn ingest_real_dataset(
    image_dir: &Path,
    out_dir: &Path,
    landmarks: &dyn LandmarkDetector,
    pose: &dyn PoseEstimator,
    opts: &IngestOptions,
) -> Result<IngestReport> {
    let mut files: Vec<PathBuf> = fs::read_dir(image_dir)
        .map_err(|e| Error::io(image_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|x| x.to_string_lossy().eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    for sub in ["images", "masks", "crops"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let (h, w) = opts.resolution;
    let mut rejections = Vec::new();
    let mut kept = Vec::new();
    for f in &files {
        let name = f
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut reject = |reason: String| {
            log::warn!("rejecting {name}: {reason}");
            rejections.push(Rejection {
                file: name.clone(),
                reason,
            });
        };
        let img = match Image::load_png(f) {
            Ok(i) => i,
            Err(e) => {
                reject(format!("unreadable: {e}"));
                continue;
            }
        };
        let angles = pose.estimate(&img);
        let img = img.resized(h, w).with_provenance(f);
        let lm = landmarks.detect(&img);
        if !filter_sample(&angles, lm.as_ref()) {
            let why = match lm {
                None => "no landmarks".to_string(),
                Some(_) => format!("pose {:.1}° exceeds limit", angles.max_abs()),
            };
            reject(why);
            continue;
        }
        let lm = lm.expect("filter_sample requires landmarks");
        let views = build_periocular_mask(&lm, (h, w), &opts.masking.margins)
            .and_then(|m| masked_views(&img, &m, opts.masking.crop_dims).map(|(_, c)| (m, c)));
        match views {
            Ok((m, c)) => kept.push((f.file_stem().unwrap().to_string_lossy().into_owned(), img, m, c)),
            Err(e) => reject(e.to_string()),
        }
    }
    let mut rej = csv::Writer::from_writer(Vec::new());
    rej.write_record(["file", "reason"])?;
    for r in &rejections {
        rej.write_record([&r.file, &r.reason])?;
    }
    let bytes = rej.into_inner().map_err(|e| Error::InvalidValue(e.to_string()))?;
    write_atomic(&out_dir.join("rejections.csv"), &bytes)?;
    if kept.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no usable faces in {} ({} rejected)",
            image_dir.display(),
            rejections.len()
        )));
    }
    let splits = split_assignment(kept.len(), opts.seed);
    let mut records = Vec::with_capacity(kept.len());
    for (i, (stem, img, m, c)) in kept.iter().enumerate() {
        let (gt_p, mask_p, crop_p, _) = sample_paths(stem);
        img.save_png(&out_dir.join(&gt_p))?;
        m.save_png(&out_dir.join(&mask_p))?;
        c.save_png(&out_dir.join(&crop_p))?;
        records.push(ManifestRecord {
            gt: gt_p,
            mask: mask_p,
            crop: crop_p,
            w: None,
            split: splits[i],
        });
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.save()?;
    log::info!("ingested {} faces, rejected {}", kept.len(), rejections.len());
    Ok(IngestReport { manifest, rejections })
}

/// Everything the encode–map–generate path needs. Only `attribute`,
/// `mapper` and `discriminator` are ever updated.
#[derive(Clone)]
pub struct Models {
    pub identity: MlpEncoder,
    pub attribute: MlpEncoder,
    pub mapper: Mapper,
    pub discriminator: LatentDiscriminator,
    pub generator: Arc<dyn GeneratorBackend>,
    pub losses: LossBackends,
}

fn mix(seed: u64, stream: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

impl Models {
    /// Fresh trainable modules seeded from the config.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let mut attribute = load_encoder(&cfg.attribute, EncoderRole::Attribute)?;
        attribute.set_trainable(true);
        Ok(Self {
            identity: load_encoder(&cfg.identity, EncoderRole::Identity)?,
            attribute,
            mapper: Mapper::seeded(cfg.mapper_layers, mix(cfg.seed, 1))?,
            discriminator: LatentDiscriminator::seeded(mix(cfg.seed, 2)),
            generator: Arc::new(load_generator(&cfg.generator)?),
            losses: LossBackends::toy(),
        })
    }

    /// `M(E_id(crop) ⊕ E_at(masked))`.
    pub fn encode_to_w(&self, masked: &Image, crop: &Image) -> Result<StyleW> {
        let crop = fit(crop, self.identity.input_resolution());
        let masked = fit(masked, self.attribute.input_resolution());
        let id = encode_identity(&crop, &self.identity)?;
        let at = encode_attributes(&masked, &self.attribute)?;
        Ok(map_to_w(&concat_latent(&id, &at), &self.mapper))
    }
}

fn fit(img: &Image, dims: (usize, usize)) -> Image {
    if img.dims() == dims {
        img.clone()
    } else {
        img.resized(dims.0, dims.1)
    }
}

/// One training sample held in memory.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub gt: Image,
    pub masked: Image,
    pub crop: Image,
    pub w: Option<StyleW>,
}

pub fn load_samples(m: &DatasetManifest, split: Split) -> Result<Vec<TrainSample>> {
    m.split(split)
        .map(|r| {
            let gt = Image::load_png(&m.resolve(&r.gt))?;
            let mask = Mask::load_png(&m.resolve(&r.mask))?;
            Ok(TrainSample {
                masked: apply_mask(&gt, &mask)?,
                crop: Image::load_png(&m.resolve(&r.crop))?,
                w: r.w.as_ref().map(|p| load_latent(&m.resolve(p))).transpose()?,
                gt,
            })
        })
        .collect()
}

/// Logged values of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub step: u64,
    pub bundle: LossBundle,
    /// Discriminator loss, when the discriminator trained this step.
    pub d_loss: Option<f64>,
}

impl StepLosses {
    pub fn csv_row(&self) -> [String; 8] {
        let b = &self.bundle;
        [
            self.step.to_string(),
            b.perc.to_string(),
            b.style.to_string(),
            b.id.to_string(),
            b.lnd.to_string(),
            b.rec.to_string(),
            b.adv_g.to_string(),
            b.total.to_string(),
        ]
    }
}

struct BatchForward {
    graph: Graph,
    objective: Var,
    at: crate::nn::Bound,
    mapper: crate::nn::Bound,
    components: LossComponents,
    fake_w: Vec<Vec<f64>>,
}

pub const CHECKPOINT_FORMAT: &str = "periface-checkpoint-1";

pub struct Trainer {
    cfg: RunConfig,
    hash: String,
    models: Models,
    opt_g: Adam,
    opt_d: Adam,
    step: u64,
    best_val: f64,
    train: Vec<TrainSample>,
    val: Vec<TrainSample>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, manifest: &DatasetManifest) -> Result<Self> {
        let models = Models::from_config(&cfg)?;
        Self::with_models(cfg, manifest, models)
    }

    pub fn with_models(cfg: RunConfig, manifest: &DatasetManifest, models: Models) -> Result<Self> {
        cfg.validate()?;
        if cfg.phase == Phase::StyleGanDb && !manifest.has_latents() {
            return Err(Error::Config(
                "stylegandb phase needs a manifest with stored latents for every sample".into(),
            ));
        }
        let train = load_samples(manifest, Split::Train)?;
        if train.is_empty() {
            return Err(Error::EmptyDataset("manifest has no training samples".into()));
        }
        let val = load_samples(manifest, Split::Val)?;
        let res = models.generator.resolution();
        if let Some(s) = train.iter().chain(&val).find(|s| s.gt.dims() != res) {
            return Err(Error::dim(format!(
                "generator renders {res:?}, dataset image is {:?}",
                s.gt.dims()
            )));
        }
        let adam = AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
        };
        let g_sizes: Vec<usize> = models
            .attribute
            .params()
            .tensors()
            .chain(models.mapper.params().tensors())
            .map(Tensor::len)
            .collect();
        Ok(Self {
            hash: cfg.hash(),
            opt_g: Adam::new(adam, &g_sizes),
            opt_d: Adam::for_params(adam, models.discriminator.params()),
            models,
            cfg,
            step: 0,
            best_val: f64::INFINITY,
            train,
            val,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: RunConfig, manifest: &DatasetManifest, ckpt: &TensorArchive) -> Result<Self> {
        let mut t = Self::new(cfg, manifest)?;
        t.restore(ckpt)?;
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn models(&self) -> &Models {
        &self.models
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn best_validation(&self) -> f64 {
        self.best_val
    }

    /// Indices of the batch for step `step`, a pure function of
    /// `(seed, step)`: consecutive slices of a stream of per-epoch seeded
    /// permutations of the training split.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.train.len() as u64;
        let b = self.cfg.batch_size as u64;
        let mut out = Vec::with_capacity(b as usize);
        let mut pos = step * b;
        let mut perm: Option<(u64, Vec<usize>)> = None;
        while (out.len() as u64) < b {
            let epoch = pos / n;
            if perm.as_ref().map(|p| p.0) != Some(epoch) {
                let mut idx: Vec<usize> = (0..n as usize).collect();
                idx.shuffle(&mut seeded_rng(mix(self.cfg.seed, 0x100 + epoch)));
                perm = Some((epoch, idx));
            }
            out.push(perm.as_ref().unwrap().1[(pos % n) as usize]);
            pos += 1;
        }
        out
    }

    fn forward(&self, batch: &[&TrainSample], adversarial: bool) -> Result<BatchForward> {
        let m = &self.models;
        let mut g = Graph::new();
        let idb = m.identity.params().bind(&mut g, false);
        let atb = m.attribute.params().bind(&mut g, true);
        let mb = m.mapper.params().bind(&mut g, true);
        let gb = m.generator.params().bind(&mut g, false);
        let db = m.discriminator.params().bind(&mut g, false);
        let bb = m.losses.bind(&mut g);
        let mut comps: [Vec<Var>; 5] = Default::default();
        let mut ws = Vec::with_capacity(batch.len());
        for s in batch {
            let crop = g.constant(s.crop.to_tensor());
            let crop = resize_node(&mut g, crop, m.identity.input_resolution());
            let id = m.identity.forward(&mut g, &idb, crop);
            let inp = g.constant(s.masked.to_tensor());
            let inp = resize_node(&mut g, inp, m.attribute.input_resolution());
            let at = m.attribute.forward(&mut g, &atb, inp);
            let z = g.concat(&[id, at]);
            let w = m.mapper.forward(&mut g, &mb, z);
            let out = m.generator.synthesize(&mut g, &gb, w);
            let gt = g.constant(s.gt.to_tensor());
            let c = training_components_graph(&mut g, &bb, gt, out, self.cfg.weights.alpha)?;
            for (slot, v) in comps.iter_mut().zip(c) {
                slot.push(v);
            }
            ws.push(w);
        }
        let means: Vec<Var> = comps.iter().map(|c| mean_of(&mut g, c)).collect();
        let lw = &self.cfg.weights;
        let lambdas = [lw.perc, lw.style, lw.id, lw.lnd, lw.rec];
        let weighted: Vec<Var> = means.iter().zip(lambdas).map(|(&v, l)| g.scale(v, l)).collect();
        let weighted = g.concat(&weighted);
        let mut objective = g.sum(weighted);
        let adv = adv_loss_g_graph(&mut g, &m.discriminator, &db, &ws)?;
        if adversarial {
            let a = g.scale(adv, self.cfg.adv_weight);
            objective = g.add(objective, a);
        }
        let v: Vec<f64> = means.iter().map(|&x| g.scalar(x)).collect();
        let components = LossComponents {
            perc: v[0],
            style: v[1],
            id: v[2],
            lnd: v[3],
            rec: v[4],
            adv_g: g.scalar(adv),
        };
        let fake_w = ws.iter().map(|&w| g.value(w).data().to_vec()).collect();
        Ok(BatchForward {
            graph: g,
            objective,
            at: atb,
            mapper: mb,
            components,
            fake_w,
        })
    }

    /// One generator-side update of `θ_at` and `θ_M`, then (first phase
    /// only) one discriminator update.
    pub fn step(&mut self) -> Result<StepLosses> {
        let idx = self.batch_indices(self.step);
        let batch: Vec<&TrainSample> = idx.iter().map(|&i| &self.train[i]).collect();
        let adversarial = self.cfg.phase.trains_discriminator();
        let fwd = self.forward(&batch, adversarial)?;
        let bundle = loss_total(&fwd.components, &self.cfg.weights)?;
        let objective = fwd.graph.scalar(fwd.objective);
        if !objective.is_finite() {
            return Err(Error::InvalidLoss {
                name: "objective".into(),
                value: objective,
            });
        }
        let grads = fwd.graph.backward(fwd.objective);
        let mut gvec = fwd.at.grads(&fwd.graph, &grads);
        gvec.extend(fwd.mapper.grads(&fwd.graph, &grads));
        let real: Vec<StyleW> = batch.iter().filter_map(|s| s.w.clone()).collect();
        let d_loss = if adversarial {
            Some(self.discriminator_step(&real, &fwd.fake_w)?)
        } else {
            None
        };
        {
            let m = &mut self.models;
            let mut slices = m.attribute.params_mut().slices_mut();
            slices.extend(m.mapper.params_mut().slices_mut());
            let g: Vec<&[f64]> = gvec.iter().map(Tensor::data).collect();
            self.opt_g.step_slices(&mut slices, &g);
        }
        self.step += 1;
        Ok(StepLosses {
            step: self.step,
            bundle,
            d_loss,
        })
    }

    fn discriminator_step(&mut self, real: &[StyleW], fake: &[Vec<f64>]) -> Result<f64> {
        let d = &self.models.discriminator;
        let mut g = Graph::new();
        let db = d.params().bind(&mut g, true);
        let rv: Vec<Var> = real.iter().map(|w| g.constant(w.to_tensor())).collect();
        let fv: Vec<Var> = fake.iter().map(|w| g.constant(Tensor::vector(w.clone()))).collect();
        let [_, _, _, total] = adv_loss_d_graph(&mut g, d, &db, &rv, &fv, self.cfg.gamma)?;
        let loss = g.scalar(total);
        if !loss.is_finite() {
            return Err(Error::InvalidLoss {
                name: "adv_d".into(),
                value: loss,
            });
        }
        let grads = db.grads(&g, &g.backward(total));
        self.opt_d.step_params(self.models.discriminator.params_mut(), &grads);
        Ok(loss)
    }

    /// Mean weighted total over the validation split, no updates.
    pub fn validate(&self) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let mut sum = 0.0;
        for s in &self.val {
            let fwd = self.forward(&[s], false)?;
            sum += loss_total(&fwd.components, &self.cfg.weights)?.total;
        }
        Ok(Some(sum / self.val.len() as f64))
    }

    pub fn checkpoint(&self) -> TensorArchive {
        let m = &self.models;
        let mut a = TensorArchive::new();
        a.insert_params("e_at", m.attribute.params());
        a.insert_params("mapper", m.mapper.params());
        a.insert_params("disc", m.discriminator.params());
        for (tag, opt) in [("adam_g", &self.opt_g), ("adam_d", &self.opt_d)] {
            let (mm, vv) = opt.moments();
            for (i, (x, y)) in mm.iter().zip(vv).enumerate() {
                a.insert(format!("{tag}.m.{i}"), Tensor::vector(x.clone()));
                a.insert(format!("{tag}.v.{i}"), Tensor::vector(y.clone()));
            }
            a.meta.insert(format!("{tag}.steps"), opt.steps_taken().to_string());
        }
        a.meta.insert("format".into(), CHECKPOINT_FORMAT.into());
        a.meta.insert("step".into(), self.step.to_string());
        a.meta.insert("config_hash".into(), self.hash.clone());
        a.meta.insert("config".into(), self.cfg.to_kv_string());
        a.meta.insert("best_val".into(), self.best_val.to_string());
        a
    }

    fn restore(&mut self, a: &TensorArchive) -> Result<()> {
        let meta = |k: &str| {
            a.meta
                .get(k)
                .ok_or_else(|| Error::Archive(format!("checkpoint lacks `{k}`")))
        };
        if meta("config_hash")? != &self.hash {
            return Err(Error::Config(
                "checkpoint was written under a different configuration".into(),
            ));
        }
        let m = &mut self.models;
        a.load_params("e_at", m.attribute.params_mut())?;
        a.load_params("mapper", m.mapper.params_mut())?;
        a.load_params("disc", m.discriminator.params_mut())?;
        for (tag, opt) in [("adam_g", &mut self.opt_g), ("adam_d", &mut self.opt_d)] {
            let n = opt.moments().0.len();
            let read = |kind: &str| -> Result<Vec<Vec<f64>>> {
                (0..n)
                    .map(|i| Ok(a.require(&format!("{tag}.{kind}.{i}"))?.data().to_vec()))
                    .collect()
            };
            let steps: u64 = meta(&format!("{tag}.steps"))?
                .parse()
                .map_err(|_| Error::Archive("bad optimizer step".into()))?;
            opt.restore(steps, read("m")?, read("v")?)?;
        }
        self.step = meta("step")?.parse().map_err(|_| Error::Archive("bad step".into()))?;
        self.best_val = meta("best_val")?
            .parse()
            .map_err(|_| Error::Archive("bad best_val".into()))?;
        Ok(())
    }

    /// Run until `cfg.steps`, appending to `<out_dir>/train_log.csv` and
    /// writing checkpoints every `checkpoint.every` steps (`latest.pfnt`,
    /// `step_NNNNNN.pfnt`, `best.pfnt` on validation improvement). A
    /// non-finite loss writes `diagnostic.pfnt` and stops.
    pub fn run(&mut self) -> Result<TrainSummary> {
        let out = self.cfg.out_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let log_path = out.join("train_log.csv");
        let fresh = !log_path.exists() || self.step == 0;
        let mut file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let mut log = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        if fresh {
            log.write_record(LOG_COLUMNS)?;
        }
        let mut summary = TrainSummary::default();
        while self.step < self.cfg.steps {
            let s = match self.step() {
                Ok(s) => s,
                Err(e @ Error::InvalidLoss { .. }) => {
                    let p = out.join("diagnostic.pfnt");
                    let mut a = self.checkpoint();
                    a.meta.insert("error".into(), e.to_string());
                    a.save(&p)?;
                    log::error!(
                        "halting at step {}: {e}; diagnostic checkpoint {}",
                        self.step,
                        p.display()
                    );
                    flush_log(&mut file, &mut log, &log_path)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            log.write_record(s.csv_row())?;
            log::info!(
                "step {} total {:.6} adv_g {:.6}",
                s.step,
                s.bundle.total,
                s.bundle.adv_g
            );
            summary.losses.push(s);
            if self.step.is_multiple_of(self.cfg.checkpoint_every) || self.step == self.cfg.steps {
                flush_log(&mut file, &mut log, &log_path)?;
                summary.checkpoints.extend(self.save_checkpoints(&out)?);
            }
        }
        flush_log(&mut file, &mut log, &log_path)?;
        Ok(summary)
    }

    fn save_checkpoints(&mut self, out: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        if let Some(v) = self.validate()? {
            if v < self.best_val {
                self.best_val = v;
                let p = out.join("best.pfnt");
                self.checkpoint().save(&p)?;
                written.push(p);
            }
        }
        let a = self.checkpoint();
        for name in [format!("step_{:06}.pfnt", self.step), "latest.pfnt".to_string()] {
            let p = out.join(name);
            a.save(&p)?;
            written.push(p);
        }
        Ok(written)
    }
}

fn flush_log(file: &mut fs::File, log: &mut csv::Writer<Vec<u8>>, path: &Path) -> Result<()> {
    log.flush().map_err(|e| Error::io(path, e))?;
    let buf = std::mem::replace(
        log,
        csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new()),
    )
    .into_inner()
    .map_err(|e| Error::InvalidValue(e.to_string()))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub losses: Vec<StepLosses>,
    pub checkpoints: Vec<PathBuf>,
}

/// Train from scratch, or resume from `<out_dir>/latest.pfnt` when present.
pub fn train(cfg: RunConfig, manifest: &DatasetManifest) -> Result<TrainSummary> {
    let latest = cfg.out_dir.join("latest.pfnt");
    let mut t = if latest.is_file() {
        log::info!("resuming from {}", latest.display());
        Trainer::resume(cfg, manifest, &TensorArchive::load(&latest)?)?
    } else {
        Trainer::new(cfg, manifest)?
    };
    t.run()
}

/// Models for inference from a training checkpoint; the frozen parts come
/// from the backends named in the embedded config.
pub fn models_from_checkpoint(ckpt: &TensorArchive) -> Result<(RunConfig, Models)> {
    let text = ckpt
        .meta
        .get("config")
        .ok_or_else(|| Error::Archive("checkpoint lacks its config".into()))?;
    let cfg = RunConfig::from_kv_str(text)?;
    let mut m = Models::from_config(&cfg)?;
    ckpt.load_params("e_at", m.attribute.params_mut())?;
    ckpt.load_params("mapper", m.mapper.params_mut())?;
    ckpt.load_params("disc", m.discriminator.params_mut())?;
    Ok((cfg, m))
}

/// Everything `run_inpaint` consults besides the image.
pub struct InpaintContext {
    pub models: Models,
    pub weights: LossWeights,
    pub detector: Box<dyn LandmarkDetector>,
    pub masks: Box<dyn MaskProvider>,
    pub crop_dims: (usize, usize),
}

impl InpaintContext {
    pub fn new(models: Models, weights: LossWeights) -> Self {
        let crop_dims = models.identity.input_resolution();
        Self {
            models,
            weights,
            detector: Box::new(TemplateLandmarks),
            masks: Box::new(PeriocularMasks::default()),
            crop_dims,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InpaintOutput {
    pub mask: Mask,
    pub in_masked: Image,
    pub crop: Image,
    pub w_init: StyleW,
    /// `G(w_init)`, before latent optimization.
    pub pre: Image,
    /// `G(w*)`.
    pub post: Image,
    pub result: InversionResult,
}

/// Mask and crop the input, encode and map to `w`, render, then refine `w`.
/// `max_iters = 0` skips the refinement.
pub fn run_inpaint(input: &Image, ctx: &InpaintContext, cfg: &InversionConfig) -> Result<InpaintOutput> {
    let m = &ctx.models;
    let (h, w) = m.generator.resolution();
    let img = fit(input, (h, w));
    let lm = ctx
        .detector
        .detect(&img)
        .ok_or_else(|| Error::LandmarkBackend("no face found in input".into()))?;
    let mask = ctx.masks.mask(&img, &lm)?;
    let (in_masked, crop) = masked_views(&img, &mask, ctx.crop_dims)?;
    let w_init = m.encode_to_w(&in_masked, &crop)?;
    let pre = generate(&w_init, m.generator.as_ref())?;
    let result = if cfg.max_iters == 0 {
        let l0 = objective_at(
            &w_init,
            &in_masked,
            &crop,
            &mask,
            m.generator.as_ref(),
            &m.losses,
            &ctx.weights,
        )?;
        InversionResult {
            w_star: w_init.clone(),
            loss_trace: vec![l0],
            components: Vec::new(),
            iterations_run: 0,
            best_index: 0,
            elapsed: std::time::Duration::ZERO,
        }
    } else {
        invert(
            &w_init,
            &in_masked,
            &crop,
            &mask,
            m.generator.as_ref(),
            &m.losses,
            &ctx.weights,
            cfg,
        )?
    };
    let post = if result.w_star == w_init {
        pre.clone()
    } else {
        generate(&result.w_star, m.generator.as_ref())?
    };
    Ok(InpaintOutput {
        mask,
        in_masked,
        crop,
        w_init,
        pre,
        post,
        result,
    })
}

/// How a face is turned into a verification embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Identity embedding of the periocular crop only.
    Periocular,
    /// Face embedding of the inpainted full face.
    Inpainted,
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "periocular" => Ok(Protocol::Periocular),
            "inpainted" => Ok(Protocol::Inpainted),
            _ => Err(Error::Config(format!("unknown protocol `{s}` (periocular|inpainted)"))),
        }
    }
}

pub fn protocol_embedding(
    protocol: Protocol,
    image: &Image,
    ctx: &InpaintContext,
    cfg: &InversionConfig,
) -> Result<Vec<f64>> {
    match protocol {
        Protocol::Periocular => {
            let m = &ctx.models;
            let img = fit(image, m.generator.resolution());
            let lm = ctx
                .detector
                .detect(&img)
                .ok_or_else(|| Error::LandmarkBackend("no face found".into()))?;
            let mask = ctx.masks.mask(&img, &lm)?;
            let (_, crop) = masked_views(&img, &mask, m.identity.input_resolution())?;
            Ok(encode_identity(&crop, &m.identity)?.into_values())
        }
        Protocol::Inpainted => {
            let out = run_inpaint(image, ctx, cfg)?;
            let face = &ctx.models.losses.face;
            face.encode(&fit(&out.post, face.input_resolution()))
        }
    }
}

/// Score every pair under `protocol`; each image is embedded once.
pub fn run_verification_protocol(
    pairs: &PairList,
    protocol: Protocol,
    ctx: &InpaintContext,
    cfg: &InversionConfig,
    thresholds: &[f64],
) -> Result<VerificationCurves> {
    let mut cache: HashMap<PathBuf, Vec<f64>> = HashMap::new();
    verification_curves(
        pairs,
        |p| {
            if let Some(e) = cache.get(p) {
                return Ok(e.clone());
            }
            let e = protocol_embedding(protocol, &Image::load_png(p)?, ctx, cfg)?;
            cache.insert(p.to_path_buf(), e.clone());
            Ok(e)
        },
        thresholds,
    )
}

/// `z` for a sample, exposed for diagnostics.
pub fn encode_latent(models: &Models, masked: &Image, crop: &Image) -> Result<LatentZ> {
    let id = encode_identity(&fit(crop, models.identity.input_resolution()), &models.identity)?;
    let at = encode_attributes(&fit(masked, models.attribute.input_resolution()), &models.attribute)?;
    Ok(concat_latent(&id, &at))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{FixedPose, PoseAngles};

    #[test]
    fn config_round_trip_and_hash() {
        let cfg =
            RunConfig::from_kv_str("# run\nphase = real-images\nbatch_size = 4\nloss.alpha = 0.5\nseed=9\n").unwrap();
        assert_eq!(cfg.phase, Phase::RealImages);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.weights.alpha, 0.5);
        let again = RunConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
        let mut longer = cfg.clone();
        longer.steps += 10;
        assert_eq!(longer.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.lr *= 2.0;
        assert_ne!(other.hash(), cfg.hash());
        assert!(matches!(RunConfig::from_kv_str("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_kv_str("batch_size = 0"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_kv_str("mapper.n_layers = 3"),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::from_kv_str("loss.id = -1"), Err(Error::Config(_))));
    }

    #[test]
    fn split_is_ninety_ten_and_seeded() {
        let s = split_assignment(50_000, 3);
        assert_eq!(s.iter().filter(|&&x| x == Split::Train).count(), 45_000);
        assert_eq!(split_assignment(10, 3).iter().filter(|&&x| x == Split::Val).count(), 1);
        assert_eq!(split_assignment(100, 3), split_assignment(100, 3));
        assert_ne!(split_assignment(100, 3), split_assignment(100, 4));
    }

    fn write_faces(dir: &Path, n: usize) {
        for i in 0..n {
            let img = Image::from_fn(80, 80, |y, x, c| ((y + 2 * x + 5 * c + i) % 17) as f64 / 16.0).unwrap();
            img.save_png(&dir.join(format!("face{i}.png"))).unwrap();
        }
    }

    #[test]
    fn ingest_filters_pose_and_logs() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        write_faces(src.path(), 5);
        fs::write(src.path().join("broken.png"), b"not a png").unwrap();
        let mut pose = FixedPose::frontal();
        pose.by_stem
            .insert("face3".into(), PoseAngles::new(0.0, 0.0, 60.0).unwrap());
        let r = ingest_real_dataset(
            src.path(),
            out.path(),
            &TemplateLandmarks,
            &pose,
            &IngestOptions::default(),
        )
        .unwrap();
        assert_eq!(r.manifest.records.len(), 4);
        assert_eq!(r.rejections.len(), 2);
        assert!(r
            .rejections
            .iter()
            .any(|x| x.file == "face3.png" && x.reason.contains("pose")));
        assert!(r.manifest.records.iter().all(|x| x.w.is_none()));
        let log = fs::read_to_string(out.path().join("rejections.csv")).unwrap();
        assert_eq!(log.lines().count(), 3);
        let loaded = DatasetManifest::load(&out.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded.records, r.manifest.records);

        let clean = tempfile::tempdir().unwrap();
        let out2 = tempfile::tempdir().unwrap();
        write_faces(clean.path(), 5);
        let r = ingest_real_dataset(
            clean.path(),
            out2.path(),
            &TemplateLandmarks,
            &FixedPose::frontal(),
            &IngestOptions::default(),
        )
        .unwrap();
        assert_eq!((r.manifest.records.len(), r.rejections.len()), (5, 0));

        let empty = tempfile::tempdir().unwrap();
        let out3 = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest_real_dataset(
                empty.path(),
                out3.path(),
                &TemplateLandmarks,
                &FixedPose::frontal(),
                &IngestOptions::default()
            ),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn manifest_rejects_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            root: dir.path().to_path_buf(),
            records: vec![ManifestRecord {
                gt: "images/a.png".into(),
                mask: "masks/a.png".into(),
                crop: "crops/a.png".into(),
                w: None,
                split: Split::Train,
            }],
        };
        let p = m.save().unwrap();
        assert!(matches!(DatasetManifest::load(&p), Err(Error::Io { .. })));
    }

    #[test]
    fn real_phase_needs_no_latents_but_first_phase_does() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        write_faces(src.path(), 3);
        let r = ingest_real_dataset(
            src.path(),
            out.path(),
            &TemplateLandmarks,
            &FixedPose::frontal(),
            &IngestOptions::default(),
        )
        .unwrap();
        let cfg = RunConfig {
            batch_size: 2,
            ..Default::default()
        };
        assert!(matches!(Trainer::new(cfg.clone(), &r.manifest), Err(Error::Config(_))));
        let real = RunConfig {
            phase: Phase::RealImages,
            ..cfg
        };
        let mut t = Trainer::new(real, &r.manifest).unwrap();
        let before = t.models().discriminator.params().digest();
        let s = t.step().unwrap();
        assert!(s.d_loss.is_none());
        assert!(s.bundle.total.is_finite());
        assert_eq!(t.models().discriminator.params().digest(), before);
    }
}
