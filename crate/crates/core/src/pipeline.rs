//! Training loop, crop-around-points inference and checkpoints.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment, AugmentPolicy};
use crate::autograd::{AdamW, AdamWConfig, Graph, Init, ParamGroup, ParamId, ParamStore};
use crate::encoder::ParamSink;
use crate::error::{Result, TagsError};
use crate::head::{sample_train_points, select_inference_points, PointPrompt, SelectionStrategy, TRAIN_POINTS};
use crate::io::{DatasetManifest, LoadedCase};
use crate::model::{ModelConfig, TagsModel};
use crate::objectives::LossConfig;
use crate::patch::{centered_start, sample_patch, PatchSpec};
use crate::prompt_bank::{text_features, HashTextEncoder, PrecomputedTextEncoder, PromptBank, TextEmbeddingPair, TextEncoder};
use crate::volume::{clip_normalize, crop_input, inject_organ_channel, paste_clipped, resample, resample_mask, MaskVolume, ModelInput, Shape3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// HU window mapped to `[0, 1]`.
    pub clip: [f64; 2],
    /// Resample to this spacing (mm) when set.
    pub target_spacing: Option<[f64; 3]>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            clip: [-52.0, 247.0],
            target_spacing: None,
        }
    }
}

/// A case ready for the model: normalized image with the organ channel.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub id: String,
    pub organ_name: String,
    pub input: ModelInput,
    pub tumor: MaskVolume,
}

pub fn preprocess(case: &LoadedCase, cfg: &PreprocessConfig) -> Result<PreparedCase> {
    let (image, organ, tumor) = match cfg.target_spacing {
        Some(t) => (resample(&case.image, t)?, resample_mask(&case.organ, t)?, resample_mask(&case.tumor, t)?),
        None => (case.image.clone(), case.organ.clone(), case.tumor.clone()),
    };
    let image = clip_normalize(&image, cfg.clip[0], cfg.clip[1])?;
    Ok(PreparedCase {
        id: case.id.clone(),
        organ_name: case.organ_name.clone(),
        input: inject_organ_channel(&image, &organ)?,
        tumor,
    })
}

pub fn load_prepared(manifest: &DatasetManifest, cfg: &PreprocessConfig) -> Result<Vec<PreparedCase>> {
    manifest
        .cases
        .iter()
        .map(|c| preprocess(&manifest.load_case(c)?, cfg))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TextSource {
    /// Deterministic stand-in encoder keyed by a seed.
    Hash { seed: u64 },
    /// JSON map from prompt text to embedding.
    Precomputed { path: PathBuf },
}

impl Default for TextSource {
    fn default() -> Self {
        TextSource::Hash { seed: 0 }
    }
}

impl TextSource {
    pub fn encoder(&self, width: usize) -> Result<Box<dyn TextEncoder>> {
        match self {
            TextSource::Hash { seed } => Ok(Box::new(HashTextEncoder::new(*seed, width))),
            TextSource::Precomputed { path } => Ok(Box::new(PrecomputedTextEncoder::load(path)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub loss: LossConfig,
    pub patch: PatchSpec,
    pub augment: AugmentPolicy,
    pub preprocess: PreprocessConfig,
    pub text: TextSource,
    /// Prompt bank file; the built-in bank for the case's organ otherwise.
    pub prompt_bank: Option<PathBuf>,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub train_points: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            optimizer: AdamWConfig::default(),
            loss: LossConfig::default(),
            patch: PatchSpec::default(),
            augment: AugmentPolicy::default(),
            preprocess: PreprocessConfig::default(),
            text: TextSource::default(),
            prompt_bank: None,
            batch_size: 1,
            epochs: 200,
            max_steps: None,
            seed: 0,
            train_points: TRAIN_POINTS,
        }
    }
}

impl TrainConfig {
    /// Desk-scale run: tiny model, 32^3 patches, 500 steps. A sharper
    /// similarity temperature lets the alignment heads learn within the
    /// short schedule; with raw cosines the sigmoid spans only
    /// `[0.12, 0.88]` and the small-lesion optimum is a flat map.
    pub fn tiny() -> Self {
        TrainConfig {
            model: ModelConfig::tiny(),
            optimizer: AdamWConfig {
                lr: 5e-3,
                ..Default::default()
            },
            loss: LossConfig {
                tau: 0.05,
                ..Default::default()
            },
            patch: PatchSpec::cube(32),
            max_steps: Some(500),
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TagsError::io(path, e))?;
        let cfg: TrainConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.lr > 0.0) {
            return Err(TagsError::InvalidArgument(format!("learning rate must be > 0, got {}", self.optimizer.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.train_points == 0 {
            return Err(TagsError::InvalidArgument("epochs, batch size and train points must be >= 1".into()));
        }
        if self.patch.size != self.model.encoder.input_size {
            return Err(TagsError::InvalidArgument(format!(
                "patch size {:?} must equal the encoder input size {:?}",
                self.patch.size, self.model.encoder.input_size
            )));
        }
        self.loss.validate()?;
        self.augment.validate()?;
        self.patch.validate()?;
        self.model.encoder.validate()?;
        self.model.decoder.validate()
    }
}

/// One training-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// Per-stage `0.5 focal + 0.5 dice` alignment terms.
    pub alignment: Vec<f64>,
    pub dice: f64,
    pub loss: f64,
}

/// Text features for an organ, from the configured bank and encoder.
pub fn organ_text_features(cfg: &TrainConfig, organ: &str) -> Result<TextEmbeddingPair> {
    let bank = match &cfg.prompt_bank {
        Some(p) => PromptBank::load(p)?,
        None => PromptBank::default_for(organ),
    };
    let enc = cfg.text.encoder(cfg.model.encoder.embed_width)?;
    let t = text_features(&bank, enc.as_ref())?;
    if t.width() != cfg.model.encoder.embed_width {
        return Err(TagsError::ShapeMismatch(format!(
            "text width {} vs embed width {}",
            t.width(),
            cfg.model.encoder.embed_width
        )));
    }
    Ok(t)
}

/// Step-indexed generator: every step draws from its own stream.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step as u64);
    r
}

pub fn data_checksum(cases: &[PreparedCase]) -> String {
    let mut h = Sha256::new();
    for c in cases {
        h.update(c.id.as_bytes());
        for v in c.input.channels.iter() {
            h.update(v.to_le_bytes());
        }
        h.update(c.tumor.data.as_slice().unwrap_or(&c.tumor.data.iter().copied().collect::<Vec<_>>()));
    }
    hex::encode(h.finalize())
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: TagsModel,
    pub store: ParamStore,
    opt: AdamW,
    cases: Vec<PreparedCase>,
    text: HashMap<String, TextEmbeddingPair>,
    step: usize,
    checksum: String,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, cases: Vec<PreparedCase>) -> Result<Self> {
        cfg.validate()?;
        if cases.is_empty() {
            return Err(TagsError::InvalidArgument("training needs at least one case".into()));
        }
        let mut text = HashMap::new();
        for c in &cases {
            if !text.contains_key(&c.organ_name) {
                text.insert(c.organ_name.clone(), organ_text_features(&cfg, &c.organ_name)?);
            }
        }
        let (model, store) = TagsModel::init(&cfg.model, cfg.seed)?;
        let checksum = data_checksum(&cases);
        Ok(Trainer {
            opt: AdamW::new(cfg.optimizer.clone()),
            cfg,
            model,
            store,
            cases,
            text,
            step: 0,
            checksum,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.cfg
            .max_steps
            .unwrap_or(self.cfg.epochs * self.cases.len().div_ceil(self.cfg.batch_size))
    }

    pub fn text_for(&self, organ: &str) -> Option<&TextEmbeddingPair> {
        self.text.get(organ)
    }

    /// One optimizer step over `batch_size` sampled patches.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let mut rng = step_rng(self.cfg.seed, step);
        let bs = self.cfg.batch_size;
        let mut samples = Vec::with_capacity(bs);
        for b in 0..bs {
            let case = &self.cases[(step * bs + b) % self.cases.len()];
            let patch = sample_patch(&case.input, &case.tumor, &self.cfg.patch, &mut rng)?;
            let (input, tumor) = augment(&patch.input, &patch.tumor, &self.cfg.augment, &mut rng);
            let points = sample_train_points(&tumor, self.cfg.train_points, &mut rng)?;
            samples.push((case.organ_name.clone(), input, tumor, points));
        }
        let (grads, record) = {
            let mut g = Graph::new(&self.store);
            let mut totals = Vec::with_capacity(bs);
            let stages = self.cfg.model.encoder.num_stages;
            let mut alignment = vec![0.0; stages];
            let mut dice = 0.0;
            for (organ, input, tumor, points) in &samples {
                let text = &self.text[organ];
                let l = self.model.loss(&mut g, input, points, tumor, text, &self.cfg.loss)?;
                for (s, acc) in alignment.iter_mut().enumerate() {
                    *acc += 0.5 * (g.scalar(l.alignment.focal[s]) + g.scalar(l.alignment.dice[s])) / bs as f64;
                }
                dice += g.scalar(l.dice) / bs as f64;
                totals.push(l.total);
            }
            let mut total = totals[0];
            for &t in &totals[1..] {
                total = g.add(total, t);
            }
            let total = g.scale(total, 1.0 / bs as f64);
            let loss = g.scalar(total);
            if !loss.is_finite() {
                return Err(TagsError::Diverged { step, loss });
            }
            let record = StepRecord {
                step,
                epoch: step * bs / self.cases.len(),
                alignment,
                dice,
                loss,
            };
            (g.backward(total), record)
        };
        self.opt.step(&mut self.store, &grads);
        self.step += 1;
        Ok(record)
    }

    /// Runs until `total_steps`, passing each record to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepRecord) -> Result<()>) -> Result<Vec<StepRecord>> {
        let mut log = Vec::new();
        while self.step < self.total_steps() {
            let r = self.step()?;
            on_step(&r)?;
            log.push(r);
        }
        Ok(log)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            &self.cfg.model,
            self.store.clone(),
            TrainingState {
                epoch: self.step * self.cfg.batch_size / self.cases.len(),
                step: self.step,
                seed: self.cfg.seed,
                data_checksum: self.checksum.clone(),
            },
            Some(self.cfg.clone()),
        )
    }
}

/// Trains on a manifest, writing one JSON line per step to `log`.
pub fn train(cfg: &TrainConfig, manifest: &DatasetManifest, mut log: Option<&mut dyn Write>) -> Result<(Checkpoint, Vec<StepRecord>)> {
    let cases = load_prepared(manifest, &cfg.preprocess)?;
    let mut trainer = Trainer::new(cfg.clone(), cases)?;
    let records = trainer.run(|r| {
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(r)?).map_err(|e| TagsError::io("<log>", e))?;
        }
        Ok(())
    })?;
    Ok((trainer.checkpoint(), records))
}

// ---------------------------------------------------------------- checkpoints

const MAGIC: &[u8; 8] = b"TAGSCKPT";
const FORMAT_VERSION: u32 = 1;

/// SHA-256 of the canonical JSON of the model architecture.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let v = serde_json::to_value(cfg).expect("config serializes");
    hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("json")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub group: ParamGroup,
    pub shape: [usize; 2],
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingState {
    pub epoch: usize,
    pub step: usize,
    /// Training seed; step `k` draws from stream `k` of this seed.
    pub seed: u64,
    pub data_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub config_hash: String,
    pub params: Vec<ParamMeta>,
    pub state: TrainingState,
    pub train_config: Option<TrainConfig>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub store: ParamStore,
}

struct ArchiveSink<'a> {
    store: ParamStore,
    values: std::vec::IntoIter<(ParamMeta, Array2<f64>)>,
    error: &'a mut Option<TagsError>,
}

impl ParamSink for ArchiveSink<'_> {
    fn declare(&mut self, name: String, group: ParamGroup, shape: (usize, usize), _init: Init) -> ParamId {
        let value = match self.values.next() {
            Some((meta, v)) if meta.name == name && meta.group == group && v.dim() == shape => v,
            other => {
                if self.error.is_none() {
                    *self.error = Some(TagsError::Checkpoint(format!(
                        "archive entry {:?} does not match model parameter {name} {shape:?}",
                        other.map(|(m, _)| m.name)
                    )));
                }
                Array2::zeros(shape)
            }
        };
        self.store.add(name, group, value)
    }
}

impl Checkpoint {
    pub fn new(model: &ModelConfig, store: ParamStore, state: TrainingState, train_config: Option<TrainConfig>) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| ParamMeta {
                name: p.name.clone(),
                group: p.group,
                shape: [p.value.nrows(), p.value.ncols()],
                trainable: p.trainable(),
            })
            .collect();
        Checkpoint {
            manifest: CheckpointManifest {
                format_version: FORMAT_VERSION,
                model: model.clone(),
                config_hash: config_hash(model),
                params,
                state,
                train_config,
            },
            store,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let scalars: usize = self.store.iter().map(|(_, p)| p.value.len()).sum();
        let mut out = Vec::with_capacity(8 + 4 + 8 + manifest.len() + 8 + scalars * 8 + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(scalars as u64).to_le_bytes());
        for (_, p) in self.store.iter() {
            for v in p.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| TagsError::Checkpoint(m.to_string());
        if bytes.len() < 8 + 4 + 8 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint or truncated header"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut cur = 8usize;
        let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
            let s = body.get(*cur..*cur + n).ok_or_else(|| bad("archive truncated"))?;
            *cur += n;
            Ok(s)
        };
        let version = u32::from_le_bytes(take(&mut cur, 4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let mlen = u64::from_le_bytes(take(&mut cur, 8)?.try_into().expect("8 bytes")) as usize;
        let manifest: CheckpointManifest = serde_json::from_slice(take(&mut cur, mlen)?)
            .map_err(|e| TagsError::Checkpoint(format!("manifest: {e}")))?;
        let scalars = u64::from_le_bytes(take(&mut cur, 8)?.try_into().expect("8 bytes")) as usize;
        let data = take(&mut cur, scalars.checked_mul(8).ok_or_else(|| bad("bad length"))?)?;
        if cur != body.len() {
            return Err(bad("trailing bytes or truncated archive"));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let expected: usize = manifest.params.iter().map(|p| p.shape[0] * p.shape[1]).sum();
        if expected != scalars {
            return Err(bad("manifest shapes disagree with data length"));
        }
        if config_hash(&manifest.model) != manifest.config_hash {
            return Err(TagsError::ConfigHashMismatch {
                expected: config_hash(&manifest.model),
                found: manifest.config_hash.clone(),
            });
        }
        let mut values = Vec::with_capacity(manifest.params.len());
        let mut floats = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for meta in &manifest.params {
            let [r, c] = meta.shape;
            let v: Vec<f64> = floats.by_ref().take(r * c).collect();
            values.push((meta.clone(), Array2::from_shape_vec((r, c), v).expect("length checked")));
        }
        let mut error = None;
        let mut sink = ArchiveSink {
            store: ParamStore::new(),
            values: values.into_iter(),
            error: &mut error,
        };
        TagsModel::declare(&manifest.model, &mut sink)?;
        if sink.values.next().is_some() {
            return Err(bad("archive holds more parameters than the model"));
        }
        let store = sink.store;
        if let Some(e) = error {
            return Err(e);
        }
        Ok(Checkpoint { manifest, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| TagsError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| TagsError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and refuses archives built for a different architecture.
    pub fn load_expecting(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        let expected = config_hash(cfg);
        if ck.manifest.config_hash != expected {
            return Err(TagsError::ConfigHashMismatch {
                expected,
                found: ck.manifest.config_hash,
            });
        }
        Ok(ck)
    }

    pub fn model(&self) -> Result<TagsModel> {
        let mut counter = crate::encoder::ShapeCounter::default();
        TagsModel::declare(&self.manifest.model, &mut counter)
    }
}

// ------------------------------------------------------------------ inference

#[derive(Debug, Clone)]
pub struct Crop {
    pub input: ModelInput,
    /// Points in the crop frame.
    pub points: Vec<PointPrompt>,
    /// Crop origin in the source volume; negative when padded.
    pub offset: [isize; 3],
}

/// Patch of `size` centred on the points' centroid. The window is shifted so
/// that every point falls inside whenever their bounding box fits; borders
/// are zero-padded.
pub fn crop_around_points(input: &ModelInput, points: &[PointPrompt], size: Shape3) -> Result<Crop> {
    if points.is_empty() {
        return Err(TagsError::InvalidArgument("inference needs at least one point".into()));
    }
    let shape = input.shape();
    for p in points {
        p.check_bounds(shape)?;
    }
    let mut centroid = [0usize; 3];
    for (a, c) in centroid.iter_mut().enumerate() {
        let mean = points.iter().map(|p| p.coord[a] as f64).sum::<f64>() / points.len() as f64;
        *c = (mean + 0.5).floor() as usize;
    }
    let mut offset = centered_start(centroid, size);
    for a in 0..3 {
        let lo = points.iter().map(|p| p.coord[a] as isize).min().expect("non-empty");
        let hi = points.iter().map(|p| p.coord[a] as isize).max().expect("non-empty");
        let n = size[a] as isize;
        if hi - lo < n {
            offset[a] = offset[a].clamp(hi - n + 1, lo);
        }
    }
    let remapped = points
        .iter()
        .map(|p| {
            let mut coord = [0usize; 3];
            for a in 0..3 {
                coord[a] = (p.coord[a] as isize - offset[a]).clamp(0, size[a] as isize - 1) as usize;
            }
            PointPrompt { coord, label: p.label }
        })
        .collect();
    Ok(Crop {
        input: crop_input(input, offset, size),
        points: remapped,
        offset,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub mask: MaskVolume,
    /// Foreground probabilities on the full grid; zero outside the crop.
    pub probs: Array3<f64>,
    pub offset: [isize; 3],
    pub points: Vec<PointPrompt>,
    pub stats: ProbStats,
}

pub const THRESHOLD: f64 = 0.5;

/// Organ-conditioned inference from explicit points.
pub fn infer(model: &TagsModel, store: &ParamStore, input: &ModelInput, points: &[PointPrompt]) -> Result<Inference> {
    input.validate()?;
    let crop = crop_around_points(input, points, model.cfg.encoder.input_size)?;
    let p = model.predict(store, &crop.input, &crop.points)?;
    let n = p.len() as f64;
    let stats = ProbStats {
        min: p.iter().copied().fold(f64::INFINITY, f64::min),
        max: p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: p.sum() / n,
    };
    let mut probs = Array3::zeros(input.shape());
    paste_clipped(&mut probs, &p.view(), crop.offset);
    let mask = MaskVolume::with_origin(probs.mapv(|v| u8::from(v >= THRESHOLD)), input.spacing, input.origin)?;
    Ok(Inference {
        mask,
        probs,
        offset: crop.offset,
        points: points.to_vec(),
        stats,
    })
}

/// Evaluation pathway: points chosen from the ground truth by `strategy`.
pub fn infer_with_strategy<R: Rng + ?Sized>(
    model: &TagsModel,
    store: &ParamStore,
    input: &ModelInput,
    tumor: &MaskVolume,
    strategy: SelectionStrategy,
    rng: &mut R,
) -> Result<Inference> {
    let points = select_inference_points(tumor, strategy, rng)?;
    infer(model, store, input, &points)
}
