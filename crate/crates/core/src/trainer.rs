//! Training loop, checkpoints and resumption.
//!
//! Every random choice in a run is derived from the configured seed plus a
//! position (epoch for shuffling, step for augmentation), so a run stopped at
//! any step and resumed from its checkpoint ends bit-identical to an
//! uninterrupted one.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datastore::{
    apply_label_noise, augment_backbone, augment_batch, epoch_batches, jitter_geo, Dataset, NoiseSpec,
};
use crate::diffnet::io::{read_tensors, tensors_to_bytes};
use crate::diffnet::{cosine_lr, AdamConfig, AdamState, MlpGrads, Scalar, Tensor2};
use crate::encoders::{location_input, time_input, EncoderConfig, GtLocModel};
use crate::error::{Error, Result};
use crate::geotime::{CyclicTime, GeoCoord, ToyScale};
use crate::objectives::{
    loc_contrastive_loss, tml_loss, tml_targets, total_loss, LocationQueue, Temperatures, TimeDistance,
    INITIAL_TEMPERATURE, MAX_TEMPERATURE, MIN_TEMPERATURE, QUEUE_SIZE,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which objectives are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TrainMode {
    /// Image-location and image-time losses.
    #[default]
    #[serde(rename = "gtloc")]
    GtLoc,
    /// Image-time loss only; the location encoder is never touched.
    #[serde(rename = "timeloc")]
    TimeLoc,
    /// Image-location loss only; the time encoder is never touched.
    #[serde(rename = "geoloc_only", alias = "geoloc")]
    GeoLocOnly,
}

impl TrainMode {
    pub fn uses_location(&self) -> bool {
        !matches!(self, TrainMode::TimeLoc)
    }

    pub fn uses_time(&self) -> bool {
        !matches!(self, TrainMode::GeoLocOnly)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::GtLoc => "gtloc",
            TrainMode::TimeLoc => "timeloc",
            TrainMode::GeoLocOnly => "geoloc_only",
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gtloc" => Ok(Self::GtLoc),
            "timeloc" => Ok(Self::TimeLoc),
            "geoloc" | "geoloc_only" => Ok(Self::GeoLocOnly),
            other => Err(Error::invalid(format!("unknown mode '{other}' (gtloc|timeloc|geoloc)"))),
        }
    }
}

/// Options of the image-time loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TmlOptions {
    pub distance: TimeDistance,
    /// Divide each soft-target row by its sum so it becomes a distribution.
    pub renormalize_targets: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub mode: TrainMode,
    pub seed: u64,
    pub queue_size: usize,
    /// Augmented views per sample in the image-location loss.
    pub views: usize,
    pub time_scale: ToyScale,
    /// Starting values of the two learnable temperatures.
    pub init_tau_loc: f64,
    pub init_tau_time: f64,
    /// Stop once this many steps are done, without changing the schedule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_at_step: Option<u64>,
    pub tml: TmlOptions,
    pub noise: NoiseSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 512,
            lr_max: 3e-5,
            lr_min: 3e-7,
            weight_decay: 1e-6,
            mode: TrainMode::GtLoc,
            seed: 0,
            queue_size: QUEUE_SIZE,
            views: 1,
            time_scale: ToyScale::Monthly,
            init_tau_loc: INITIAL_TEMPERATURE,
            init_tau_time: INITIAL_TEMPERATURE,
            stop_at_step: None,
            tml: TmlOptions::default(),
            noise: NoiseSpec::default(),
        }
    }
}

impl TrainConfig {
    /// CPU-sized run on a few thousand samples.
    ///
    /// Each soft-target row spreads its mass almost evenly (entries differ by
    /// about 1/B), so the image-time gradient is orders of magnitude weaker
    /// than the image-location one until the latter converges. On a small
    /// training set a 4096-entry queue holds every training location several
    /// times over and the location loss never converges, and a 0.07 time
    /// temperature lets the time encoder flatten all similarities instead of
    /// ordering them. The queue is therefore shrunk to half a batch, the
    /// location temperature starts sharper and the time temperature starts
    /// near the flat-target regime. Both temperatures stay learnable.
    pub fn desk() -> Self {
        Self {
            batch_size: 64,
            lr_max: 2e-3,
            lr_min: 2e-5,
            queue_size: 32,
            init_tau_loc: 0.03,
            init_tau_time: 10.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        if self.views == 0 {
            return Err(Error::invalid("views must be at least 1"));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_max >= self.lr_min) || !self.lr_max.is_finite() {
            return Err(Error::invalid(format!(
                "learning rates need lr_max >= lr_min >= 0 and lr_max > 0, got {} / {}",
                self.lr_max, self.lr_min
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be >= 0"));
        }
        for (name, tau) in [("init_tau_loc", self.init_tau_loc), ("init_tau_time", self.init_tau_time)] {
            if !(MIN_TEMPERATURE..=MAX_TEMPERATURE).contains(&tau) {
                return Err(Error::invalid(format!(
                    "{name} must lie in [{MIN_TEMPERATURE}, {MAX_TEMPERATURE}], got {tau}"
                )));
            }
        }
        self.noise.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

/// Trainable buffer names for a mode, in optimizer order.
fn trainable_names(model: &GtLocModel<f32>, mode: TrainMode) -> Vec<String> {
    let mut names = Vec::new();
    for (prefix, mlp) in model.named_mlps() {
        if included(&prefix, mode) {
            names.extend(mlp.param_names(&prefix));
        }
    }
    if mode.uses_location() {
        names.push("temperature.log_tau_loc".into());
    }
    if mode.uses_time() {
        names.push("temperature.log_tau_time".into());
    }
    names
}

fn included(prefix: &str, mode: TrainMode) -> bool {
    if prefix.starts_with("location.") {
        mode.uses_location()
    } else if prefix.starts_with("time.") {
        mode.uses_time()
    } else {
        true
    }
}

/// Complete training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: GtLocModel<f32>,
    pub temps: Temperatures,
    pub adam: AdamState<f32>,
    pub queue: LocationQueue,
    pub step: u64,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    format_version: u32,
    encoder: EncoderConfig,
    train: TrainConfig,
    step: u64,
    adam_step: u64,
    queue_capacity: usize,
    payload_sha256: String,
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Fresh state at step 0.
    pub fn init(encoder: EncoderConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = GtLocModel::<f32>::init(encoder)?;
        let sizes = Self::buffer_sizes(&model, config.mode);
        let queue = LocationQueue::new(config.queue_size, model.embed_dim());
        let temps = Temperatures {
            log_tau_loc: config.init_tau_loc.ln() as f32,
            log_tau_time: config.init_tau_time.ln() as f32,
        };
        Ok(Self { adam: AdamState::new(&sizes), model, temps, queue, step: 0, config })
    }

    fn buffer_sizes(model: &GtLocModel<f32>, mode: TrainMode) -> Vec<usize> {
        let mut sizes = Vec::new();
        for (prefix, mlp) in model.named_mlps() {
            if included(&prefix, mode) {
                sizes.extend(mlp.params().iter().map(|p| p.len()));
            }
        }
        sizes.extend(std::iter::repeat_n(1, mode.uses_location() as usize + mode.uses_time() as usize));
        sizes
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.model.config
    }

    fn model_tensors(&self) -> Vec<(String, Tensor2<f32>)> {
        let mut out = Vec::new();
        for (prefix, mlp) in self.model.named_mlps() {
            for ((name, data), (r, c)) in mlp.param_names(&prefix).into_iter().zip(mlp.params()).zip(mlp.param_shapes())
            {
                out.push((name, Tensor2::from_vec(r, c, data.to_vec()).expect("finite parameters")));
            }
        }
        out
    }

    fn tensors(&self) -> Vec<(String, Tensor2<f32>)> {
        let mut out = self.model_tensors();
        let scalar = |v: f32| Tensor2::from_vec(1, 1, vec![v]).expect("finite temperature");
        out.push(("temperature.log_tau_loc".into(), scalar(self.temps.log_tau_loc)));
        out.push(("temperature.log_tau_time".into(), scalar(self.temps.log_tau_time)));
        let names = trainable_names(&self.model, self.config.mode);
        for (kind, bufs) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for (name, b) in names.iter().zip(bufs) {
                out.push((
                    format!("adam.{kind}.{name}"),
                    Tensor2::from_vec(1, b.len(), b.clone()).expect("finite moments"),
                ));
            }
        }
        out.push(("queue".into(), self.queue.to_tensor()));
        out
    }

    /// Hash of the architecture and the trained weights. Galleries built
    /// under one model hash stay valid for any checkpoint sharing it.
    pub fn model_hash(&self) -> String {
        let cfg = serde_json::to_vec(&self.model.config).expect("config serializes");
        let payload = tensors_to_bytes(&self.model_tensors());
        sha256_hex(&[&cfg, &payload])
    }

    /// Hash of the architecture alone; resuming requires it to match.
    pub fn arch_hash(&self) -> String {
        sha256_hex(&[&serde_json::to_vec(&self.model.config).expect("config serializes")])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = tensors_to_bytes(&self.tensors());
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            encoder: self.model.config.clone(),
            train: self.config.clone(),
            step: self.step,
            adam_step: self.adam.step,
            queue_capacity: self.queue.capacity(),
            payload_sha256: sha256_hex(&[&payload]),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    /// Hash of the complete serialized state.
    pub fn content_hash(&self) -> String {
        sha256_hex(&[&self.to_bytes()])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(ck("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(ck(format!("unsupported checkpoint version {version}")));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(12..12 + len).ok_or_else(|| ck("truncated metadata"))?;
        let meta: CheckpointMeta = serde_json::from_slice(json).map_err(|e| ck(format!("malformed metadata: {e}")))?;
        let payload = &bytes[12 + len..];
        if sha256_hex(&[payload]) != meta.payload_sha256 {
            return Err(ck("payload hash mismatch; the file is corrupted or truncated"));
        }
        let mut tensors: std::collections::HashMap<String, Tensor2<f32>> =
            read_tensors(&mut &payload[..])?.into_iter().collect();
        let mut take = |name: &str, shape: (usize, usize)| -> Result<Tensor2<f32>> {
            let t = tensors.remove(name).ok_or_else(|| ck(format!("missing tensor '{name}'")))?;
            if t.shape() != shape {
                return Err(ck(format!("tensor '{name}' has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };

        meta.train.validate()?;
        let mut model = GtLocModel::<f32>::init(meta.encoder.clone())?;
        let named: Vec<(Vec<String>, Vec<(usize, usize)>)> =
            model.named_mlps().into_iter().map(|(p, m)| (m.param_names(&p), m.param_shapes())).collect();
        for (mlp, (names, shapes)) in model.mlps_mut().into_iter().zip(named) {
            for ((dst, name), shape) in mlp.params_mut().into_iter().zip(names).zip(shapes) {
                dst.copy_from_slice(take(&name, shape)?.data());
            }
        }
        let temps = Temperatures {
            log_tau_loc: take("temperature.log_tau_loc", (1, 1))?.data()[0],
            log_tau_time: take("temperature.log_tau_time", (1, 1))?.data()[0],
        };
        let names = trainable_names(&model, meta.train.mode);
        let sizes = Self::buffer_sizes(&model, meta.train.mode);
        let mut adam = AdamState::<f32>::new(&sizes);
        adam.step = meta.adam_step;
        for (i, (name, n)) in names.iter().zip(&sizes).enumerate() {
            adam.m[i] = take(&format!("adam.m.{name}"), (1, *n))?.into_data();
            adam.v[i] = take(&format!("adam.v.{name}"), (1, *n))?.into_data();
        }
        let q = tensors.remove("queue").ok_or_else(|| ck("missing tensor 'queue'"))?;
        if q.rows() > 0 && q.cols() != model.embed_dim() {
            return Err(ck(format!("queue holds {}-d entries, model embeds {}-d", q.cols(), model.embed_dim())));
        }
        let queue = if q.rows() == 0 {
            LocationQueue::new(meta.queue_capacity, model.embed_dim())
        } else {
            LocationQueue::from_tensor(meta.queue_capacity, &q).map_err(|e| ck(e.to_string()))?
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(ck(format!("unexpected tensor '{extra}'")));
        }
        Ok(Self { model, temps, adam, queue, step: meta.step, config: meta.train })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write then rename so a crash never leaves a half-written checkpoint
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

// ---------------------------------------------------------------------------
// Gradients of one step

/// Losses and parameter gradients of one batch.
#[derive(Debug, Clone)]
pub struct StepGrads<T: Scalar> {
    pub loss_loc: Option<f64>,
    pub loss_time: Option<f64>,
    pub location: Vec<MlpGrads<T>>,
    pub time: Vec<MlpGrads<T>>,
    pub image: MlpGrads<T>,
    pub d_log_tau_loc: f64,
    pub d_log_tau_time: f64,
}

impl<T: Scalar> StepGrads<T> {
    pub fn loss(&self) -> f64 {
        total_loss(self.loss_loc, self.loss_time)
    }
}

/// Forward and backward pass of the mode's objectives on one batch.
///
/// `backbone_views[v]` and `location_views[v]` are the augmented inputs of
/// view `v`; the image-time loss uses view 0. The queue is a constant input:
/// no gradient flows into it.
#[allow(clippy::too_many_arguments)]
pub fn step_gradients<T: Scalar>(
    model: &GtLocModel<T>,
    temps: &Temperatures,
    mode: TrainMode,
    tml: &TmlOptions,
    backbone_views: &[Tensor2<T>],
    location_views: &[Vec<GeoCoord>],
    times: &[CyclicTime],
    queue: &Tensor2<T>,
) -> Result<StepGrads<T>> {
    if backbone_views.is_empty() {
        return Err(Error::invalid("at least one view is required"));
    }
    let image_passes = backbone_views.iter().map(|x| model.image.forward(x)).collect::<Result<Vec<_>>>()?;
    let mut image_up: Vec<Tensor2<T>> =
        image_passes.iter().map(|p| Tensor2::zeros(p.embeddings.rows(), p.embeddings.cols())).collect();
    let mut out = StepGrads {
        loss_loc: None,
        loss_time: None,
        location: model.location.heads().iter().map(MlpGrads::zeros_like).collect(),
        time: model.time.heads().iter().map(MlpGrads::zeros_like).collect(),
        image: MlpGrads::zeros_like(model.image.mlp()),
        d_log_tau_loc: 0.0,
        d_log_tau_time: 0.0,
    };

    if mode.uses_location() {
        if location_views.len() != backbone_views.len() {
            return Err(Error::shape("one location view per backbone view is required"));
        }
        let loc_passes = location_views
            .iter()
            .map(|g| model.location.forward(&g.iter().map(location_input).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let v_embs: Vec<Tensor2<T>> = image_passes.iter().map(|p| p.embeddings.clone()).collect();
        let l_embs: Vec<Tensor2<T>> = loc_passes.iter().map(|p| p.embeddings.clone()).collect();
        let loc = loc_contrastive_loss(&v_embs, &l_embs, queue, temps.log_tau_loc as f64)?;
        for (up, g) in image_up.iter_mut().zip(&loc.grad_image) {
            up.add_assign(g)?;
        }
        for (pass, g) in loc_passes.iter().zip(&loc.grad_location) {
            for (acc, hg) in out.location.iter_mut().zip(model.location.backward(pass, g)?) {
                acc.add_assign(&hg)?;
            }
        }
        out.loss_loc = Some(loc.loss);
        out.d_log_tau_loc = loc.grad_log_tau;
    }

    if mode.uses_time() {
        let t_pass = model.time.forward(&times.iter().map(time_input).collect::<Vec<_>>())?;
        let targets = tml_targets(times, tml.distance, tml.renormalize_targets)?;
        let tl = tml_loss(&image_passes[0].embeddings, &t_pass.embeddings, &targets, temps.log_tau_time as f64)?;
        image_up[0].add_assign(&tl.grad_image)?;
        out.time = model.time.backward(&t_pass, &tl.grad_time)?;
        out.loss_time = Some(tl.loss);
        out.d_log_tau_time = tl.grad_log_tau;
    }

    for (pass, up) in image_passes.iter().zip(&image_up) {
        out.image.add_assign(&model.image.backward(pass, up)?)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss_loc: Option<f64>,
    pub loss_time: Option<f64>,
    pub loss: f64,
    pub tau_loc: f64,
    pub tau_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub steps: u64,
    pub mean_loss_loc: Option<f64>,
    pub mean_loss_time: Option<f64>,
    pub mean_loss: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Note { message: String },
    Step(StepRecord),
    Epoch(EpochRecord),
}

pub const AUGMENTATION_NOTE: &str = "image augmentation is approximated by Gaussian noise on backbone \
embeddings (noise.backbone_std) because image-space crops and flips need the backbone itself";

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Final state, or the last good state if training aborted.
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    /// Why training stopped early, if it did.
    pub aborted: Option<String>,
}

impl TrainReport {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.log.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.log {
            let line = serde_json::to_string(r).map_err(|e| Error::data(format!("log record: {e}")))?;
            writeln!(w, "{line}").map_err(|e| Error::data(format!("writing log: {e}")))?;
        }
        Ok(())
    }
}

/// Settings that may change when resuming.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResumeOverrides {
    pub epochs: Option<u64>,
    pub stop_at_step: Option<Option<u64>>,
    /// When given, must equal the checkpoint's architecture.
    pub encoder: Option<EncoderConfig>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const LABEL_NOISE_STREAM: u64 = 1 << 40;
const STEP_STREAM_BASE: u64 = 1 << 41;

/// Steps per epoch and total scheduled steps for a dataset size.
pub fn schedule(n: usize, cfg: &TrainConfig) -> Result<(u64, u64)> {
    let spe = (n / cfg.batch_size) as u64;
    if spe == 0 {
        return Err(Error::invalid(format!(
            "training set has {n} samples, fewer than one batch of {}",
            cfg.batch_size
        )));
    }
    Ok((spe, spe * cfg.epochs))
}

/// Trains from a fresh initialization.
pub fn train(ds: &Dataset, encoder: EncoderConfig, cfg: TrainConfig) -> Result<TrainReport> {
    let ckpt = Checkpoint::init(encoder, cfg)?;
    run(ckpt, ds)
}

/// Continues a checkpoint, keeping its optimizer state, queue and step counter.
pub fn resume(mut ckpt: Checkpoint, ds: &Dataset, overrides: ResumeOverrides) -> Result<TrainReport> {
    if let Some(enc) = &overrides.encoder {
        if enc != ckpt.encoder_config() {
            return Err(Error::Checkpoint("architecture mismatch between checkpoint and configuration".into()));
        }
    }
    if let Some(e) = overrides.epochs {
        ckpt.config.epochs = e;
    }
    if let Some(s) = overrides.stop_at_step {
        ckpt.config.stop_at_step = s;
    }
    run(ckpt, ds)
}

fn run(mut ckpt: Checkpoint, ds: &Dataset) -> Result<TrainReport> {
    let cfg = ckpt.config.clone();
    cfg.validate()?;
    if ds.dim() != ckpt.model.image.input_dim() {
        return Err(Error::shape(format!(
            "dataset has {}-d backbone vectors, the model expects {}",
            ds.dim(),
            ckpt.model.image.input_dim()
        )));
    }
    let (spe, total) = schedule(ds.len(), &cfg)?;
    let end = cfg.stop_at_step.map_or(total, |s| s.min(total));

    let mut times = ds.times(cfg.time_scale)?;
    apply_label_noise(&mut times, cfg.noise.label_noise_sigma, &mut rng_for(cfg.seed, LABEL_NOISE_STREAM));

    let mut log = vec![LogRecord::Note { message: AUGMENTATION_NOTE.into() }];
    let mut batches: Option<(u64, Vec<Vec<usize>>)> = None;
    let mut epoch_acc: (u64, f64, f64, f64) = (0, 0.0, 0.0, 0.0);
    let mut aborted = None;
    while ckpt.step < end {
        let epoch = ckpt.step / spe;
        if batches.as_ref().map(|(e, _)| *e) != Some(epoch) {
            batches = Some((epoch, epoch_batches(ds.len(), cfg.batch_size, cfg.seed, epoch)));
        }
        let idx = &batches.as_ref().expect("set above").1[(ckpt.step % spe) as usize];
        let lr = cosine_lr(ckpt.step, total, cfg.lr_max, cfg.lr_min);
        let mut rng = rng_for(cfg.seed, STEP_STREAM_BASE + ckpt.step);
        match train_step(&mut ckpt, ds, &times, idx, lr, &mut rng) {
            Ok(rec) => {
                let rec = StepRecord { epoch, ..rec };
                epoch_acc.0 += 1;
                epoch_acc.1 += rec.loss_loc.unwrap_or(0.0);
                epoch_acc.2 += rec.loss_time.unwrap_or(0.0);
                epoch_acc.3 += rec.loss;
                log.push(LogRecord::Step(rec));
            }
            Err(Error::Numeric(msg)) => {
                aborted = Some(format!("step {}: {msg}", ckpt.step));
                break;
            }
            Err(e) => return Err(e),
        }
        ckpt.step += 1;
        if ckpt.step.is_multiple_of(spe) || ckpt.step == end {
            let n = epoch_acc.0 as f64;
            log.push(LogRecord::Epoch(EpochRecord {
                epoch,
                steps: epoch_acc.0,
                mean_loss_loc: cfg.mode.uses_location().then(|| epoch_acc.1 / n),
                mean_loss_time: cfg.mode.uses_time().then(|| epoch_acc.2 / n),
                mean_loss: epoch_acc.3 / n,
            }));
            epoch_acc = (0, 0.0, 0.0, 0.0);
        }
    }
    Ok(TrainReport { checkpoint: ckpt, log, aborted })
}

fn train_step(
    ckpt: &mut Checkpoint,
    ds: &Dataset,
    times: &[CyclicTime],
    idx: &[usize],
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepRecord> {
    let cfg = &ckpt.config;
    let noise = &cfg.noise;
    let backbone = ds.embeddings().select_rows(idx);
    let geos: Vec<GeoCoord> = idx.iter().map(|&i| ds.geos()[i]).collect();
    let batch_times: Vec<CyclicTime> = idx.iter().map(|&i| times[i]).collect();

    let mut backbone_views = Vec::with_capacity(cfg.views);
    let mut location_views = Vec::with_capacity(cfg.views);
    let mut view_times = Vec::new();
    for v in 0..cfg.views {
        let (g, t) = augment_batch(&geos, &batch_times, noise, rng);
        let mut x = backbone.clone();
        augment_backbone(&mut x, noise.backbone_std, rng);
        backbone_views.push(x);
        location_views.push(g);
        if v == 0 {
            view_times = t;
        }
    }
    // queue entries come from the pre-update location encoder
    let queue_entries = if cfg.mode.uses_location() {
        let jittered: Vec<GeoCoord> = geos.iter().map(|g| jitter_geo(g, noise.gps_queue_std_m, rng)).collect();
        Some(ckpt.model.embed_locations(&jittered)?)
    } else {
        None
    };

    let queue = ckpt.queue.to_tensor();
    let grads = step_gradients(
        &ckpt.model,
        &ckpt.temps,
        cfg.mode,
        &cfg.tml,
        &backbone_views,
        &location_views,
        &view_times,
        &queue,
    )?;
    let loss = grads.loss();
    if !loss.is_finite() {
        return Err(Error::numeric(format!("non-finite loss {loss}")));
    }

    let mode = cfg.mode;
    let adam_cfg = cfg.adam();
    let d_tau_loc = [grads.d_log_tau_loc as f32];
    let d_tau_time = [grads.d_log_tau_time as f32];
    let mut grad_slices: Vec<&[f32]> = Vec::new();
    if mode.uses_location() {
        grad_slices.extend(grads.location.iter().flat_map(|g| g.slices()));
    }
    if mode.uses_time() {
        grad_slices.extend(grads.time.iter().flat_map(|g| g.slices()));
    }
    grad_slices.extend(grads.image.slices());
    if mode.uses_location() {
        grad_slices.push(&d_tau_loc);
    }
    if mode.uses_time() {
        grad_slices.push(&d_tau_time);
    }

    let Checkpoint { model, temps, adam, queue, .. } = ckpt;
    let mut params: Vec<&mut [f32]> = Vec::new();
    if mode.uses_location() {
        params.extend(model.location.heads_mut().iter_mut().flat_map(|h| h.params_mut()));
    }
    if mode.uses_time() {
        params.extend(model.time.heads_mut().iter_mut().flat_map(|h| h.params_mut()));
    }
    params.extend(model.image.mlp_mut().params_mut());
    if mode.uses_location() {
        params.push(std::slice::from_mut(&mut temps.log_tau_loc));
    }
    if mode.uses_time() {
        params.push(std::slice::from_mut(&mut temps.log_tau_time));
    }
    adam.step(&adam_cfg, &mut params, &grad_slices, lr)?;
    temps.clamp();
    if let Some(entries) = queue_entries {
        queue.push_rows(&entries)?;
    }
    Ok(StepRecord {
        step: ckpt.step,
        epoch: 0,
        lr,
        loss_loc: grads.loss_loc,
        loss_time: grads.loss_time,
        loss,
        tau_loc: ckpt.temps.tau_loc(),
        tau_time: ckpt.temps.tau_time(),
    })
}
