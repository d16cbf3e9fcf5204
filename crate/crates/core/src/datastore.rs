//! Datasets of precomputed backbone embeddings with capture labels.
//!
//! On disk a dataset is a directory holding `manifest.toml`, a metadata CSV
//! (`id, lat, lon, unix_ts, source_id`), an embedding blob and, optionally, a
//! split assignment CSV (`id, split`). The module also contains the synthetic
//! generator used as a ground-truth oracle, augmentation and label noise,
//! splits, subsampling and epoch batching.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffnet::Tensor2;
use crate::error::{Error, Result};
use crate::geotime::{equal_earth_project, unix2cyclic, CyclicTime, GeoCoord, ToyScale};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"GTEM";
pub const EMBEDDING_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

/// Kilometres per degree of latitude (and of longitude at the equator).
pub const KM_PER_DEGREE: f64 = 111.32;

/// One training triplet: backbone embedding plus capture labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub backbone_vec: Vec<f32>,
    pub geo: GeoCoord,
    pub unix_ts: i64,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Eval,
    Unused,
}

impl SplitTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Eval => "eval",
            SplitTag::Unused => "unused",
        }
    }
}

impl FromStr for SplitTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "eval" => Ok(Self::Eval),
            "unused" => Ok(Self::Unused),
            other => Err(Error::invalid(format!("unknown split '{other}' (train|eval|unused)"))),
        }
    }
}

/// An in-memory dataset. Immutable once built; subsets are new datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    backbone_name: String,
    filtered: bool,
    ids: Vec<String>,
    geos: Vec<GeoCoord>,
    timestamps: Vec<i64>,
    sources: Vec<String>,
    embeddings: Tensor2<f32>,
    splits: Option<Vec<SplitTag>>,
}

impl Dataset {
    pub fn from_records(backbone_name: &str, records: Vec<SampleRecord>) -> Result<Self> {
        let dim = records.first().map(|r| r.backbone_vec.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(records.len() * dim);
        let (mut ids, mut geos, mut timestamps, mut sources) = (vec![], vec![], vec![], vec![]);
        for r in records {
            if r.backbone_vec.len() != dim {
                return Err(Error::data(format!(
                    "sample '{}' has a {}-d embedding, expected {dim}",
                    r.id,
                    r.backbone_vec.len()
                )));
            }
            data.extend_from_slice(&r.backbone_vec);
            ids.push(r.id);
            geos.push(r.geo);
            timestamps.push(r.unix_ts);
            sources.push(r.source_id);
        }
        let embeddings =
            Tensor2::from_vec(ids.len(), dim, data).map_err(|e| Error::data(format!("embeddings: {e}")))?;
        Self::from_parts(backbone_name.to_string(), false, ids, geos, timestamps, sources, embeddings, None)
    }

    #[allow(clippy::too_many_arguments)]
    fn from_parts(
        backbone_name: String,
        filtered: bool,
        ids: Vec<String>,
        geos: Vec<GeoCoord>,
        timestamps: Vec<i64>,
        sources: Vec<String>,
        embeddings: Tensor2<f32>,
        splits: Option<Vec<SplitTag>>,
    ) -> Result<Self> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::data("zero samples"));
        }
        if embeddings.rows() != n {
            return Err(Error::data(format!("{n} metadata rows but {} embeddings", embeddings.rows())));
        }
        if embeddings.cols() == 0 {
            return Err(Error::data("embedding dimension is zero"));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::data(format!("duplicate sample id '{id}'")));
            }
        }
        if let Some(i) = timestamps.iter().position(|&t| t < 0) {
            return Err(Error::data(format!("sample '{}' has negative unix_ts", ids[i])));
        }
        if let Some(s) = &splits {
            if s.len() != n {
                return Err(Error::data(format!("{} split tags for {n} samples", s.len())));
            }
        }
        Ok(Self { backbone_name, filtered, ids, geos, timestamps, sources, embeddings, splits })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn backbone_name(&self) -> &str {
        &self.backbone_name
    }

    /// Whether night/indoor filtering was applied when the data was prepared.
    pub fn filtered(&self) -> bool {
        self.filtered
    }

    pub fn set_filtered(&mut self, filtered: bool) {
        self.filtered = filtered;
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn geos(&self) -> &[GeoCoord] {
        &self.geos
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    pub fn embeddings(&self) -> &Tensor2<f32> {
        &self.embeddings
    }

    pub fn splits(&self) -> Option<&[SplitTag]> {
        self.splits.as_deref()
    }

    pub fn record(&self, i: usize) -> SampleRecord {
        SampleRecord {
            id: self.ids[i].clone(),
            backbone_vec: self.embeddings.row(i).to_vec(),
            geo: self.geos[i],
            unix_ts: self.timestamps[i],
            source_id: self.sources[i].clone(),
        }
    }

    /// Capture times of every sample on the requested time-of-year scale.
    pub fn times(&self, scale: ToyScale) -> Result<Vec<CyclicTime>> {
        self.timestamps.iter().map(|&t| unix2cyclic(t, scale)).collect()
    }

    pub fn with_splits(mut self, splits: Vec<SplitTag>) -> Result<Self> {
        if splits.len() != self.len() {
            return Err(Error::data(format!("{} split tags for {} samples", splits.len(), self.len())));
        }
        self.splits = Some(splits);
        Ok(self)
    }

    /// New dataset holding the given rows in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("row {bad} out of range for {} samples", self.len())));
        }
        Self::from_parts(
            self.backbone_name.clone(),
            self.filtered,
            idx.iter().map(|&i| self.ids[i].clone()).collect(),
            idx.iter().map(|&i| self.geos[i]).collect(),
            idx.iter().map(|&i| self.timestamps[i]).collect(),
            idx.iter().map(|&i| self.sources[i].clone()).collect(),
            self.embeddings.select_rows(idx),
            self.splits.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect()),
        )
    }

    /// Rows carrying `tag`. Without a split assignment every row counts as train.
    pub fn split_indices(&self, tag: SplitTag) -> Vec<usize> {
        match &self.splits {
            Some(s) => (0..self.len()).filter(|&i| s[i] == tag).collect(),
            None if tag == SplitTag::Train => (0..self.len()).collect(),
            None => vec![],
        }
    }

    /// The rows of one split as a standalone dataset.
    pub fn split(&self, tag: SplitTag) -> Result<Self> {
        let idx = self.split_indices(tag);
        if idx.is_empty() {
            return Err(Error::data(format!("split '{}' has zero samples", tag.as_str())));
        }
        self.subset(&idx)
    }
}

// ---------------------------------------------------------------------------
// On-disk format

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub format_version: u32,
    pub backbone_name: String,
    pub dim: usize,
    pub count: usize,
    #[serde(default)]
    pub filtered: bool,
    pub metadata: String,
    pub embeddings: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaRow {
    id: String,
    lat: f64,
    lon: f64,
    unix_ts: i64,
    source_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitRow {
    id: String,
    split: SplitTag,
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes the dataset into directory `dir` (created if missing).
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = ManifestFile {
        format_version: MANIFEST_VERSION,
        backbone_name: ds.backbone_name.clone(),
        dim: ds.dim(),
        count: ds.len(),
        filtered: ds.filtered,
        metadata: "metadata.csv".into(),
        embeddings: "embeddings.bin".into(),
        splits: ds.splits.as_ref().map(|_| "splits.csv".into()),
    };
    let meta_path = dir.join(&manifest.metadata);
    let mut w = csv::Writer::from_path(&meta_path).map_err(|e| csv_error(&meta_path, e))?;
    for i in 0..ds.len() {
        w.serialize(MetaRow {
            id: ds.ids[i].clone(),
            lat: ds.geos[i].lat(),
            lon: ds.geos[i].lon(),
            unix_ts: ds.timestamps[i],
            source_id: ds.sources[i].clone(),
        })
        .map_err(|e| csv_error(&meta_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&meta_path, e))?;
    write_embeddings(&dir.join(&manifest.embeddings), &ds.embeddings)?;
    if let (Some(tags), Some(name)) = (&ds.splits, &manifest.splits) {
        let p = dir.join(name);
        let mut w = csv::Writer::from_path(&p).map_err(|e| csv_error(&p, e))?;
        for (id, &split) in ds.ids.iter().zip(tags) {
            w.serialize(SplitRow { id: id.clone(), split }).map_err(|e| csv_error(&p, e))?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
    } else {
        // a stale assignment from an earlier save must not be picked up
        let p = dir.join("splits.csv");
        if p.exists() {
            std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    let text = toml::to_string(&manifest).map_err(|e| Error::data(format!("manifest: {e}")))?;
    let mp = dir.join(MANIFEST_FILE);
    std::fs::write(&mp, text).map_err(|e| Error::io(&mp, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::data(format!("{}: {e}", path.display()))
}

/// Loads and validates a dataset from its directory or manifest file.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mp = manifest_path(path);
    let manifest: ManifestFile =
        toml::from_str(&read_text(&mp)?).map_err(|e| Error::data(format!("{}: {}", mp.display(), e.message())))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::data(format!("{}: unsupported manifest version {}", mp.display(), manifest.format_version)));
    }
    let base = mp.parent().unwrap_or(Path::new("."));
    let meta_path = base.join(&manifest.metadata);
    let mut rdr = csv::Reader::from_path(&meta_path).map_err(|e| csv_error(&meta_path, e))?;
    let (mut ids, mut geos, mut timestamps, mut sources) = (vec![], vec![], vec![], vec![]);
    for (line, row) in rdr.deserialize::<MetaRow>().enumerate() {
        let row = row.map_err(|e| csv_error(&meta_path, e))?;
        let geo = GeoCoord::new(row.lat, row.lon)
            .map_err(|e| Error::data(format!("{} row {}: {e}", meta_path.display(), line + 1)))?;
        ids.push(row.id);
        geos.push(geo);
        timestamps.push(row.unix_ts);
        sources.push(row.source_id);
    }
    let emb_path = base.join(&manifest.embeddings);
    let embeddings = read_embeddings(&emb_path)?;
    if embeddings.cols() != manifest.dim {
        return Err(Error::data(format!(
            "manifest declares dim {} but {} holds {}-d vectors",
            manifest.dim,
            emb_path.display(),
            embeddings.cols()
        )));
    }
    if ids.len() != manifest.count {
        return Err(Error::data(format!(
            "manifest declares {} samples but metadata has {} rows",
            manifest.count,
            ids.len()
        )));
    }
    let splits = match &manifest.splits {
        None => None,
        Some(name) => {
            let p = base.join(name);
            let mut rdr = csv::Reader::from_path(&p).map_err(|e| csv_error(&p, e))?;
            let pos: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            let mut tags = vec![None; ids.len()];
            for row in rdr.deserialize::<SplitRow>() {
                let row = row.map_err(|e| csv_error(&p, e))?;
                let i = *pos
                    .get(row.id.as_str())
                    .ok_or_else(|| Error::data(format!("{}: unknown id '{}'", p.display(), row.id)))?;
                tags[i] = Some(row.split);
            }
            let tags: Option<Vec<SplitTag>> = tags.into_iter().collect();
            Some(tags.ok_or_else(|| Error::data(format!("{}: not every sample has a split", p.display())))?)
        }
    };
    Dataset::from_parts(manifest.backbone_name, manifest.filtered, ids, geos, timestamps, sources, embeddings, splits)
}

/// Header of an embedding blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingHeader {
    pub count: usize,
    pub dim: usize,
}

/// Writes `GTEM | version u32 | count u64 | dim u32 | f32 LE ...`.
pub fn write_embeddings(path: &Path, m: &Tensor2<f32>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    w.write_all(EMBEDDING_MAGIC).map_err(io)?;
    w.write_all(&EMBEDDING_FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(m.rows() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(m.cols() as u32).to_le_bytes()).map_err(io)?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Row-at-a-time reader over an embedding blob.
pub struct EmbeddingReader<R> {
    inner: R,
    header: EmbeddingHeader,
    remaining: usize,
    buf: Vec<u8>,
}

impl EmbeddingReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufReader::new(f)).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }
}

impl<R: Read> EmbeddingReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut h = [0u8; 20];
        inner.read_exact(&mut h).map_err(|_| Error::data("embedding blob truncated in header"))?;
        if &h[0..4] != EMBEDDING_MAGIC {
            return Err(Error::data("bad embedding magic"));
        }
        let version = u32::from_le_bytes(h[4..8].try_into().expect("4 bytes"));
        if version != EMBEDDING_FORMAT_VERSION {
            return Err(Error::data(format!("unsupported embedding format version {version}")));
        }
        let count = u64::from_le_bytes(h[8..16].try_into().expect("8 bytes")) as usize;
        let dim = u32::from_le_bytes(h[16..20].try_into().expect("4 bytes")) as usize;
        Ok(Self { inner, header: EmbeddingHeader { count, dim }, remaining: count, buf: vec![0; dim * 4] })
    }

    pub fn header(&self) -> EmbeddingHeader {
        self.header
    }

    /// Next row, or `None` after the last one. Trailing bytes are an error.
    pub fn next_row(&mut self) -> Result<Option<Vec<f32>>> {
        if self.remaining == 0 {
            let mut probe = [0u8; 1];
            return match self.inner.read(&mut probe) {
                Ok(0) => Ok(None),
                Ok(_) => Err(Error::data("trailing bytes after the last embedding")),
                Err(e) => Err(Error::data(format!("read failed: {e}"))),
            };
        }
        self.inner.read_exact(&mut self.buf).map_err(|_| {
            Error::data(format!("embedding blob truncated: {} of {} rows missing", self.remaining, self.header.count))
        })?;
        self.remaining -= 1;
        let row: Vec<f32> =
            self.buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "non-finite value in embedding row {}",
                self.header.count - self.remaining - 1
            )));
        }
        Ok(Some(row))
    }
}

pub fn read_embeddings(path: &Path) -> Result<Tensor2<f32>> {
    let mut r = EmbeddingReader::open(path)?;
    let EmbeddingHeader { count, dim } = r.header();
    let mut data = Vec::with_capacity(count * dim);
    let ctx = |e: Error| Error::data(format!("{}: {e}", path.display()));
    while let Some(row) = r.next_row().map_err(ctx)? {
        data.extend_from_slice(&row);
    }
    Tensor2::from_vec(count, dim, data).map_err(ctx)
}

// ---------------------------------------------------------------------------
// Synthetic data

/// How synthetic capture times are distributed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeDistribution {
    /// Uniform over the year and the day.
    #[default]
    Uniform,
    /// Concentrated around Jan 1 and midnight, so many pairs straddle the wrap.
    WrapHeavy,
}

impl FromStr for TimeDistribution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "wrap-heavy" => Ok(Self::WrapHeavy),
            other => Err(Error::invalid(format!("unknown time distribution '{other}' (uniform|wrap-heavy)"))),
        }
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub seed: u64,
    pub dim: usize,
    /// Number of capture sites; each sample is taken near one of them.
    pub sources: usize,
    /// Std of the Gaussian scatter of samples around their site, in km.
    pub site_spread_km: f64,
    pub time_distribution: TimeDistribution,
    /// Std of isotropic Gaussian noise added to each backbone vector.
    pub backbone_noise: f64,
}

impl SynthSpec {
    pub fn new(n: usize, seed: u64, dim: usize) -> Self {
        Self {
            n,
            seed,
            dim,
            sources: 64,
            site_spread_km: 25.0,
            time_distribution: TimeDistribution::Uniform,
            backbone_noise: 0.0,
        }
    }
}

/// Start of 2019 (a non-leap year) in unix seconds.
const SYNTH_YEAR_START: i64 = 1_546_300_800;
const SECONDS_PER_DAY: i64 = 86_400;
/// Spread of wrap-heavy times: days around Jan 1 and hours around midnight.
const WRAP_DAY_STD: f64 = 30.0;
const WRAP_HOUR_STD: f64 = 2.5;

/// Label features fed to the fixed random linear map.
pub fn synth_label_features(geo: &GeoCoord, t: &CyclicTime) -> Vec<f64> {
    use std::f64::consts::PI;
    let [x, y] = equal_earth_project(geo).unit_scaled();
    let (th, ph) = (2.0 * PI * t.theta(), 2.0 * PI * t.phi());
    vec![th.cos(), th.sin(), ph.cos(), ph.sin(), x, y, (PI * x).sin(), (PI * x).cos(), (PI * y).sin(), (PI * y).cos()]
}

pub const SYNTH_FEATURES: usize = 10;

/// The generator's fixed linear map (`dim × SYNTH_FEATURES`) for a seed.
pub fn synth_projection(seed: u64, dim: usize) -> Tensor2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let s = 1.0 / (SYNTH_FEATURES as f64).sqrt();
    Tensor2::from_fn(dim, SYNTH_FEATURES, |_, _| s * rng.sample::<f64, _>(StandardNormal))
}

/// Noise-free backbone vector for a label pair.
pub fn synth_backbone(proj: &Tensor2<f64>, geo: &GeoCoord, t: &CyclicTime) -> Vec<f64> {
    let f = synth_label_features(geo, t);
    proj.row_iter().map(|w| w.iter().zip(&f).map(|(a, b)| a * b).sum()).collect()
}

fn uniform_sphere(rng: &mut ChaCha8Rng) -> GeoCoord {
    let u: f64 = rng.random_range(-1.0..1.0);
    let lat = u.asin().to_degrees();
    let lon = rng.random_range(-180.0..180.0);
    GeoCoord::new(lat, lon).expect("sampled in range")
}

fn synth_timestamp(dist: TimeDistribution, rng: &mut ChaCha8Rng) -> i64 {
    let secs_in_year = 365 * SECONDS_PER_DAY;
    match dist {
        TimeDistribution::Uniform => SYNTH_YEAR_START + rng.random_range(0..secs_in_year),
        TimeDistribution::WrapHeavy => {
            let day: f64 = rng.sample::<f64, _>(StandardNormal) * WRAP_DAY_STD;
            let hour: f64 = rng.sample::<f64, _>(StandardNormal) * WRAP_HOUR_STD;
            let day = (day.floor() as i64).rem_euclid(365);
            let sec = ((hour * 3600.0).round() as i64).rem_euclid(SECONDS_PER_DAY);
            SYNTH_YEAR_START + day * SECONDS_PER_DAY + sec
        }
    }
}

/// Generates a synthetic dataset whose backbone vectors are a fixed smooth
/// function of the labels.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    if spec.n == 0 {
        return Err(Error::invalid("synthetic dataset needs n >= 1"));
    }
    if spec.dim == 0 || spec.sources == 0 {
        return Err(Error::invalid("synthetic dataset needs dim >= 1 and sources >= 1"));
    }
    if !(spec.backbone_noise >= 0.0) || !(spec.site_spread_km >= 0.0) {
        return Err(Error::invalid("backbone noise and site spread must be non-negative"));
    }
    let proj = synth_projection(spec.seed, spec.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sites: Vec<GeoCoord> = (0..spec.sources).map(|_| uniform_sphere(&mut rng)).collect();
    // separate stream so the noise level does not change the labels
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(2);
    let mut records = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let s = rng.random_range(0..spec.sources);
        let geo = jitter_geo(&sites[s], spec.site_spread_km * 1000.0, &mut rng);
        let ts = synth_timestamp(spec.time_distribution, &mut rng);
        let t = unix2cyclic(ts, ToyScale::Monthly)?;
        let clean = synth_backbone(&proj, &geo, &t);
        let backbone_vec = clean
            .iter()
            .map(|&v| {
                let noise = if spec.backbone_noise > 0.0 {
                    spec.backbone_noise * noise_rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                (v + noise) as f32
            })
            .collect();
        records.push(SampleRecord {
            id: format!("s{i:06}"),
            backbone_vec,
            geo,
            unix_ts: ts,
            source_id: format!("site{s:04}"),
        });
    }
    Dataset::from_records("synthetic", records)
}

// ---------------------------------------------------------------------------
// Augmentation and label noise

/// Gaussian augmentation and label-noise settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// GPS jitter for batch samples, in metres.
    pub gps_batch_std_m: f64,
    /// GPS jitter for entries pushed to the location queue, in metres.
    pub gps_queue_std_m: f64,
    /// Time-of-year jitter in months.
    pub time_month_std: f64,
    /// Time-of-day jitter in hours.
    pub time_hour_std: f64,
    /// One-off Gaussian noise on training time labels, in months and hours.
    pub label_noise_sigma: f64,
    /// Gaussian noise on backbone vectors, standing in for image augmentation.
    pub backbone_std: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            gps_batch_std_m: 150.0,
            gps_queue_std_m: 1500.0,
            time_month_std: 0.15,
            time_hour_std: 0.15,
            label_noise_sigma: 0.0,
            backbone_std: 0.0,
        }
    }
}

impl NoiseSpec {
    /// Every perturbation disabled.
    pub fn none() -> Self {
        Self {
            gps_batch_std_m: 0.0,
            gps_queue_std_m: 0.0,
            time_month_std: 0.0,
            time_hour_std: 0.0,
            label_noise_sigma: 0.0,
            backbone_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("gps_batch_std_m", self.gps_batch_std_m),
            ("gps_queue_std_m", self.gps_queue_std_m),
            ("time_month_std", self.time_month_std),
            ("time_hour_std", self.time_hour_std),
            ("label_noise_sigma", self.label_noise_sigma),
            ("backbone_std", self.backbone_std),
        ];
        for (name, v) in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("noise.{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn normal(std: f64, rng: &mut impl Rng) -> f64 {
    if std > 0.0 {
        Normal::new(0.0, std).expect("positive std").sample(rng)
    } else {
        0.0
    }
}

/// Moves a coordinate by isotropic Gaussian noise given in metres.
pub fn jitter_geo(g: &GeoCoord, std_m: f64, rng: &mut impl Rng) -> GeoCoord {
    if std_m <= 0.0 {
        return *g;
    }
    let north_km = normal(std_m, rng) / 1000.0;
    let east_km = normal(std_m, rng) / 1000.0;
    let cos_lat = g.lat().to_radians().cos().max(1e-9);
    let lat = g.lat() + north_km / KM_PER_DEGREE;
    let lon = g.lon() + east_km / (KM_PER_DEGREE * cos_lat);
    GeoCoord::normalized(lat, lon).expect("finite jitter")
}

/// Adds Gaussian noise in months and hours, wrapping on the torus.
pub fn jitter_time(t: &CyclicTime, month_std: f64, hour_std: f64, rng: &mut impl Rng) -> CyclicTime {
    let dm = normal(month_std, rng);
    let dh = normal(hour_std, rng);
    t.shifted(dm / 12.0, dh / 24.0)
}

/// Jitters a batch of labels with the batch-level augmentation stds.
pub fn augment_batch(
    geos: &[GeoCoord],
    times: &[CyclicTime],
    noise: &NoiseSpec,
    rng: &mut impl Rng,
) -> (Vec<GeoCoord>, Vec<CyclicTime>) {
    let g = geos.iter().map(|g| jitter_geo(g, noise.gps_batch_std_m, rng)).collect();
    let t = times.iter().map(|t| jitter_time(t, noise.time_month_std, noise.time_hour_std, rng)).collect();
    (g, t)
}

/// Adds `N(0, sigma)` backbone noise in place.
pub fn augment_backbone(m: &mut Tensor2<f32>, std: f64, rng: &mut impl Rng) {
    if std <= 0.0 {
        return;
    }
    for v in m.data_mut() {
        *v += normal(std, rng) as f32;
    }
}

/// Perturbs training time labels once, with `sigma` in months and hours.
pub fn apply_label_noise(times: &mut [CyclicTime], sigma: f64, rng: &mut impl Rng) {
    if sigma <= 0.0 {
        return;
    }
    for t in times.iter_mut() {
        *t = jitter_time(t, sigma, sigma, rng);
    }
}

// ---------------------------------------------------------------------------
// Splits, subsampling and batching

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Random,
    CrossSource,
}

impl FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "cross_source" | "cross-source" => Ok(Self::CrossSource),
            other => Err(Error::invalid(format!("unknown split mode '{other}' (random|cross_source)"))),
        }
    }
}

/// Target fractions of the data for training and evaluation; any remainder is unused.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub eval: f64,
}

impl SplitFractions {
    fn validate(&self) -> Result<()> {
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.train) || !ok(self.eval) || self.train + self.eval > 1.0 + 1e-12 {
            return Err(Error::invalid(format!(
                "split fractions must lie in [0, 1] and sum to at most 1, got {} + {}",
                self.train, self.eval
            )));
        }
        Ok(())
    }
}

/// Assigns every sample to train, eval or unused.
///
/// `random` shuffles samples; `cross_source` shuffles whole sources so that
/// no source appears on both sides.
pub fn make_splits(ds: &Dataset, mode: SplitMode, fractions: SplitFractions, seed: u64) -> Result<Vec<SplitTag>> {
    fractions.validate()?;
    let n = ds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = (fractions.train * n as f64).round() as usize;
    let n_eval = ((fractions.eval * n as f64).round() as usize).min(n - n_train.min(n));
    let mut tags = vec![SplitTag::Unused; n];
    match mode {
        SplitMode::Random => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for &i in &order[..n_train.min(n)] {
                tags[i] = SplitTag::Train;
            }
            for &i in &order[n_train.min(n)..n_train.min(n) + n_eval] {
                tags[i] = SplitTag::Eval;
            }
        }
        SplitMode::CrossSource => {
            let unique: BTreeSet<&str> = ds.sources.iter().map(|s| s.as_str()).collect();
            if unique.len() < 2 {
                return Err(Error::invalid("cross_source split needs at least two sources"));
            }
            let mut order: Vec<&str> = unique.into_iter().collect();
            order.shuffle(&mut rng);
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for s in &ds.sources {
                *counts.entry(s.as_str()).or_default() += 1;
            }
            let mut side: HashMap<&str, SplitTag> = HashMap::new();
            let (mut got_train, mut got_eval) = (0usize, 0usize);
            let last = order.len() - 1;
            for (k, s) in order.iter().enumerate() {
                let c = counts[s];
                // keep one source back for eval when an eval share is requested
                let eval_reserved = fractions.eval > 0.0 && got_eval == 0 && k == last;
                let tag = if got_train < n_train && !eval_reserved {
                    got_train += c;
                    SplitTag::Train
                } else if got_eval < n_eval || (fractions.eval > 0.0 && got_eval == 0) {
                    got_eval += c;
                    SplitTag::Eval
                } else {
                    SplitTag::Unused
                };
                side.insert(s, tag);
            }
            for (i, s) in ds.sources.iter().enumerate() {
                tags[i] = side[s.as_str()];
            }
        }
    }
    Ok(tags)
}

/// Uniform subsample without replacement; kept rows stay in their original order.
pub fn subsample(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("subsample fraction must be in (0, 1], got {fraction}")));
    }
    let k = ((fraction * ds.len() as f64).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, ds.len(), k).into_vec();
    idx.sort_unstable();
    ds.subset(&idx)
}

/// Shuffled batches for one epoch; the incomplete final batch is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5eed_0000 + epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.chunks_exact(batch_size.max(1)).map(|c| c.to_vec()).collect()
}
