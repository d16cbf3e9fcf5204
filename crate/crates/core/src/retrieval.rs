//! Gallery-based inference and evaluation.
//!
//! A gallery pairs raw labels (GPS points, times, or image records) with
//! their embeddings under one checkpoint. Prediction is exact top-k search by
//! dot product; evaluation turns predictions into month/hour errors, TPS,
//! geodesic accuracies and compositional recall.

use std::cmp::Ordering;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{read_embeddings, write_embeddings, Dataset};
use crate::diffnet::{dot, Tensor2};
use crate::encoders::GtLocModel;
use crate::error::{Error, Result};
use crate::geotime::{cyclic_abs_error, geodesic_km, tps, CyclicTime, GeoCoord, ToyScale};

/// Default geodesic accuracy thresholds in km.
pub const DEFAULT_THRESHOLDS_KM: [f64; 5] = [1.0, 25.0, 200.0, 750.0, 2500.0];

/// Default number of retrieved entries feeding a time histogram.
pub const DEFAULT_HISTOGRAM_TOPK: usize = 1000;

/// Composed-retrieval hit radii.
pub const COMPOSED_MONTH_TOL: f64 = 1.0;
pub const COMPOSED_HOUR_TOL: f64 = 1.0;
pub const COMPOSED_KM_TOL: f64 = 25.0;

const UNIT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GalleryKind {
    Gps,
    Time,
    Image,
}

impl FromStr for GalleryKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gps" => Ok(Self::Gps),
            "time" => Ok(Self::Time),
            "image" => Ok(Self::Image),
            other => Err(Error::invalid(format!("unknown gallery kind '{other}' (gps|time|image)"))),
        }
    }
}

impl GalleryKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            GalleryKind::Gps => "gps",
            GalleryKind::Time => "time",
            GalleryKind::Image => "image",
        }
    }
}

/// Raw label of one gallery entry. GPS galleries fill `geo`, time galleries
/// fill `time`, image galleries fill both.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryItem {
    pub id: String,
    pub geo: Option<GeoCoord>,
    pub time: Option<CyclicTime>,
}

impl GalleryItem {
    pub fn gps(id: impl Into<String>, g: GeoCoord) -> Self {
        Self { id: id.into(), geo: Some(g), time: None }
    }

    pub fn time(id: impl Into<String>, t: CyclicTime) -> Self {
        Self { id: id.into(), geo: None, time: Some(t) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    kind: GalleryKind,
    items: Vec<GalleryItem>,
    emb: Tensor2<f32>,
    /// Content hash of the checkpoint that produced `emb`.
    model_hash: String,
}

impl Gallery {
    pub fn new(kind: GalleryKind, items: Vec<GalleryItem>, emb: Tensor2<f32>, model_hash: String) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("empty gallery"));
        }
        if items.len() != emb.rows() {
            return Err(Error::data(format!("{} gallery labels but {} embeddings", items.len(), emb.rows())));
        }
        for (i, it) in items.iter().enumerate() {
            let ok = match kind {
                GalleryKind::Gps => it.geo.is_some(),
                GalleryKind::Time => it.time.is_some(),
                GalleryKind::Image => it.geo.is_some() && it.time.is_some(),
            };
            if !ok {
                return Err(Error::data(format!(
                    "gallery item {i} lacks the labels a {} gallery needs",
                    kind.as_str()
                )));
            }
        }
        Ok(Self { kind, items, emb, model_hash })
    }

    pub fn kind(&self) -> GalleryKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[GalleryItem] {
        &self.items
    }

    pub fn embeddings(&self) -> &Tensor2<f32> {
        &self.emb
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    fn expect_kind(&self, kinds: &[GalleryKind]) -> Result<()> {
        if kinds.contains(&self.kind) {
            Ok(())
        } else {
            Err(Error::invalid(format!("expected a {} gallery, got {}", kinds[0].as_str(), self.kind.as_str())))
        }
    }

    /// Re-embeds the labels if the gallery was built with another checkpoint.
    /// Returns whether anything changed. Image galleries cannot be refreshed
    /// without their backbone vectors, so a mismatch is an error for them.
    pub fn refresh(&mut self, model: &GtLocModel<f32>, model_hash: &str) -> Result<bool> {
        if self.model_hash == model_hash {
            return Ok(false);
        }
        if self.kind == GalleryKind::Image {
            return Err(Error::data("image gallery was built with a different checkpoint; rebuild it"));
        }
        *self = build_gallery(self.kind, std::mem::take(&mut self.items), model, model_hash)?;
        Ok(true)
    }
}

/// Encodes GPS or time labels into a gallery.
pub fn build_gallery(
    kind: GalleryKind,
    items: Vec<GalleryItem>,
    model: &GtLocModel<f32>,
    model_hash: &str,
) -> Result<Gallery> {
    if items.is_empty() {
        return Err(Error::invalid("empty gallery"));
    }
    let emb = match kind {
        GalleryKind::Gps => {
            let g: Option<Vec<GeoCoord>> = items.iter().map(|i| i.geo).collect();
            model.embed_locations(&g.ok_or_else(|| Error::invalid("gps gallery item without coordinates"))?)?
        }
        GalleryKind::Time => {
            let t: Option<Vec<CyclicTime>> = items.iter().map(|i| i.time).collect();
            model.embed_times(&t.ok_or_else(|| Error::invalid("time gallery item without a time"))?)?
        }
        GalleryKind::Image => {
            return Err(Error::invalid("image galleries are built from a dataset"));
        }
    };
    Gallery::new(kind, items, emb, model_hash.to_string())
}

/// Encodes the backbone vectors of `ds` into an image gallery labelled by
/// each sample's ground truth.
pub fn build_image_gallery(ds: &Dataset, model: &GtLocModel<f32>, model_hash: &str) -> Result<Gallery> {
    let times = ds.times(ToyScale::Monthly)?;
    let items = (0..ds.len())
        .map(|i| GalleryItem { id: ds.ids()[i].clone(), geo: Some(ds.geos()[i]), time: Some(times[i]) })
        .collect();
    let emb = model.embed_images(ds.embeddings())?;
    Gallery::new(GalleryKind::Image, items, emb, model_hash.to_string())
}

/// `size` row indices drawn from `0..n`: without replacement while possible,
/// then with replacement for the remainder.
pub fn sample_label_indices(n: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || size == 0 {
        return Err(Error::invalid("empty gallery"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = size.min(n);
    let mut idx = rand::seq::index::sample(&mut rng, n, first).into_vec();
    while idx.len() < size {
        idx.push(rng.random_range(0..n));
    }
    Ok(idx)
}

/// GPS gallery labels sampled from a dataset.
pub fn gps_items_from(ds: &Dataset, size: usize, seed: u64) -> Result<Vec<GalleryItem>> {
    let idx = sample_label_indices(ds.len(), size, seed)?;
    Ok(idx.iter().map(|&i| GalleryItem::gps(ds.ids()[i].clone(), ds.geos()[i])).collect())
}

/// Time gallery labels sampled from a dataset.
pub fn time_items_from(ds: &Dataset, size: usize, seed: u64, scale: ToyScale) -> Result<Vec<GalleryItem>> {
    let idx = sample_label_indices(ds.len(), size, seed)?;
    let times = ds.times(scale)?;
    Ok(idx.iter().map(|&i| GalleryItem::time(ds.ids()[i].clone(), times[i])).collect())
}

/// Time gallery labels drawn uniformly over the torus.
pub fn uniform_time_items(size: usize, seed: u64) -> Result<Vec<GalleryItem>> {
    if size == 0 {
        return Err(Error::invalid("empty gallery"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..size)
        .map(|i| {
            let t = CyclicTime::new(rng.random(), rng.random()).expect("finite");
            GalleryItem::time(format!("u{i}"), t)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Gallery files: <prefix>.bin (embeddings), <prefix>.csv (labels), <prefix>.toml

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalleryMeta {
    pub kind: GalleryKind,
    pub size: usize,
    pub model_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GalleryRow {
    id: String,
    lat: Option<f64>,
    lon: Option<f64>,
    theta: Option<f64>,
    phi: Option<f64>,
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn save_gallery(g: &Gallery, prefix: &Path, seed: Option<u64>) -> Result<()> {
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_embeddings(&with_ext(prefix, "bin"), &g.emb)?;
    let csv_path = with_ext(prefix, "csv");
    let err = |e: csv::Error| Error::data(format!("{}: {e}", csv_path.display()));
    let mut w = csv::Writer::from_path(&csv_path).map_err(err)?;
    for it in &g.items {
        w.serialize(GalleryRow {
            id: it.id.clone(),
            lat: it.geo.map(|g| g.lat()),
            lon: it.geo.map(|g| g.lon()),
            theta: it.time.map(|t| t.theta()),
            phi: it.time.map(|t| t.phi()),
        })
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let meta = GalleryMeta { kind: g.kind, size: g.len(), model_hash: g.model_hash.clone(), seed };
    let toml_path = with_ext(prefix, "toml");
    let text = toml::to_string(&meta).map_err(|e| Error::data(format!("gallery meta: {e}")))?;
    std::fs::write(&toml_path, text).map_err(|e| Error::io(&toml_path, e))
}

pub fn load_gallery(prefix: &Path) -> Result<Gallery> {
    let toml_path = with_ext(prefix, "toml");
    let text = std::fs::read_to_string(&toml_path).map_err(|e| Error::io(&toml_path, e))?;
    let meta: GalleryMeta =
        toml::from_str(&text).map_err(|e| Error::data(format!("{}: {}", toml_path.display(), e.message())))?;
    let emb = read_embeddings(&with_ext(prefix, "bin"))?;
    let csv_path = with_ext(prefix, "csv");
    let err = |e: csv::Error| Error::data(format!("{}: {e}", csv_path.display()));
    let mut r = csv::Reader::from_path(&csv_path).map_err(err)?;
    let mut items = Vec::new();
    for (line, row) in r.deserialize::<GalleryRow>().enumerate() {
        let row = row.map_err(err)?;
        let ctx = |e: Error| Error::data(format!("{} row {}: {e}", csv_path.display(), line + 1));
        let geo = match (row.lat, row.lon) {
            (Some(lat), Some(lon)) => Some(GeoCoord::new(lat, lon).map_err(ctx)?),
            (None, None) => None,
            _ => return Err(ctx(Error::data("lat and lon must both be present or both empty"))),
        };
        let time = match (row.theta, row.phi) {
            (Some(t), Some(p)) => Some(CyclicTime::new(t, p).map_err(ctx)?),
            (None, None) => None,
            _ => return Err(ctx(Error::data("theta and phi must both be present or both empty"))),
        };
        items.push(GalleryItem { id: row.id, geo, time });
    }
    if items.len() != meta.size {
        return Err(Error::data(format!(
            "{} declares {} entries but the label file has {}",
            toml_path.display(),
            meta.size,
            items.len()
        )));
    }
    Gallery::new(meta.kind, items, emb, meta.model_hash)
}

// ---------------------------------------------------------------------------
// Retrieval

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// Gallery rows, best first.
    pub indices: Vec<usize>,
    /// Dot-product similarities, non-increasing.
    pub similarities: Vec<f32>,
}

fn check_unit(q: &[f32]) -> Result<()> {
    let n = (dot(q, q) as f64).sqrt();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::invalid(format!("query embedding has norm {n:.6}, expected 1")));
    }
    Ok(())
}

const SCORE_CHUNK: usize = 4096;

/// Similarity of `query` to every row. Rows are scored independently, so
/// the result does not depend on how work is split across threads.
pub fn score_all(query: &[f32], emb: &Tensor2<f32>) -> Result<Vec<f32>> {
    if query.len() != emb.cols() {
        return Err(Error::shape(format!("query is {}-d, gallery is {}-d", query.len(), emb.cols())));
    }
    let mut out = vec![0.0f32; emb.rows()];
    if emb.cols() == 0 {
        return Ok(out);
    }
    out.par_chunks_mut(SCORE_CHUNK).zip(emb.data().par_chunks(SCORE_CHUNK * emb.cols())).for_each(|(o, rows)| {
        for (s, r) in o.iter_mut().zip(rows.chunks_exact(emb.cols())) {
            *s = dot(query, r);
        }
    });
    Ok(out)
}

/// Best-first order: higher similarity, then lower index.
fn rank_order(scores: &[f32], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices of the `k` best scores, best first.
pub fn top_k(scores: &[f32], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::invalid(format!("k = {k} outside 1..={}", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    Ok(idx)
}

/// Exact top-k search by dot product.
pub fn retrieve(query: &[f32], gallery: &Gallery, k: usize) -> Result<RetrievalResult> {
    retrieve_in(query, &gallery.emb, k)
}

pub fn retrieve_in(query: &[f32], emb: &Tensor2<f32>, k: usize) -> Result<RetrievalResult> {
    if emb.rows() == 0 {
        return Err(Error::invalid("empty gallery"));
    }
    if k == 0 || k > emb.rows() {
        return Err(Error::invalid(format!("k = {k} outside 1..={} (gallery size)", emb.rows())));
    }
    check_unit(query)?;
    let scores = score_all(query, emb)?;
    let indices = top_k(&scores, k)?;
    let similarities = indices.iter().map(|&i| scores[i]).collect();
    Ok(RetrievalResult { indices, similarities })
}

/// Top-k for many queries at once, parallel across queries.
pub fn retrieve_many(queries: &Tensor2<f32>, gallery: &Gallery, k: usize) -> Result<Vec<RetrievalResult>> {
    (0..queries.rows()).into_par_iter().map(|i| retrieve(queries.row(i), gallery, k)).collect()
}

pub fn predict_time(image_emb: &[f32], gallery: &Gallery) -> Result<CyclicTime> {
    gallery.expect_kind(&[GalleryKind::Time, GalleryKind::Image])?;
    let r = retrieve(image_emb, gallery, 1)?;
    Ok(gallery.items[r.indices[0]].time.expect("validated on construction"))
}

pub fn predict_geo(image_emb: &[f32], gallery: &Gallery) -> Result<GeoCoord> {
    gallery.expect_kind(&[GalleryKind::Gps, GalleryKind::Image])?;
    let r = retrieve(image_emb, gallery, 1)?;
    Ok(gallery.items[r.indices[0]].geo.expect("validated on construction"))
}

/// Elementwise mean of two unit embeddings, renormalized.
pub fn compose_query(time_emb: &[f32], loc_emb: &[f32]) -> Result<Vec<f32>> {
    if time_emb.len() != loc_emb.len() {
        return Err(Error::shape(format!("{}-d time vs {}-d location embedding", time_emb.len(), loc_emb.len())));
    }
    check_unit(time_emb)?;
    check_unit(loc_emb)?;
    let mean: Vec<f32> = time_emb.iter().zip(loc_emb).map(|(a, b)| 0.5 * (a + b)).collect();
    let n = dot(&mean, &mean).sqrt();
    if !(n as f64 >= 1e-6) {
        return Err(Error::numeric("degenerate composition: time and location embeddings cancel"));
    }
    Ok(mean.iter().map(|v| v / n).collect())
}

/// Images whose context best matches a joint time and place query.
pub fn composed_retrieval(
    model: &GtLocModel<f32>,
    time: &CyclicTime,
    geo: &GeoCoord,
    image_gallery: &Gallery,
    k: usize,
) -> Result<RetrievalResult> {
    image_gallery.expect_kind(&[GalleryKind::Image])?;
    let q = compose_query(&model.encode_time(time)?, &model.encode_location(geo)?)?;
    retrieve(&q, image_gallery, k)
}

/// Similarity-weighted month and hour histograms over the top-k time matches.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeHistogram {
    pub months: Vec<f64>,
    pub hours: Vec<f64>,
}

fn bin_of(x: f64, bins: usize) -> usize {
    ((x * bins as f64).floor() as usize).min(bins - 1)
}

pub fn time_histogram(
    image_emb: &[f32],
    gallery: &Gallery,
    bins_month: usize,
    bins_hour: usize,
    topk: usize,
) -> Result<TimeHistogram> {
    gallery.expect_kind(&[GalleryKind::Time, GalleryKind::Image])?;
    if bins_month == 0 || bins_hour == 0 {
        return Err(Error::invalid("histograms need at least one bin per axis"));
    }
    let r = retrieve(image_emb, gallery, topk)?;
    let mut h = TimeHistogram { months: vec![0.0; bins_month], hours: vec![0.0; bins_hour] };
    for (&i, &s) in r.indices.iter().zip(&r.similarities) {
        let t = gallery.items[i].time.expect("validated on construction");
        h.months[bin_of(t.theta(), bins_month)] += s as f64;
        h.hours[bin_of(t.phi(), bins_hour)] += s as f64;
    }
    Ok(h)
}

pub fn write_histogram_csv<W: Write>(w: W, hists: &[(String, TimeHistogram)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::data(format!("histogram csv: {e}"));
    out.write_record(["query", "axis", "bin", "weight"]).map_err(err)?;
    for (q, h) in hists {
        for (axis, bins) in [("month", &h.months), ("hour", &h.hours)] {
            for (b, v) in bins.iter().enumerate() {
                out.write_record([q.as_str(), axis, &b.to_string(), &v.to_string()]).map_err(err)?;
            }
        }
    }
    out.flush().map_err(|e| Error::data(format!("histogram csv: {e}")))
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq)]
pub struct TimeMetrics {
    pub n: usize,
    pub month_err: f64,
    pub hour_err: f64,
    pub tps: f64,
    pub predictions: Vec<CyclicTime>,
}

/// Month/hour errors and TPS of top-1 time predictions.
pub fn eval_time(image_embs: &Tensor2<f32>, truth: &[CyclicTime], gallery: &Gallery) -> Result<TimeMetrics> {
    if truth.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    if truth.len() != image_embs.rows() {
        return Err(Error::shape(format!("{} embeddings for {} labels", image_embs.rows(), truth.len())));
    }
    gallery.expect_kind(&[GalleryKind::Time, GalleryKind::Image])?;
    let predictions = (0..truth.len())
        .into_par_iter()
        .map(|i| predict_time(image_embs.row(i), gallery))
        .collect::<Result<Vec<_>>>()?;
    let (mut m, mut h) = (0.0, 0.0);
    for (p, t) in predictions.iter().zip(truth) {
        let (em, eh) = cyclic_abs_error(p, t);
        m += em;
        h += eh;
    }
    let n = truth.len();
    let (month_err, hour_err) = (m / n as f64, h / n as f64);
    Ok(TimeMetrics { n, month_err, hour_err, tps: tps(month_err, hour_err)?, predictions })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoMetrics {
    pub n: usize,
    /// `(threshold_km, fraction of samples within it)`.
    pub accuracy: Vec<(f64, f64)>,
    pub median_km: f64,
    pub errors_km: Vec<f64>,
    pub predictions: Vec<GeoCoord>,
}

impl GeoMetrics {
    pub fn accuracy_at(&self, km: f64) -> Option<f64> {
        self.accuracy.iter().find(|(t, _)| *t == km).map(|(_, a)| *a)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Geodesic accuracy at each threshold plus the median error of top-1 GPS predictions.
pub fn eval_geo(
    image_embs: &Tensor2<f32>,
    truth: &[GeoCoord],
    gallery: &Gallery,
    thresholds_km: &[f64],
) -> Result<GeoMetrics> {
    if truth.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    if truth.len() != image_embs.rows() {
        return Err(Error::shape(format!("{} embeddings for {} labels", image_embs.rows(), truth.len())));
    }
    gallery.expect_kind(&[GalleryKind::Gps, GalleryKind::Image])?;
    let predictions = (0..truth.len())
        .into_par_iter()
        .map(|i| predict_geo(image_embs.row(i), gallery))
        .collect::<Result<Vec<_>>>()?;
    let errors_km: Vec<f64> = predictions.iter().zip(truth).map(|(p, t)| geodesic_km(p, t)).collect();
    let n = truth.len();
    let accuracy = thresholds_km
        .iter()
        .map(|&km| (km, errors_km.iter().filter(|&&e| e <= km).count() as f64 / n as f64))
        .collect();
    Ok(GeoMetrics { n, accuracy, median_km: median(&errors_km), errors_km, predictions })
}

/// Whether an image's labels satisfy a joint query.
pub fn composed_hit(query_time: &CyclicTime, query_geo: &GeoCoord, item: &GalleryItem) -> bool {
    let (Some(t), Some(g)) = (item.time, item.geo) else { return false };
    let (em, eh) = cyclic_abs_error(&t, query_time);
    em <= COMPOSED_MONTH_TOL && eh <= COMPOSED_HOUR_TOL && geodesic_km(&g, query_geo) <= COMPOSED_KM_TOL
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallAtK {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

/// Recall@{1,5,10} of composed retrieval over the given joint queries.
pub fn eval_composed(
    model: &GtLocModel<f32>,
    image_gallery: &Gallery,
    queries: &[(CyclicTime, GeoCoord)],
) -> Result<RecallAtK> {
    if queries.is_empty() {
        return Err(Error::invalid("no composed queries"));
    }
    let k = 10.min(image_gallery.len());
    let first_hits = queries
        .par_iter()
        .map(|(t, g)| {
            let r = composed_retrieval(model, t, g, image_gallery, k)?;
            Ok(r.indices.iter().position(|&i| composed_hit(t, g, &image_gallery.items[i])))
        })
        .collect::<Result<Vec<Option<usize>>>>()?;
    let recall = |cut: usize| {
        first_hits.iter().filter(|h| matches!(h, Some(p) if *p < cut)).count() as f64 / queries.len() as f64
    };
    Ok(RecallAtK { r1: recall(1), r5: recall(5), r10: recall(10) })
}

/// Metric rows `(name, value)` as a two-column CSV.
pub fn write_metrics_csv<W: Write>(w: W, rows: &[(String, f64)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::data(format!("metrics csv: {e}"));
    out.write_record(["metric", "value"]).map_err(err)?;
    for (k, v) in rows {
        out.write_record([k.as_str(), &v.to_string()]).map_err(err)?;
    }
    out.flush().map_err(|e| Error::data(format!("metrics csv: {e}")))
}

/// Flattens metrics into CSV rows with stable names.
pub fn metric_rows(time: Option<&TimeMetrics>, geo: Option<&GeoMetrics>) -> Vec<(String, f64)> {
    let mut rows = Vec::new();
    if let Some(t) = time {
        rows.push(("n".into(), t.n as f64));
        rows.push(("month_err".into(), t.month_err));
        rows.push(("hour_err".into(), t.hour_err));
        rows.push(("tps".into(), t.tps));
    }
    if let Some(g) = geo {
        if time.is_none() {
            rows.push(("n".into(), g.n as f64));
        }
        for (km, acc) in &g.accuracy {
            rows.push((format!("acc@{km}km"), *acc));
        }
        rows.push(("median_km".into(), g.median_km));
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::l2_normalize_rows;
    use crate::encoders::EncoderConfig;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_unit(rows: usize, dim: usize, seed: u64) -> Tensor2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Tensor2::from_fn(rows, dim, |_, _| rng.random_range(-1.0f32..1.0));
        l2_normalize_rows(&m).unwrap().0
    }

    fn gallery_of(emb: Tensor2<f32>) -> Gallery {
        let items = (0..emb.rows())
            .map(|i| GalleryItem::time(format!("{i}"), CyclicTime::new(i as f64 * 0.001, 0.5).unwrap()))
            .collect();
        Gallery::new(GalleryKind::Time, items, emb, "h".into()).unwrap()
    }

    /// Exhaustive scan: straight loop dot products, full sort by (sim desc, index asc).
    fn brute_force(q: &[f32], emb: &Tensor2<f32>, k: usize) -> (Vec<usize>, Vec<f32>) {
        let mut scored: Vec<(usize, f32)> = (0..emb.rows())
            .map(|i| {
                let mut s = 0.0f32;
                for (a, b) in q.iter().zip(emb.row(i)) {
                    s += a * b;
                }
                (i, s)
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored.into_iter().unzip()
    }

    #[test]
    fn matches_brute_force_scan() {
        for (size, k) in [(10, 10), (1000, 25)] {
            let g = gallery_of(random_unit(size, 16, size as u64));
            let qs = random_unit(20, 16, 99);
            for q in qs.row_iter() {
                let r = retrieve(q, &g, k).unwrap();
                let (idx, sims) = brute_force(q, g.embeddings(), k);
                assert_eq!(r.indices, idx);
                assert_eq!(r.similarities, sims);
            }
        }
    }

    #[test]
    fn query_equal_to_entry_ranks_first() {
        let emb = random_unit(50, 8, 3);
        let g = gallery_of(emb.clone());
        let r = retrieve(emb.row(17), &g, 3).unwrap();
        assert_eq!(r.indices[0], 17);
        assert!((r.similarities[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn full_ranking_is_a_permutation() {
        let g = gallery_of(random_unit(40, 8, 4));
        let q = random_unit(1, 8, 5);
        let r = retrieve(q.row(0), &g, 40).unwrap();
        let mut idx = r.indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..40).collect::<Vec<_>>());
        assert!(r.similarities.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn ties_break_by_lower_index() {
        let e = Tensor2::from_vec(4, 2, vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let g = gallery_of(e);
        let r = retrieve(&[1.0, 0.0], &g, 4).unwrap();
        assert_eq!(r.indices, vec![1, 3, 0, 2]);
    }

    #[test]
    fn k_out_of_range_and_bad_queries_rejected() {
        let g = gallery_of(random_unit(5, 4, 1));
        let q = random_unit(1, 4, 2);
        assert!(retrieve(q.row(0), &g, 0).is_err());
        assert!(retrieve(q.row(0), &g, 6).is_err());
        assert!(retrieve(&[1.0, 1.0, 0.0, 0.0], &g, 1).is_err());
        assert!(retrieve(&[1.0, 0.0], &g, 1).is_err());
        assert!(Gallery::new(GalleryKind::Time, vec![], Tensor2::zeros(0, 4), "h".into())
            .unwrap_err()
            .to_string()
            .contains("empty gallery"));
    }

    #[test]
    fn single_entry_gallery_always_returns_it() {
        let g = gallery_of(random_unit(1, 6, 1));
        for q in random_unit(10, 6, 2).row_iter() {
            assert_eq!(retrieve(q, &g, 1).unwrap().indices, vec![0]);
            assert_eq!(predict_time(q, &g).unwrap(), g.items()[0].time.unwrap());
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let g = gallery_of(random_unit(20_000, 16, 7));
        let qs = random_unit(8, 16, 8);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| retrieve_many(&qs, &g, 50).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn compose_query_cases() {
        let a = [1.0f32, 0.0, 0.0];
        assert_eq!(compose_query(&a, &a).unwrap(), a.to_vec());
        let b = [0.0f32, 1.0, 0.0];
        let c = compose_query(&a, &b).unwrap();
        let inv = std::f32::consts::FRAC_1_SQRT_2;
        assert!((dot(&c, &a) - inv).abs() < 1e-6 && (dot(&c, &b) - inv).abs() < 1e-6);
        let err = compose_query(&a, &[-1.0, 0.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("degenerate composition"));
        // straight-line mean and normalize in f64
        let m = random_unit(2, 9, 12);
        let got = compose_query(m.row(0), m.row(1)).unwrap();
        let mean: Vec<f64> = m.row(0).iter().zip(m.row(1)).map(|(x, y)| (*x as f64 + *y as f64) / 2.0).collect();
        let n = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (g, w) in got.iter().zip(&mean) {
            assert!((*g as f64 - w / n).abs() < 1e-6);
        }
    }

    #[test]
    fn histogram_cases() {
        // identical timestamps: all mass in one bin per axis
        let emb = random_unit(30, 8, 2);
        let t = CyclicTime::new(0.26, 0.51).unwrap();
        let items = (0..30).map(|i| GalleryItem::time(format!("{i}"), t)).collect();
        let g = Gallery::new(GalleryKind::Time, items, emb, "h".into()).unwrap();
        let q = random_unit(1, 8, 3);
        let h = time_histogram(q.row(0), &g, 12, 24, 30).unwrap();
        assert_eq!(h.months.iter().filter(|v| **v != 0.0).count(), 1);
        assert!(h.months[3] != 0.0 && h.hours[12] != 0.0);

        // uniform similarities: proportional to occupancy
        let emb = Tensor2::from_fn(6, 2, |_, c| if c == 0 { 1.0f32 } else { 0.0 });
        let thetas = [0.05, 0.05, 0.05, 0.55, 0.55, 0.95];
        let items = thetas
            .iter()
            .enumerate()
            .map(|(i, &th)| GalleryItem::time(format!("{i}"), CyclicTime::new(th, 0.0).unwrap()))
            .collect();
        let g = Gallery::new(GalleryKind::Time, items, emb, "h".into()).unwrap();
        let h = time_histogram(&[1.0, 0.0], &g, 12, 24, 6).unwrap();
        assert_eq!((h.months[0], h.months[6], h.months[11]), (3.0, 2.0, 1.0));
        assert_eq!(h.hours[0], 6.0);
    }

    #[test]
    fn histogram_matches_straight_line_recomputation() {
        let emb = random_unit(200, 8, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let items: Vec<GalleryItem> = (0..200)
            .map(|i| GalleryItem::time(format!("{i}"), CyclicTime::new(rng.random(), rng.random()).unwrap()))
            .collect();
        let g = Gallery::new(GalleryKind::Time, items.clone(), emb.clone(), "h".into()).unwrap();
        let q = random_unit(1, 8, 23);
        let h = time_histogram(q.row(0), &g, 12, 24, 40).unwrap();
        let (idx, sims) = brute_force(q.row(0), &emb, 40);
        let mut months = [0.0f64; 12];
        let mut hours = [0.0f64; 24];
        for (i, s) in idx.iter().zip(&sims) {
            let t = items[*i].time.unwrap();
            months[(t.theta() * 12.0) as usize] += *s as f64;
            hours[(t.phi() * 24.0) as usize] += *s as f64;
        }
        assert_eq!(h.months, months.to_vec());
        assert_eq!(h.hours, hours.to_vec());
    }

    #[test]
    fn uniform_random_predictions_give_expected_errors() {
        // Monte Carlo: uniform predictions against uniform truths
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let n = 200_000;
        let (mut m, mut h) = (0.0, 0.0);
        for _ in 0..n {
            let a = CyclicTime::new(rng.random(), rng.random()).unwrap();
            let b = CyclicTime::new(rng.random(), rng.random()).unwrap();
            let (em, eh) = cyclic_abs_error(&a, &b);
            m += em;
            h += eh;
        }
        assert!((m / n as f64 - 3.0).abs() < 0.02);
        assert!((h / n as f64 - 6.0).abs() < 0.04);
    }

    #[test]
    fn eval_geo_thresholds_and_exclusion() {
        let emb = random_unit(30, 8, 40);
        let geos: Vec<GeoCoord> = (0..30).map(|i| GeoCoord::new(-60.0 + 4.0 * i as f64, 10.0).unwrap()).collect();
        let items = geos.iter().enumerate().map(|(i, g)| GalleryItem::gps(format!("{i}"), *g)).collect();
        let g = Gallery::new(GalleryKind::Gps, items, emb.clone(), "h".into()).unwrap();
        let m = eval_geo(&emb, &geos, &g, &DEFAULT_THRESHOLDS_KM).unwrap();
        assert!(m.accuracy.iter().all(|(_, a)| *a == 1.0));
        assert_eq!(m.median_km, 0.0);

        // every gallery point is > 1000 km from every truth
        let far: Vec<GeoCoord> = geos.iter().map(|g| GeoCoord::new(-g.lat(), g.lon() + 90.0).unwrap()).collect();
        let m = eval_geo(&emb, &far, &g, &[1.0]).unwrap();
        assert!(m.errors_km.iter().all(|e| *e > 1000.0));
        assert_eq!(m.accuracy_at(1.0), Some(0.0));
        assert!(eval_geo(&Tensor2::zeros(0, 8), &[], &g, &[1.0]).is_err());
    }

    #[test]
    fn eval_geo_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let gemb = random_unit(300, 8, 42);
        let geos: Vec<GeoCoord> = (0..300)
            .map(|_| GeoCoord::new(rng.random_range(-80.0..80.0), rng.random_range(-180.0..180.0)).unwrap())
            .collect();
        let items = geos.iter().enumerate().map(|(i, g)| GalleryItem::gps(format!("{i}"), *g)).collect();
        let g = Gallery::new(GalleryKind::Gps, items, gemb.clone(), "h".into()).unwrap();
        let q = random_unit(100, 8, 43);
        let truth: Vec<GeoCoord> = (0..100)
            .map(|_| GeoCoord::new(rng.random_range(-80.0..80.0), rng.random_range(-180.0..180.0)).unwrap())
            .collect();
        let m = eval_geo(&q, &truth, &g, &[2500.0]).unwrap();
        let mut within = 0;
        for i in 0..100 {
            let (idx, _) = brute_force(q.row(i), &gemb, 1);
            let e = geodesic_km(&geos[idx[0]], &truth[i]);
            assert_eq!(e, m.errors_km[i]);
            within += (e <= 2500.0) as usize;
        }
        assert_eq!(m.accuracy_at(2500.0), Some(within as f64 / 100.0));
    }

    #[test]
    fn eval_time_perfect_gallery_and_empty_set() {
        let emb = random_unit(20, 8, 50);
        let g = gallery_of(emb.clone());
        let truth: Vec<CyclicTime> = g.items().iter().map(|i| i.time.unwrap()).collect();
        let m = eval_time(&emb, &truth, &g).unwrap();
        assert_eq!((m.month_err, m.hour_err, m.tps), (0.0, 0.0, 1.0));
        assert!(eval_time(&Tensor2::zeros(0, 8), &[], &g).is_err());
    }

    #[test]
    fn gallery_file_round_trip_and_refresh() {
        let cfg = EncoderConfig {
            rff_features: 8,
            head_hidden: 16,
            head_hidden_layers: 1,
            embed_dim: 8,
            ..EncoderConfig::desk(4)
        };
        let model = GtLocModel::<f32>::init(cfg.clone()).unwrap();
        let items = uniform_time_items(25, 3).unwrap();
        let g = build_gallery(GalleryKind::Time, items.clone(), &model, "abc").unwrap();
        assert_eq!(g, build_gallery(GalleryKind::Time, items, &model, "abc").unwrap());
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("gal/time");
        save_gallery(&g, &prefix, Some(3)).unwrap();
        let mut back = load_gallery(&prefix).unwrap();
        assert_eq!(back, g);
        assert!(!back.refresh(&model, "abc").unwrap());
        let other = GtLocModel::<f32>::init(EncoderConfig { seed: 9, ..cfg }).unwrap();
        assert!(back.refresh(&other, "def").unwrap());
        assert_eq!(back.model_hash(), "def");
        assert_ne!(back.embeddings(), g.embeddings());
    }

    #[test]
    fn duplicate_labels_give_duplicate_embeddings() {
        let cfg = EncoderConfig {
            rff_features: 8,
            head_hidden: 16,
            head_hidden_layers: 1,
            embed_dim: 8,
            ..EncoderConfig::desk(4)
        };
        let model = GtLocModel::<f32>::init(cfg).unwrap();
        let p = GeoCoord::new(10.0, 20.0).unwrap();
        let g = build_gallery(GalleryKind::Gps, vec![GalleryItem::gps("a", p), GalleryItem::gps("b", p)], &model, "h")
            .unwrap();
        assert_eq!(g.embeddings().row(0), g.embeddings().row(1));
        assert!(build_gallery(GalleryKind::Gps, vec![], &model, "h").is_err());
    }

    #[test]
    fn label_sampling_is_seeded() {
        let a = sample_label_indices(100, 250, 4).unwrap();
        assert_eq!(a, sample_label_indices(100, 250, 4).unwrap());
        let mut first: Vec<usize> = a[..100].to_vec();
        first.sort_unstable();
        assert_eq!(first, (0..100).collect::<Vec<_>>());
        assert!(sample_label_indices(0, 5, 1).is_err());
    }

    #[test]
    fn composed_hit_radii() {
        let q = (CyclicTime::new(0.0, 0.0).unwrap(), GeoCoord::new(0.0, 0.0).unwrap());
        let mk = |t: CyclicTime, g: GeoCoord| GalleryItem { id: "x".into(), geo: Some(g), time: Some(t) };
        assert!(composed_hit(&q.0, &q.1, &mk(CyclicTime::new(0.99, 0.98).unwrap(), GeoCoord::new(0.1, 0.1).unwrap())));
        assert!(!composed_hit(&q.0, &q.1, &mk(CyclicTime::new(0.9, 0.0).unwrap(), q.1)));
        assert!(!composed_hit(&q.0, &q.1, &mk(q.0, GeoCoord::new(1.0, 0.0).unwrap())));
    }

    #[test]
    fn metrics_csv_is_stable() {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[("tps".into(), 0.77), ("acc@1km".into(), 0.5)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "metric,value\ntps,0.77\nacc@1km,0.5\n");
    }

    proptest! {
        #[test]
        fn top_k_agrees_with_full_sort(scores in prop::collection::vec(-4i32..4, 1..60), k in 1usize..60) {
            let scores: Vec<f32> = scores.into_iter().map(|s| s as f32 * 0.25).collect();
            let k = k.min(scores.len());
            let got = top_k(&scores, k).unwrap();
            let mut all: Vec<usize> = (0..scores.len()).collect();
            all.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            prop_assert_eq!(got, all[..k].to_vec());
        }
    }
}
