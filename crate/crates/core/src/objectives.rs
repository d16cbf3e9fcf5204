//! Training objectives: the image-location contrastive loss with a FIFO
//! queue of extra negatives, and Temporal Metric Learning with soft targets
//! from toroidal time differences.
//!
//! Both losses return analytic gradients with respect to the (unit-norm)
//! embeddings and to the log-temperature.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffnet::{dot, log_softmax_rows, Scalar, Tensor2};
use crate::error::{Error, Result};
use crate::geotime::{l2_time_distance, toroidal_distance, CyclicTime};

/// Default queue capacity.
pub const QUEUE_SIZE: usize = 4096;

/// Initial value for both temperatures.
pub const INITIAL_TEMPERATURE: f64 = 0.07;

/// Lower bound on a temperature (logit scale at most 100).
pub const MIN_TEMPERATURE: f64 = 0.01;
pub const MAX_TEMPERATURE: f64 = 100.0;

const NORM_TOLERANCE: f64 = 1e-3;

/// Fixed-capacity FIFO of detached location embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationQueue {
    capacity: usize,
    dim: usize,
    data: Vec<f32>,
    /// Slot holding the oldest entry.
    head: usize,
    len: usize,
}

impl LocationQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self { capacity, dim, data: vec![0.0; capacity * dim], head: 0, len: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends a single entry, evicting the oldest when full.
    pub fn push(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::shape(format!("queue holds {}-d embeddings, got {}", self.dim, row.len())));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        let slot = if self.len < self.capacity {
            let s = (self.head + self.len) % self.capacity;
            self.len += 1;
            s
        } else {
            let s = self.head;
            self.head = (self.head + 1) % self.capacity;
            s
        };
        self.data[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(row);
        Ok(())
    }

    pub fn push_rows(&mut self, rows: &Tensor2<f32>) -> Result<()> {
        if rows.cols() != self.dim {
            return Err(Error::shape(format!("queue holds {}-d embeddings, got {}", self.dim, rows.cols())));
        }
        for row in rows.row_iter() {
            self.push(row)?;
        }
        Ok(())
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        (0..self.len).map(move |i| {
            let s = (self.head + i) % self.capacity;
            &self.data[s * self.dim..(s + 1) * self.dim]
        })
    }

    /// Entries as a matrix, oldest first.
    pub fn to_tensor(&self) -> Tensor2<f32> {
        let mut data = Vec::with_capacity(self.len * self.dim);
        for row in self.iter() {
            data.extend_from_slice(row);
        }
        Tensor2::from_vec(self.len, self.dim, data).expect("queue entries are finite")
    }

    /// Rebuilds a queue from ordered entries (oldest first).
    pub fn from_tensor(capacity: usize, entries: &Tensor2<f32>) -> Result<Self> {
        if entries.rows() > capacity {
            return Err(Error::shape(format!("{} queue entries exceed capacity {capacity}", entries.rows())));
        }
        let mut q = Self::new(capacity, entries.cols());
        q.push_rows(entries)?;
        Ok(q)
    }
}

/// Learnable temperatures, stored as log τ so they stay positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperatures {
    pub log_tau_loc: f32,
    pub log_tau_time: f32,
}

impl Default for Temperatures {
    fn default() -> Self {
        let l = INITIAL_TEMPERATURE.ln() as f32;
        Self { log_tau_loc: l, log_tau_time: l }
    }
}

impl Temperatures {
    pub fn tau_loc(&self) -> f64 {
        (self.log_tau_loc as f64).exp()
    }

    pub fn tau_time(&self) -> f64 {
        (self.log_tau_time as f64).exp()
    }

    pub fn clamp(&mut self) {
        let (lo, hi) = (MIN_TEMPERATURE.ln() as f32, MAX_TEMPERATURE.ln() as f32);
        self.log_tau_loc = self.log_tau_loc.clamp(lo, hi);
        self.log_tau_time = self.log_tau_time.clamp(lo, hi);
    }
}

fn check_unit_rows<T: Scalar>(m: &Tensor2<T>, what: &str) -> Result<()> {
    for (i, row) in m.row_iter().enumerate() {
        let n = dot(row, row).as_f64().sqrt();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::invalid(format!("{what} row {i} has norm {n:.6}, expected 1")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LocLossOutput<T = f32> {
    pub loss: f64,
    /// One gradient per augmented view.
    pub grad_image: Vec<Tensor2<T>>,
    pub grad_location: Vec<Tensor2<T>>,
    pub grad_log_tau: f64,
}

/// Image-location InfoNCE over in-batch locations plus queued negatives.
///
/// For each view and anchor `i` the candidates are all `B` batch locations
/// and all `S` queue entries; the loss is summed over views and averaged over
/// the batch. The queue receives no gradient.
pub fn loc_contrastive_loss<T: Scalar>(
    image_views: &[Tensor2<T>],
    location_views: &[Tensor2<T>],
    queue: &Tensor2<T>,
    log_tau: f64,
) -> Result<LocLossOutput<T>> {
    if image_views.is_empty() || image_views.len() != location_views.len() {
        return Err(Error::shape("image and location views must be non-empty and paired"));
    }
    let b = image_views[0].rows();
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let dim = image_views[0].cols();
    if queue.rows() > 0 && queue.cols() != dim {
        return Err(Error::shape(format!("queue entries are {}-d, batch embeddings are {dim}-d", queue.cols())));
    }
    let tau = log_tau.exp();
    let inv_tau = T::from_f64_lossy(1.0 / tau);
    let inv_b = T::from_f64_lossy(1.0 / b as f64);
    let mut loss = 0.0;
    let mut grad_log_tau = 0.0;
    let mut grad_image = Vec::with_capacity(image_views.len());
    let mut grad_location = Vec::with_capacity(image_views.len());
    for (v, l) in image_views.iter().zip(location_views) {
        if v.shape() != (b, dim) || l.shape() != (b, dim) {
            return Err(Error::shape(format!("view shapes {:?} / {:?}, expected ({b}, {dim})", v.shape(), l.shape())));
        }
        check_unit_rows(v, "image embedding")?;
        check_unit_rows(l, "location embedding")?;

        // logits against [batch locations | queue]
        let batch_sim = v.matmul_t(l)?;
        let queue_sim = if queue.rows() > 0 { Some(v.matmul_t(queue)?) } else { None };
        let s = queue.rows();
        let mut z = Tensor2::zeros(b, b + s);
        for i in 0..b {
            let row = z.row_mut(i);
            for (dst, &x) in row[..b].iter_mut().zip(batch_sim.row(i)) {
                *dst = x * inv_tau;
            }
            if let Some(q) = &queue_sim {
                for (dst, &x) in row[b..].iter_mut().zip(q.row(i)) {
                    *dst = x * inv_tau;
                }
            }
        }
        let logp = log_softmax_rows(&z, T::one())?;
        // dL/dz = (p - onehot) / B
        let mut dz = logp.map(|x| x.exp());
        for i in 0..b {
            loss -= logp.get(i, i).as_f64() / b as f64;
            let d = dz.get(i, i) - T::one();
            dz.set(i, i, d);
        }
        dz.scale(inv_b);
        grad_log_tau -= dz.data().iter().zip(z.data()).map(|(d, z)| d.as_f64() * z.as_f64()).sum::<f64>();

        let dz_batch = Tensor2::from_fn(b, b, |i, k| dz.get(i, k));
        let mut gv = dz_batch.matmul(l)?;
        if s > 0 {
            let dz_queue = Tensor2::from_fn(b, s, |i, k| dz.get(i, b + k));
            gv.add_assign(&dz_queue.matmul(queue)?)?;
        }
        gv.scale(inv_tau);
        let mut gl = dz_batch.t_matmul(v)?;
        gl.scale(inv_tau);
        grad_image.push(gv);
        grad_location.push(gl);
    }
    Ok(LocLossOutput { loss, grad_image, grad_location, grad_log_tau })
}

/// Which time difference feeds the soft targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeDistance {
    /// Distance on the flat torus (wrap-aware).
    #[default]
    Cyclic,
    /// Euclidean distance on raw (θ, φ).
    L2,
}

impl FromStr for TimeDistance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cyclic" => Ok(Self::Cyclic),
            "l2" => Ok(Self::L2),
            other => Err(Error::invalid(format!("unknown time distance '{other}' (cyclic|l2)"))),
        }
    }
}

/// Pairwise time distances and the derived soft targets for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargetMatrix {
    /// `δ[i][j]`, symmetric with a zero diagonal.
    pub distance: Tensor2<f64>,
    /// `q[i][j] = 1 - softmax_j(δ[i][·])`, optionally renormalized per row.
    pub targets: Tensor2<f64>,
}

impl SoftTargetMatrix {
    pub fn batch_size(&self) -> usize {
        self.targets.rows()
    }
}

pub fn tml_targets(times: &[CyclicTime], distance: TimeDistance, renormalize: bool) -> Result<SoftTargetMatrix> {
    let b = times.len();
    if b < 2 {
        return Err(Error::invalid(format!("soft targets need at least 2 samples, got {b}")));
    }
    let dist = Tensor2::from_fn(b, b, |i, j| match distance {
        TimeDistance::Cyclic => toroidal_distance(&times[i], &times[j]),
        TimeDistance::L2 => l2_time_distance(&times[i], &times[j]),
    });
    let mut q = Tensor2::zeros(b, b);
    for i in 0..b {
        let row = dist.row(i);
        let z: f64 = row.iter().map(|d| d.exp()).sum();
        let out = q.row_mut(i);
        for (dst, d) in out.iter_mut().zip(row) {
            *dst = 1.0 - d.exp() / z;
        }
        if renormalize {
            let s: f64 = out.iter().sum();
            for v in out.iter_mut() {
                *v /= s;
            }
        }
    }
    Ok(SoftTargetMatrix { distance: dist, targets: q })
}

#[derive(Debug, Clone)]
pub struct TmlLossOutput<T = f32> {
    pub loss: f64,
    /// `CE(p_i, q_i)` for each anchor; `loss` is their mean.
    pub per_row: Vec<f64>,
    pub grad_image: Tensor2<T>,
    pub grad_time: Tensor2<T>,
    pub grad_log_tau: f64,
}

/// Temporal Metric Learning: mean over anchors of `-Σ_j q_i[j] log p_i[j]`
/// with `p_i = softmax_j(V_i · T_j / τ)`.
pub fn tml_loss<T: Scalar>(
    image: &Tensor2<T>,
    time: &Tensor2<T>,
    targets: &SoftTargetMatrix,
    log_tau: f64,
) -> Result<TmlLossOutput<T>> {
    let b = image.rows();
    if time.shape() != image.shape() {
        return Err(Error::shape(format!("image {:?} vs time {:?} embeddings", image.shape(), time.shape())));
    }
    if targets.batch_size() != b {
        return Err(Error::shape(format!("targets built for {} samples, batch has {b}", targets.batch_size())));
    }
    check_unit_rows(image, "image embedding")?;
    check_unit_rows(time, "time embedding")?;
    let tau = log_tau.exp();
    let inv_tau = T::from_f64_lossy(1.0 / tau);
    let mut z = image.matmul_t(time)?;
    z.scale(inv_tau);
    let logp = log_softmax_rows(&z, T::one())?;
    let q = &targets.targets;
    let mut per_row = Vec::with_capacity(b);
    let mut dz = Tensor2::<T>::zeros(b, b);
    let mut grad_log_tau = 0.0;
    for i in 0..b {
        let qrow = q.row(i);
        let qsum: f64 = qrow.iter().sum();
        let mut ce = 0.0;
        for j in 0..b {
            let lp = logp.get(i, j).as_f64();
            ce -= qrow[j] * lp;
            let d = (qsum * lp.exp() - qrow[j]) / b as f64;
            grad_log_tau -= d * z.get(i, j).as_f64();
            dz.set(i, j, T::from_f64_lossy(d));
        }
        per_row.push(ce);
    }
    let loss = per_row.iter().sum::<f64>() / b as f64;
    let mut grad_image = dz.matmul(time)?;
    grad_image.scale(inv_tau);
    let mut grad_time = dz.t_matmul(image)?;
    grad_time.scale(inv_tau);
    Ok(TmlLossOutput { loss, per_row, grad_image, grad_time, grad_log_tau })
}

/// Sum of whichever objectives are active.
pub fn total_loss(loc: Option<f64>, time: Option<f64>) -> f64 {
    loc.unwrap_or(0.0) + time.unwrap_or(0.0)
}
