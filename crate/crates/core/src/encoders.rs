//! Location, time and image embedding heads.
//!
//! Location and time share one architecture: a bank of frozen random Fourier
//! feature matrices at several scales, one MLP per scale, outputs summed and
//! ℓ₂-normalized. The image head projects precomputed backbone vectors.

use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffnet::{
    l2_normalize_rows, l2_normalize_rows_backward, Activation, Mlp, MlpCache, MlpGrads, Scalar, Tensor2,
};
use crate::error::{Error, Result};
use crate::geotime::{equal_earth_project, CyclicTime, GeoCoord};

/// Encoder hyperparameters; stored in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Random frequencies per scale; each scale emits `2 * rff_features` values.
    pub rff_features: usize,
    /// Standard deviations of the Gaussian frequency matrices.
    pub scales: Vec<f64>,
    pub head_hidden: usize,
    pub head_hidden_layers: usize,
    pub embed_dim: usize,
    pub backbone_dim: usize,
    pub image_hidden: usize,
    /// Seeds both the frozen RFF banks and the initial MLP weights.
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            rff_features: 256,
            scales: vec![1.0, 16.0, 256.0],
            head_hidden: 1024,
            head_hidden_layers: 3,
            embed_dim: 512,
            backbone_dim: 768,
            image_hidden: 768,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Reduced widths for CPU-only experiments on synthetic data.
    pub fn desk(backbone_dim: usize) -> Self {
        Self {
            rff_features: 64,
            head_hidden: 256,
            head_hidden_layers: 2,
            embed_dim: 128,
            backbone_dim,
            image_hidden: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rff_features", self.rff_features),
            ("head_hidden", self.head_hidden),
            ("embed_dim", self.embed_dim),
            ("backbone_dim", self.backbone_dim),
            ("image_hidden", self.image_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("RFF scales must be a non-empty list of positive values"));
        }
        Ok(())
    }
}

/// Frozen Gaussian frequency matrices, one `features × 2` matrix per scale.
#[derive(Debug, Clone, PartialEq)]
pub struct RffBank {
    scales: Vec<f64>,
    matrices: Vec<Vec<[f64; 2]>>,
}

impl RffBank {
    /// Deterministic in `(seed, stream, scales)`; `stream` separates the
    /// location and time banks drawn from one model seed.
    pub fn new(scales: &[f64], features: usize, seed: u64, stream: u64) -> Self {
        let matrices = scales
            .iter()
            .enumerate()
            .map(|(i, &sigma)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream * 1024 + i as u64);
                let normal = Normal::new(0.0, sigma).expect("positive scale");
                (0..features).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect()
            })
            .collect();
        Self { scales: scales.to_vec(), matrices }
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn features(&self) -> usize {
        self.matrices.first().map(Vec::len).unwrap_or(0)
    }

    pub fn matrix(&self, scale: usize) -> &[[f64; 2]] {
        &self.matrices[scale]
    }

    /// `[cos(2π W v) ‖ sin(2π W v)]` for one scale.
    pub fn encode(&self, scale: usize, v: [f64; 2]) -> Vec<f64> {
        let w = &self.matrices[scale];
        let mut out = vec![0.0; 2 * w.len()];
        let (c, s) = out.split_at_mut(w.len());
        for (k, row) in w.iter().enumerate() {
            let angle = TAU * (row[0] * v[0] + row[1] * v[1]);
            c[k] = angle.cos();
            s[k] = angle.sin();
        }
        out
    }

    fn encode_batch<T: Scalar>(&self, scale: usize, inputs: &[[f64; 2]]) -> Tensor2<T> {
        let f = self.features();
        let mut t = Tensor2::zeros(inputs.len(), 2 * f);
        for (r, v) in inputs.iter().enumerate() {
            for (dst, x) in t.row_mut(r).iter_mut().zip(self.encode(scale, *v)) {
                *dst = T::from_f64_lossy(x);
            }
        }
        t
    }
}

/// Network input for a coordinate: Equal Earth plane scaled to [-1, 1]².
pub fn location_input(g: &GeoCoord) -> [f64; 2] {
    equal_earth_project(g).unit_scaled()
}

/// Network input for a time: the raw (θ, φ) pair.
pub fn time_input(t: &CyclicTime) -> [f64; 2] {
    t.as_array()
}

/// Cached state of one forward pass through a normalized encoder.
#[derive(Debug, Clone)]
pub struct EncoderPass<T = f32> {
    caches: Vec<MlpCache<T>>,
    norms: Vec<T>,
    /// Unit-norm embeddings, one row per input.
    pub embeddings: Tensor2<T>,
}

/// Multi-scale RFF encoder: Σᵢ fᵢ(γ(v, σᵢ)), then ℓ₂-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierEncoder<T = f32> {
    bank: RffBank,
    heads: Vec<Mlp<T>>,
}

impl<T: Scalar> FourierEncoder<T> {
    pub fn init(cfg: &EncoderConfig, stream: u64) -> Result<Self> {
        cfg.validate()?;
        let bank = RffBank::new(&cfg.scales, cfg.rff_features, cfg.seed, stream);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream * 1024 + 512);
        let mut dims = vec![2 * cfg.rff_features];
        dims.extend(std::iter::repeat_n(cfg.head_hidden, cfg.head_hidden_layers));
        dims.push(cfg.embed_dim);
        let heads =
            cfg.scales.iter().map(|_| Mlp::init(&dims, Activation::Identity, &mut rng)).collect::<Result<_>>()?;
        Ok(Self { bank, heads })
    }

    pub fn bank(&self) -> &RffBank {
        &self.bank
    }

    pub fn heads(&self) -> &[Mlp<T>] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [Mlp<T>] {
        &mut self.heads
    }

    pub fn embed_dim(&self) -> usize {
        self.heads[0].output_dim()
    }

    fn summed(&self, inputs: &[[f64; 2]]) -> Result<Tensor2<T>> {
        let mut sum: Option<Tensor2<T>> = None;
        for (i, head) in self.heads.iter().enumerate() {
            let out = head.infer(&self.bank.encode_batch(i, inputs))?;
            match sum.as_mut() {
                Some(s) => s.add_assign(&out)?,
                None => sum = Some(out),
            }
        }
        Ok(sum.expect("at least one scale"))
    }

    /// Unit-norm embeddings without keeping a cache.
    pub fn embed(&self, inputs: &[[f64; 2]]) -> Result<Tensor2<T>> {
        if inputs.is_empty() {
            return Ok(Tensor2::zeros(0, self.embed_dim()));
        }
        Ok(l2_normalize_rows(&self.summed(inputs)?)?.0)
    }

    pub fn forward(&self, inputs: &[[f64; 2]]) -> Result<EncoderPass<T>> {
        let mut caches = Vec::with_capacity(self.heads.len());
        let mut sum: Option<Tensor2<T>> = None;
        for (i, head) in self.heads.iter().enumerate() {
            let cache = head.forward(&self.bank.encode_batch(i, inputs))?;
            match sum.as_mut() {
                Some(s) => s.add_assign(cache.output())?,
                None => sum = Some(cache.output().clone()),
            }
            caches.push(cache);
        }
        let (embeddings, norms) = l2_normalize_rows(&sum.expect("at least one scale"))?;
        Ok(EncoderPass { caches, norms, embeddings })
    }

    /// Gradients for each head given the gradient w.r.t. the normalized output.
    pub fn backward(&self, pass: &EncoderPass<T>, upstream: &Tensor2<T>) -> Result<Vec<MlpGrads<T>>> {
        let g = l2_normalize_rows_backward(&pass.embeddings, &pass.norms, upstream)?;
        self.heads
            .iter()
            .zip(&pass.caches)
            .map(|(head, cache)| head.backward(cache, &g).map(|(grads, _)| grads))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> FourierEncoder<U> {
        FourierEncoder { bank: self.bank.clone(), heads: self.heads.iter().map(Mlp::cast).collect() }
    }
}

/// Trainable projection of backbone vectors into the shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder<T = f32> {
    mlp: Mlp<T>,
}

impl<T: Scalar> ImageEncoder<T> {
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(3 * 1024);
        let mlp = Mlp::init(&[cfg.backbone_dim, cfg.image_hidden, cfg.embed_dim], Activation::Identity, &mut rng)?;
        Ok(Self { mlp })
    }

    pub fn mlp(&self) -> &Mlp<T> {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp<T> {
        &mut self.mlp
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    fn check(&self, x: &Tensor2<T>) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "backbone vectors have {} values, the image head expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn embed(&self, backbone: &Tensor2<T>) -> Result<Tensor2<T>> {
        self.check(backbone)?;
        if backbone.rows() == 0 {
            return Ok(Tensor2::zeros(0, self.mlp.output_dim()));
        }
        Ok(l2_normalize_rows(&self.mlp.infer(backbone)?)?.0)
    }

    pub fn forward(&self, backbone: &Tensor2<T>) -> Result<EncoderPass<T>> {
        self.check(backbone)?;
        let cache = self.mlp.forward(backbone)?;
        let (embeddings, norms) = l2_normalize_rows(cache.output())?;
        Ok(EncoderPass { caches: vec![cache], norms, embeddings })
    }

    pub fn backward(&self, pass: &EncoderPass<T>, upstream: &Tensor2<T>) -> Result<MlpGrads<T>> {
        let g = l2_normalize_rows_backward(&pass.embeddings, &pass.norms, upstream)?;
        Ok(self.mlp.backward(&pass.caches[0], &g)?.0)
    }

    pub fn cast<U: Scalar>(&self) -> ImageEncoder<U> {
        ImageEncoder { mlp: self.mlp.cast() }
    }
}

const LOCATION_STREAM: u64 = 1;
const TIME_STREAM: u64 = 2;

/// All trainable encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct GtLocModel<T = f32> {
    pub config: EncoderConfig,
    pub location: FourierEncoder<T>,
    pub time: FourierEncoder<T>,
    pub image: ImageEncoder<T>,
}

/// Rows encoded per chunk when embedding large label sets.
const EMBED_CHUNK: usize = 2048;

impl<T: Scalar> GtLocModel<T> {
    pub fn init(config: EncoderConfig) -> Result<Self> {
        Ok(Self {
            location: FourierEncoder::init(&config, LOCATION_STREAM)?,
            time: FourierEncoder::init(&config, TIME_STREAM)?,
            image: ImageEncoder::init(&config)?,
            config,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn embed_locations(&self, coords: &[GeoCoord]) -> Result<Tensor2<T>> {
        let inputs: Vec<[f64; 2]> = coords.iter().map(location_input).collect();
        self.embed_chunked(&self.location, &inputs)
    }

    pub fn embed_times(&self, times: &[CyclicTime]) -> Result<Tensor2<T>> {
        let inputs: Vec<[f64; 2]> = times.iter().map(time_input).collect();
        self.embed_chunked(&self.time, &inputs)
    }

    fn embed_chunked(&self, enc: &FourierEncoder<T>, inputs: &[[f64; 2]]) -> Result<Tensor2<T>> {
        let mut data = Vec::with_capacity(inputs.len() * self.embed_dim());
        for chunk in inputs.chunks(EMBED_CHUNK) {
            data.extend(enc.embed(chunk)?.into_data());
        }
        Tensor2::from_vec(inputs.len(), self.embed_dim(), data)
    }

    pub fn embed_images(&self, backbone: &Tensor2<T>) -> Result<Tensor2<T>> {
        if backbone.cols() != self.image.input_dim() {
            return self.image.embed(backbone);
        }
        let mut data = Vec::with_capacity(backbone.rows() * self.embed_dim());
        let idx: Vec<usize> = (0..backbone.rows()).collect();
        for chunk in idx.chunks(EMBED_CHUNK) {
            data.extend(self.image.embed(&backbone.select_rows(chunk))?.into_data());
        }
        Tensor2::from_vec(backbone.rows(), self.embed_dim(), data)
    }

    pub fn encode_location(&self, g: &GeoCoord) -> Result<Vec<T>> {
        Ok(self.location.embed(&[location_input(g)])?.into_data())
    }

    pub fn encode_time(&self, t: &CyclicTime) -> Result<Vec<T>> {
        Ok(self.time.embed(&[time_input(t)])?.into_data())
    }

    pub fn encode_image(&self, backbone: &[T]) -> Result<Vec<T>> {
        let x = Tensor2::from_vec(1, backbone.len(), backbone.to_vec())?;
        Ok(self.image.embed(&x)?.into_data())
    }

    /// Every trainable MLP with its checkpoint name prefix, in a fixed order.
    pub fn named_mlps(&self) -> Vec<(String, &Mlp<T>)> {
        let mut out = Vec::new();
        for (i, h) in self.location.heads.iter().enumerate() {
            out.push((format!("location.head{i}"), h));
        }
        for (i, h) in self.time.heads.iter().enumerate() {
            out.push((format!("time.head{i}"), h));
        }
        out.push(("image".to_string(), &self.image.mlp));
        out
    }

    pub fn mlps_mut(&mut self) -> Vec<&mut Mlp<T>> {
        let mut out: Vec<&mut Mlp<T>> = Vec::new();
        out.extend(self.location.heads.iter_mut());
        out.extend(self.time.heads.iter_mut());
        out.push(&mut self.image.mlp);
        out
    }

    pub fn cast<U: Scalar>(&self) -> GtLocModel<U> {
        GtLocModel {
            config: self.config.clone(),
            location: self.location.cast(),
            time: self.time.cast(),
            image: self.image.cast(),
        }
    }
}
