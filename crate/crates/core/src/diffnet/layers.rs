//! Fully connected layers and MLPs with an explicit forward cache and an
//! analytic backward pass.

use rand::Rng;

use super::tensor::{Scalar, Tensor2};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Affine map `y = act(x Wᵀ + b)` with `W` stored out×in.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer<T = f32> {
    pub weight: Tensor2<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(weight: Tensor2<T>, bias: Vec<T>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape(format!(
                "bias of length {} for a layer with {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self { weight, bias, activation })
    }

    /// Uniform(-1/sqrt(in), 1/sqrt(in)) initialization for weights and bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let weight = Tensor2::from_fn(outputs, inputs, |_, _| T::from_f64_lossy(rng.random_range(-bound..bound)));
        let bias = (0..outputs).map(|_| T::from_f64_lossy(rng.random_range(-bound..bound))).collect();
        Self { weight, bias, activation }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    fn forward(&self, x: &Tensor2<T>) -> Result<Tensor2<T>> {
        let mut z = x.matmul_t(&self.weight)?;
        let cols = z.cols();
        for row in z.data_mut().chunks_exact_mut(cols.max(1)) {
            for (v, &b) in row.iter_mut().zip(&self.bias) {
                *v = *v + b;
                if self.activation == Activation::Relu && *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        Ok(z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad<T = f32> {
    pub weight: Tensor2<T>,
    pub bias: Vec<T>,
}

/// Gradients for every layer of an [`Mlp`], in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T = f32> {
    pub layers: Vec<LinearGrad<T>>,
}

impl<T: Scalar> MlpGrads<T> {
    pub fn zeros_like(mlp: &Mlp<T>) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| LinearGrad {
                    weight: Tensor2::zeros(l.outputs(), l.inputs()),
                    bias: vec![T::zero(); l.outputs()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape("gradient sets have different depth"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_assign(&b.weight)?;
            for (x, &y) in a.bias.iter_mut().zip(&b.bias) {
                *x = *x + y;
            }
        }
        Ok(())
    }

    /// Flat views in the same order as [`Mlp::params_mut`].
    pub fn slices(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| [l.weight.data(), l.bias.as_slice()]).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| *v == T::zero()))
    }
}

/// Activations recorded by [`Mlp::forward`] for the matching backward call.
#[derive(Debug, Clone)]
pub struct MlpCache<T = f32> {
    generation: u64,
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Tensor2<T>>,
    output: Tensor2<T>,
}

impl<T: Scalar> MlpCache<T> {
    pub fn output(&self) -> &Tensor2<T> {
        &self.output
    }
}

/// Stack of [`LinearLayer`]s.
///
/// Every mutable access to the parameters bumps a generation counter so a
/// cache taken before an update cannot be fed to `backward` afterwards.
/// Equality compares the layers only.
#[derive(Debug, Clone)]
pub struct Mlp<T = f32> {
    layers: Vec<LinearLayer<T>>,
    generation: u64,
}

impl<T: PartialEq> PartialEq for Mlp<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl<T: Scalar> Mlp<T> {
    pub fn new(layers: Vec<LinearLayer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("an MLP needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::shape(format!(
                    "layer {} emits {} values but layer {} expects {}",
                    i,
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        Ok(Self { layers, generation: 0 })
    }

    /// Layers of widths `dims[0] -> dims[1] -> ...`, ReLU between layers and
    /// `last` on the output.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], last: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::shape("an MLP needs input and output widths"));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last } else { Activation::Relu };
                LinearLayer::init(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LinearLayer<T>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &Tensor2<T>) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(format!("layer 0 expects {} inputs, got {}", self.input_dim(), x.cols())));
        }
        Ok(())
    }

    /// Output only, no cache.
    pub fn infer(&self, x: &Tensor2<T>) -> Result<Tensor2<T>> {
        self.check_input(x)?;
        let mut h = self.layers[0].forward(x)?;
        for layer in &self.layers[1..] {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor2<T>) -> Result<MlpCache<T>> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let next = layer.forward(&h)?;
            inputs.push(h);
            h = next;
        }
        Ok(MlpCache { generation: self.generation, inputs, output: h })
    }

    /// Returns parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, cache: &MlpCache<T>, upstream: &Tensor2<T>) -> Result<(MlpGrads<T>, Tensor2<T>)> {
        if cache.generation != self.generation || cache.inputs.len() != self.layers.len() {
            return Err(Error::shape("stale cache: parameters changed since forward"));
        }
        if upstream.shape() != cache.output.shape() {
            return Err(Error::shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.shape(),
                cache.output.shape()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                // the post-activation is the next layer's input (or the output)
                let post = if i + 1 < self.layers.len() { &cache.inputs[i + 1] } else { &cache.output };
                for (gv, &a) in g.data_mut().iter_mut().zip(post.data()) {
                    if a <= T::zero() {
                        *gv = T::zero();
                    }
                }
            }
            let x = &cache.inputs[i];
            let weight = g.t_matmul(x)?;
            let mut bias = vec![T::zero(); layer.outputs()];
            for row in g.row_iter() {
                for (b, &v) in bias.iter_mut().zip(row) {
                    *b = *b + v;
                }
            }
            let gx = g.matmul(&layer.weight)?;
            grads.push(LinearGrad { weight, bias });
            g = gx;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, g))
    }

    /// Flat parameter views (weight, bias per layer).
    pub fn params(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| [l.weight.data(), l.bias.as_slice()]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.generation += 1;
        self.layers.iter_mut().flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()]).collect()
    }

    /// Names matching [`Mlp::params`], e.g. `prefix.layer0.weight`.
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.layer{i}.weight"), format!("{prefix}.layer{i}.bias")])
            .collect()
    }

    /// Shapes matching [`Mlp::params`]; biases are reported as 1×n.
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().flat_map(|l| [l.weight.shape(), (1, l.outputs())]).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| LinearLayer {
                    weight: l.weight.cast(),
                    bias: l.bias.iter().map(|b| U::from_f64_lossy(b.as_f64())).collect(),
                    activation: l.activation,
                })
                .collect(),
            generation: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::gradcheck::{central_difference, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = LinearLayer::new(Tensor2::<f64>::identity(3), vec![0.0; 3], Activation::Identity).unwrap();
        let mlp = Mlp::new(vec![layer]).unwrap();
        let x = Tensor2::from_fn(2, 3, |r, c| (r as f64) - (c as f64) * 0.7);
        assert_eq!(mlp.infer(&x).unwrap(), x);
    }

    #[test]
    fn zero_weights_broadcast_bias() {
        let layer = LinearLayer::new(Tensor2::<f32>::zeros(2, 3), vec![0.5, -1.5], Activation::Identity).unwrap();
        let mlp = Mlp::new(vec![layer]).unwrap();
        let y = mlp.infer(&Tensor2::from_fn(4, 3, |r, c| (r + c) as f32)).unwrap();
        for row in y.row_iter() {
            assert_eq!(row, &[0.5, -1.5]);
        }
    }

    #[test]
    fn forward_matches_straight_line_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = Mlp::<f64>::init(&[5, 6, 3], Activation::Identity, &mut rng).unwrap();
        let x = Tensor2::from_fn(4, 5, |r, c| ((r * 5 + c) as f64 * 0.37).sin());
        let y = mlp.infer(&x).unwrap();
        let (l0, l1) = (&mlp.layers()[0], &mlp.layers()[1]);
        for r in 0..4 {
            let mut h = [0.0f64; 6];
            for (o, hv) in h.iter_mut().enumerate() {
                let mut s = l0.bias[o];
                for i in 0..5 {
                    s += l0.weight.get(o, i) * x.get(r, i);
                }
                *hv = s.max(0.0);
            }
            for o in 0..3 {
                let mut s = l1.bias[o];
                for (i, hv) in h.iter().enumerate() {
                    s += l1.weight.get(o, i) * hv;
                }
                assert!((s - y.get(r, o)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = LinearLayer::<f32>::init(3, 4, Activation::Relu, &mut rng);
        let b = LinearLayer::<f32>::init(5, 2, Activation::Identity, &mut rng);
        let err = Mlp::new(vec![a, b]).unwrap_err().to_string();
        assert!(err.contains("layer 1 expects 5"), "{err}");
        let mlp = Mlp::<f32>::init(&[3, 2], Activation::Identity, &mut rng).unwrap();
        let err = mlp.infer(&Tensor2::zeros(1, 4)).unwrap_err().to_string();
        assert!(err.contains("layer 0"), "{err}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::<f32>::init(&[4, 8, 3], Activation::Identity, &mut rng).unwrap();
        let cache = mlp.forward(&Tensor2::from_fn(5, 4, |r, c| (r * c) as f32 * 0.1)).unwrap();
        let (g, gx) = mlp.backward(&cache, &Tensor2::zeros(5, 3)).unwrap();
        assert!(g.is_zero());
        assert!(gx.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_layer_weight_gradient_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::<f64>::init(&[3, 2], Activation::Identity, &mut rng).unwrap();
        let x = Tensor2::from_fn(4, 3, |r, c| r as f64 - c as f64);
        let up = Tensor2::from_fn(4, 2, |r, c| 0.5 * r as f64 + c as f64);
        let cache = mlp.forward(&x).unwrap();
        let (g, _) = mlp.backward(&cache, &up).unwrap();
        assert_eq!(g.layers[0].weight, up.transpose().matmul(&x).unwrap());
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mlp = Mlp::<f32>::init(&[2, 2], Activation::Identity, &mut rng).unwrap();
        let cache = mlp.forward(&Tensor2::zeros(1, 2)).unwrap();
        mlp.params_mut()[0][0] += 1.0;
        assert!(mlp.backward(&cache, &Tensor2::zeros(1, 2)).is_err());
        let other = Mlp::<f32>::init(&[2, 3, 2], Activation::Identity, &mut rng).unwrap();
        let cache = other.forward(&Tensor2::zeros(1, 2)).unwrap();
        assert!(mlp.backward(&cache, &Tensor2::zeros(1, 2)).is_err());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        // bias -1 and input 1 with weight 1 puts the pre-activation at exactly 0
        let layer = LinearLayer::new(Tensor2::<f64>::identity(1), vec![-1.0], Activation::Relu).unwrap();
        let mlp = Mlp::new(vec![layer]).unwrap();
        let cache = mlp.forward(&Tensor2::from_vec(1, 1, vec![1.0]).unwrap()).unwrap();
        let (g, gx) = mlp.backward(&cache, &Tensor2::from_vec(1, 1, vec![1.0]).unwrap()).unwrap();
        assert_eq!(g.layers[0].bias[0], 0.0);
        assert_eq!(gx.get(0, 0), 0.0);
    }

    /// Loss = Σ c ⊙ mlp(x) for a fixed random c.
    fn check_random_net<T: Scalar>(h: f64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp64 = Mlp::<f64>::init(&[3, 7, 5, 2], Activation::Identity, &mut rng).unwrap();
        let mlp: Mlp<T> = mlp64.cast();
        let x = Tensor2::<f64>::from_fn(4, 3, |r, c| ((r * 3 + c) as f64 * 0.91).cos());
        let coef = Tensor2::<f64>::from_fn(4, 2, |r, c| ((r + 2 * c) as f64 * 1.3).sin());
        let loss = |m: &Mlp<T>, x: &Tensor2<T>| -> f64 {
            let y = m.infer(x).unwrap();
            y.data().iter().zip(coef.data()).map(|(a, c)| a.as_f64() * c).sum()
        };
        let xt: Tensor2<T> = x.cast();
        let cache = mlp.forward(&xt).unwrap();
        let (g, gx) = mlp.backward(&cache, &coef.cast()).unwrap();

        let analytic: Vec<f64> = g.slices().iter().flat_map(|s| s.iter().map(|v| v.as_f64())).collect();
        let flat: Vec<f64> = mlp.params().iter().flat_map(|s| s.iter().map(|v| v.as_f64())).collect();
        let numeric = central_difference(
            |p| {
                let mut m = mlp.clone();
                let mut k = 0;
                for s in m.params_mut() {
                    for v in s.iter_mut() {
                        *v = T::from_f64_lossy(p[k]);
                        k += 1;
                    }
                }
                loss(&m, &xt)
            },
            &flat,
            h,
        );
        let param_err = relative_error(&analytic, &numeric);

        let gx_a: Vec<f64> = gx.data().iter().map(|v| v.as_f64()).collect();
        let gx_n = central_difference(
            |p| loss(&mlp, &Tensor2::from_vec(4, 3, p.iter().map(|v| T::from_f64_lossy(*v)).collect()).unwrap()),
            &xt.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
            h,
        );
        (param_err, relative_error(&gx_a, &gx_n))
    }

    #[test]
    fn backward_matches_finite_differences_f32() {
        let (p, x) = check_random_net::<f32>(1e-3);
        assert!(p < 1e-2 && x < 1e-2, "param {p}, input {x}");
    }

    #[test]
    fn backward_matches_finite_differences_f64() {
        let (p, x) = check_random_net::<f64>(1e-5);
        assert!(p < 1e-6 && x < 1e-6, "param {p}, input {x}");
    }
}
