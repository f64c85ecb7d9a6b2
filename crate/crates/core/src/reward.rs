//! Scalar reward head: a small MLP over fused (prompt, image) features.
//!
//! Hidden layers use the rectifier; the last layer is linear with one output.
//! Each layer carries a trainable flag so the input-side fraction of the
//! network can be frozen.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub const MODEL_MAGIC: &[u8; 4] = b"RWH1";

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("layer dims must have at least two entries and end in 1, got {0:?}")]
    InvalidDims(Vec<usize>),
    #[error("feature has length {found}, head expects {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("malformed model file {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = HeadError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative at the pre-activation value. The rectifier uses 0 at 0.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Dense layer with row-major `out × in` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    in_dim: usize,
    out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
    pub trainable: bool,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn pre_activation(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardHead {
    layers: Vec<Layer>,
}

/// Gradient block for one layer, same shape as the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub layers: Vec<LayerGradients>,
}

impl HeadGradients {
    pub fn zeros_like(head: &RewardHead) -> Self {
        Self {
            layers: head
                .layers
                .iter()
                .map(|l| LayerGradients {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &HeadGradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    /// Every component in layer-major order (weights, then bias).
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }
}

/// Initializes a head. Weights of each layer are i.i.d. `N(0, 1/(fan_in+1))`,
/// biases are zero, and every layer starts trainable.
pub fn init_head(layer_dims: &[usize], seed: u64) -> Result<RewardHead> {
    if layer_dims.len() < 2 || layer_dims.last() != Some(&1) || layer_dims.contains(&0) {
        return Err(HeadError::InvalidDims(layer_dims.to_vec()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = layer_dims.len() - 1;
    let layers = layer_dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (in_dim, out_dim) = (w[0], w[1]);
            let std = (1.0 / (in_dim as f64 + 1.0)).sqrt();
            Layer {
                in_dim,
                out_dim,
                weights: (0..in_dim * out_dim)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
                bias: vec![0.0; out_dim],
                activation: if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
                trainable: true,
            }
        })
        .collect();
    Ok(RewardHead { layers })
}

/// `(in_dim, out_dim, weights, bias, trainable)` of one layer.
pub type LayerSpec = (usize, usize, Vec<f64>, Vec<f64>, bool);

impl RewardHead {
    /// Builds a head from explicit layers; activations are assigned by
    /// position.
    pub fn from_layers(layers: Vec<LayerSpec>) -> Result<Self> {
        let dims: Vec<usize> = layers
            .first()
            .map(|l| l.0)
            .into_iter()
            .chain(layers.iter().map(|l| l.1))
            .collect();
        let chained = layers.windows(2).all(|w| w[0].1 == w[1].0);
        let shaped = layers
            .iter()
            .all(|(i, o, w, b, _)| w.len() == i * o && b.len() == *o && *i > 0);
        if layers.is_empty() || !chained || !shaped || dims.last() != Some(&1) {
            return Err(HeadError::InvalidDims(dims));
        }
        let n = layers.len();
        Ok(Self {
            layers: layers
                .into_iter()
                .enumerate()
                .map(|(i, (in_dim, out_dim, weights, bias, trainable))| Layer {
                    in_dim,
                    out_dim,
                    weights,
                    bias,
                    activation: if i + 1 == n {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                    trainable,
                })
                .collect(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn frozen_layers(&self) -> usize {
        self.layers.iter().filter(|l| !l.trainable).count()
    }

    fn check_input(&self, feature: &[f64]) -> Result<()> {
        if feature.len() != self.input_dim() {
            return Err(HeadError::DimMismatch {
                expected: self.input_dim(),
                found: feature.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, feature: &[f64]) -> Result<f64> {
        self.check_input(feature)?;
        Ok(self.forward_from(0, feature))
    }

    /// Gradients of `upstream * score` with respect to every parameter.
    /// Frozen layers get zero blocks but still pass the signal backward.
    pub fn backward(&self, feature: &[f64], upstream: f64) -> Result<HeadGradients> {
        let mut grads = HeadGradients::zeros_like(self);
        self.accumulate_gradients(feature, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Adds the gradients of `upstream * score` into `grads` and returns the
    /// score. Frozen layers' blocks are left untouched.
    pub fn accumulate_gradients(
        &self,
        feature: &[f64],
        upstream: f64,
        grads: &mut HeadGradients,
    ) -> Result<f64> {
        self.check_input(feature)?;
        Ok(self.accumulate_from(0, feature, upstream, grads))
    }

    /// Number of leading layers that are frozen. Their output is a fixed
    /// function of the input for as long as the mask is unchanged.
    pub fn frozen_prefix(&self) -> usize {
        self.layers.iter().take_while(|l| !l.trainable).count()
    }

    /// Activations after the first `depth` layers.
    pub fn activations_at(&self, feature: &[f64], depth: usize) -> Result<Vec<f64>> {
        self.check_input(feature)?;
        let mut act = feature.to_vec();
        for layer in &self.layers[..depth] {
            act = layer
                .pre_activation(&act)
                .into_iter()
                .map(|z| layer.activation.apply(z))
                .collect();
        }
        Ok(act)
    }

    /// Score from the activations entering layer `start`.
    pub fn forward_from(&self, start: usize, act: &[f64]) -> f64 {
        let mut act = act.to_vec();
        for layer in &self.layers[start..] {
            act = layer
                .pre_activation(&act)
                .into_iter()
                .map(|z| layer.activation.apply(z))
                .collect();
        }
        act[0]
    }

    /// Backpropagation over layers `start..`, given the activations entering
    /// layer `start`. Returns the score.
    pub fn accumulate_from(
        &self,
        start: usize,
        input: &[f64],
        upstream: f64,
        grads: &mut HeadGradients,
    ) -> f64 {
        let n = self.layers.len();
        // inputs[i] feeds layer start+i; pre[i] is its pre-activation.
        let mut inputs = Vec::with_capacity(n - start);
        let mut pre = Vec::with_capacity(n - start);
        let mut act = input.to_vec();
        for layer in &self.layers[start..] {
            let z = layer.pre_activation(&act);
            let next = z.iter().map(|&v| layer.activation.apply(v)).collect();
            inputs.push(std::mem::replace(&mut act, next));
            pre.push(z);
        }
        let score = act[0];

        let mut delta_out = vec![upstream];
        for i in (start..n).rev() {
            let layer = &self.layers[i];
            let delta: Vec<f64> = delta_out
                .iter()
                .zip(&pre[i - start])
                .map(|(d, &z)| d * layer.activation.derivative(z))
                .collect();
            if layer.trainable {
                let g = &mut grads.layers[i];
                for (o, d) in delta.iter().enumerate() {
                    g.bias[o] += d;
                    let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (w, x) in row.iter_mut().zip(&inputs[i - start]) {
                        *w += d * x;
                    }
                }
            }
            if i > start {
                let mut back = vec![0.0; layer.in_dim];
                for (row, d) in layer.weights.chunks_exact(layer.in_dim).zip(&delta) {
                    for (b, w) in back.iter_mut().zip(row) {
                        *b += d * w;
                    }
                }
                delta_out = back;
            }
        }
        score
    }

    /// Marks the first `⌊fraction · L⌋` layers (input side) frozen and the
    /// rest trainable.
    pub fn set_frozen_fraction(&mut self, fraction: f64) {
        let fraction = fraction.clamp(0.0, 1.0);
        let n = self.layers.len();
        // Guard against products like 0.7 * 10 landing just below 7.
        let frozen = ((fraction * n as f64) + 1e-9).floor() as usize;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.trainable = i >= frozen.min(n);
        }
    }

    pub fn with_frozen_fraction(mut self, fraction: f64) -> Self {
        self.set_frozen_fraction(fraction);
        self
    }

    /// Plain gradient step `θ ← θ − lr·g` on trainable layers.
    pub fn apply_gradients(&mut self, grads: &HeadGradients, lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            if !layer.trainable {
                continue;
            }
            layer.weights.iter_mut().zip(&g.weights).for_each(|(w, d)| *w -= lr * d);
            layer.bias.iter_mut().zip(&g.bias).for_each(|(b, d)| *b -= lr * d);
        }
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().iter().all(|p| p.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.in_dim as u32).to_le_bytes());
            out.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
            out.push(u8::from(!l.trainable));
            for v in l.weights.iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |message: &str| HeadError::Format {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| fail("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MODEL_MAGIC {
            return Err(fail("bad magic"));
        }
        let read_u32 = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let count = read_u32(take(4)?);
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let in_dim = read_u32(take(4)?);
            let out_dim = read_u32(take(4)?);
            let frozen = take(1)?[0] != 0;
            let mut floats = |n: usize| -> Result<Vec<f64>> {
                Ok(take(8 * n)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect())
            };
            let weights = floats(in_dim * out_dim)?;
            let bias = floats(out_dim)?;
            layers.push((in_dim, out_dim, weights, bias, !frozen));
        }
        if pos != bytes.len() {
            return Err(fail("trailing bytes"));
        }
        Self::from_layers(layers).map_err(|e| fail(&e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| HeadError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| HeadError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(w: &[f64], b: f64) -> RewardHead {
        RewardHead::from_layers(vec![(w.len(), 1, w.to_vec(), vec![b], true)]).unwrap()
    }

    /// 2 → 2 → 1 head used for hand evaluation.
    fn two_layer() -> RewardHead {
        RewardHead::from_layers(vec![
            (2, 2, vec![1.0, -1.0, 0.5, 2.0], vec![0.0, -1.0], true),
            (2, 1, vec![3.0, -2.0], vec![0.5], true),
        ])
        .unwrap()
    }

    #[test]
    fn zero_head_scores_zero() {
        let mut head = init_head(&[4, 3, 1], 1).unwrap();
        head.parameters_mut().for_each(|p| *p = 0.0);
        assert_eq!(head.forward(&[1.0, -2.0, 3.0, 4.0]).unwrap(), 0.0);
    }

    #[test]
    fn linear_layer_is_dot_product() {
        assert_eq!(linear(&[1.0, 2.0], 0.0).forward(&[3.0, 4.0]).unwrap(), 11.0);
    }

    #[test]
    fn two_layer_matches_hand_evaluation() {
        // x = [2, 1]: hidden pre = [2-1+0, 1+2-1] = [1, 2]; relu keeps both.
        // out = 3*1 - 2*2 + 0.5 = -0.5
        assert_eq!(two_layer().forward(&[2.0, 1.0]).unwrap(), -0.5);
        // x = [0, 1]: hidden pre = [-1, 1] -> [0, 1]; out = -2 + 0.5
        assert_eq!(two_layer().forward(&[0.0, 1.0]).unwrap(), -1.5);
    }

    #[test]
    fn dim_mismatch() {
        assert!(matches!(
            linear(&[1.0, 2.0], 0.0).forward(&[1.0]),
            Err(HeadError::DimMismatch { expected: 2, found: 1 })
        ));
        assert!(linear(&[1.0, 2.0], 0.0).backward(&[1.0, 2.0, 3.0], 1.0).is_err());
    }

    #[test]
    fn invalid_dims() {
        assert!(init_head(&[4], 0).is_err());
        assert!(init_head(&[4, 2], 0).is_err());
        assert!(init_head(&[4, 0, 1], 0).is_err());
    }

    #[test]
    fn single_layer_init() {
        let head = init_head(&[4, 1], 9).unwrap();
        assert_eq!(head.layers().len(), 1);
        assert_eq!(head.layers()[0].bias, vec![0.0]);
        assert_eq!(head.layers()[0].activation, Activation::Identity);
        assert_eq!(init_head(&[4, 1], 9).unwrap(), head);
    }

    #[test]
    fn init_variance_matches_fan_in() {
        // 63 inputs -> variance 1/64; 2048 outputs gives 129,024 draws.
        let head = init_head(&[63, 2048, 1], 42).unwrap();
        let w = &head.layers()[0].weights;
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(w.len() >= 100_000);
        assert!(((var - 0.015625) / 0.015625).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let head = init_head(&[6, 4, 1], 3).unwrap();
        let g = head.backward(&[0.1, -0.2, 0.3, 0.4, -0.5, 0.6], 0.0).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn frozen_layer_blocks_are_zero_but_propagate() {
        let head = init_head(&[5, 4, 3, 1], 11).unwrap();
        let x = [0.3, -0.1, 0.8, 0.2, -0.6];
        let full = head.backward(&x, 1.3).unwrap();
        let mut frozen = head.clone();
        frozen.layers_mut()[1].trainable = false;
        let g = frozen.backward(&x, 1.3).unwrap();
        assert!(g.layers[1].weights.iter().all(|v| *v == 0.0));
        assert!(g.layers[1].bias.iter().all(|v| *v == 0.0));
        assert_eq!(g.layers[0], full.layers[0]);
        assert_eq!(g.layers[2], full.layers[2]);
    }

    #[test]
    fn frozen_fraction_counts() {
        let dims: Vec<usize> = std::iter::repeat_n(3, 10).chain([1]).collect();
        let mut head = init_head(&dims, 0).unwrap();
        assert_eq!(head.layers().len(), 10);
        head.set_frozen_fraction(0.7);
        assert_eq!(head.frozen_layers(), 7);
        assert!(head.layers()[..7].iter().all(|l| !l.trainable));
        head.set_frozen_fraction(0.0);
        assert_eq!(head.frozen_layers(), 0);
        head.set_frozen_fraction(1.0);
        assert_eq!(head.frozen_layers(), 10);
        for (fraction, n, expected) in [(0.3, 10, 3), (0.7, 3, 2), (0.5, 3, 1), (0.99, 4, 3)] {
            let dims: Vec<usize> = std::iter::repeat_n(2, n).chain([1]).collect();
            let h = init_head(&dims, 0).unwrap().with_frozen_fraction(fraction);
            assert_eq!(h.frozen_layers(), expected, "{fraction} of {n}");
        }
    }

    #[test]
    fn prefix_split_matches_full_pass() {
        let head = init_head(&[6, 5, 4, 1], 21).unwrap().with_frozen_fraction(0.67);
        assert_eq!(head.frozen_prefix(), 2);
        let x = [0.2, -0.4, 0.9, 0.1, -0.3, 0.5];
        let mid = head.activations_at(&x, 2).unwrap();
        assert_eq!(head.forward_from(2, &mid), head.forward(&x).unwrap());
        let mut g = HeadGradients::zeros_like(&head);
        head.accumulate_from(2, &mid, 0.7, &mut g);
        assert_eq!(g, head.backward(&x, 0.7).unwrap());
    }

    #[test]
    fn fully_frozen_update_is_noop() {
        let mut head = init_head(&[4, 3, 1], 5).unwrap().with_frozen_fraction(1.0);
        let before = head.clone();
        let g = head.backward(&[1.0, 2.0, 3.0, 4.0], 1.0).unwrap();
        head.apply_gradients(&g, 10.0);
        assert_eq!(head, before);
    }

    #[test]
    fn model_file_layout() {
        let head = linear(&[1.5, -2.0], 0.25).with_frozen_fraction(1.0);
        let bytes = head.to_bytes();
        assert_eq!(&bytes[..4], b"RWH1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes[16], 1);
        assert_eq!(&bytes[17..25], &1.5f64.to_le_bytes());
        assert_eq!(&bytes[33..41], &0.25f64.to_le_bytes());
        assert_eq!(bytes.len(), 41);
        let back = RewardHead::from_bytes(&bytes, Path::new("m")).unwrap();
        assert_eq!(back, head);
    }

    #[test]
    fn truncated_model_rejected() {
        let bytes = init_head(&[3, 2, 1], 0).unwrap().to_bytes();
        assert!(RewardHead::from_bytes(&bytes[..bytes.len() - 1], Path::new("m")).is_err());
        assert!(RewardHead::from_bytes(b"XXXX", Path::new("m")).is_err());
    }
}
