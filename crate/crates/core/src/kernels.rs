//! Similarity kernels mapping a data point and a sample mean to an inlier
//! confidence.
//!
//! [`ClassicalKernel`] covers the distance-based flat and Gaussian kernels.
//! [`KernelModel`] is the trainable network: either an MLP on the difference
//! `x - mean` ([`KernelVariant::Subtract`]) or a shared 2x1 filter over
//! `(x[d], mean[d])` pairs followed by the same MLP ([`KernelVariant::Concat`]).
//! Hidden layers use rectifiers and the output is squashed by a sigmoid, so
//! confidences lie strictly inside `(0, 1)`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, NodeId, Tape, Tensor};
use crate::error::{Error, Result};

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `1` when `||x1 - x2|| <= radius`, else `0`.
pub fn flat_kernel(x1: &[f64], x2: &[f64], radius: f64) -> Result<f64> {
    check_dims(x1, x2)?;
    if !(radius > 0.0) {
        return Err(Error::InvalidParameter(format!("flat radius {radius}")));
    }
    Ok(if squared_distance(x1, x2).sqrt() <= radius {
        1.0
    } else {
        0.0
    })
}

/// `exp(-||x1 - x2||^2 / (2 sigma^2))`.
pub fn gaussian_kernel(x1: &[f64], x2: &[f64], sigma: f64) -> Result<f64> {
    check_dims(x1, x2)?;
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("gaussian sigma {sigma}")));
    }
    Ok((-squared_distance(x1, x2) / (2.0 * sigma * sigma)).exp())
}

/// Distance-based kernel used by classical mean shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassicalKernel {
    Flat { radius: f64 },
    Gaussian { sigma: f64 },
}

impl ClassicalKernel {
    pub fn flat(radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidParameter(format!("flat radius {radius}")));
        }
        Ok(Self::Flat { radius })
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter(format!("gaussian sigma {sigma}")));
        }
        Ok(Self::Gaussian { sigma })
    }

    pub fn eval(&self, x1: &[f64], x2: &[f64]) -> Result<f64> {
        match *self {
            Self::Flat { radius } => flat_kernel(x1, x2, radius),
            Self::Gaussian { sigma } => gaussian_kernel(x1, x2, sigma),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelVariant {
    Subtract,
    Concat,
}

impl fmt::Display for KernelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Subtract => "subtract",
            Self::Concat => "concat",
        })
    }
}

impl FromStr for KernelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subtract" | "sub" => Ok(Self::Subtract),
            "concat" => Ok(Self::Concat),
            other => Err(Error::InvalidParameter(format!("unknown kernel variant `{other}`"))),
        }
    }
}

/// Number of fully connected layers in the default architecture.
pub const DEFAULT_FC_LAYERS: usize = 3;

/// Widths `[N, ceil(N/2), ceil(N/4), ..., 1]` for `fc_layers` layers, each
/// hidden width at least 1.
pub fn layer_dims(input_dim: usize, fc_layers: usize) -> Vec<usize> {
    let mut dims = vec![input_dim];
    for i in 1..fc_layers {
        dims.push(input_dim.div_ceil(1 << i).max(1));
    }
    dims.push(1);
    dims
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    /// `[in, out]`
    weight: Tensor,
    /// `[out]`
    bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
struct PairConv {
    /// `[2]`: weight on the point, weight on the mean.
    weight: Tensor,
    /// `[N]`
    bias: Tensor,
}

/// Trainable similarity kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelModel {
    variant: KernelVariant,
    input_dim: usize,
    conv: Option<PairConv>,
    layers: Vec<Dense>,
}

/// Tape handles for a model's parameters, in [`KernelModel::named_parameters`] order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    ids: Vec<NodeId>,
}

impl ModelParams {
    /// Wraps handles already on a tape, in model parameter order.
    pub fn from_ids(ids: Vec<NodeId>) -> Self {
        Self { ids }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// Gradients for each parameter, in model order.
    pub fn collect(&self, grads: &Gradients) -> Vec<Tensor> {
        self.ids
            .iter()
            .map(|id| grads.get(*id).expect("parameter registered on this tape").clone())
            .collect()
    }
}

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, shape: Vec<usize>) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape matches")
}

impl KernelModel {
    /// Default three-layer architecture.
    pub fn new(input_dim: usize, variant: KernelVariant, seed: u64) -> Result<Self> {
        Self::with_depth(input_dim, variant, DEFAULT_FC_LAYERS, seed)
    }

    /// He-initialized hidden layers, zero output weights and zero biases, so
    /// every confidence starts at 0.5. A random output layer on unscaled
    /// inputs produces large logits that can kill every ReLU unit within a
    /// few steps.
    pub fn with_depth(
        input_dim: usize,
        variant: KernelVariant,
        fc_layers: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut model = Self::he_initialized(input_dim, variant, fc_layers, seed)?;
        let last = model.layers.last_mut().expect("at least one layer");
        last.weight = Tensor::zeros(last.weight.shape().to_vec());
        Ok(model)
    }

    /// Every weight He-initialized, including the output layer; zero biases.
    pub fn he_initialized(
        input_dim: usize,
        variant: KernelVariant,
        fc_layers: usize,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidParameter("kernel input dimension must be >= 1".into()));
        }
        if fc_layers == 0 {
            return Err(Error::InvalidParameter("kernel needs at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = match variant {
            KernelVariant::Subtract => None,
            KernelVariant::Concat => Some(PairConv {
                weight: he_normal(&mut rng, 2, vec![2]),
                bias: Tensor::zeros(vec![input_dim]),
            }),
        };
        let dims = layer_dims(input_dim, fc_layers);
        let layers = dims
            .windows(2)
            .map(|w| Dense {
                weight: he_normal(&mut rng, w[0], vec![w[0], w[1]]),
                bias: Tensor::zeros(vec![w[1]]),
            })
            .collect();
        Ok(Self {
            variant,
            input_dim,
            conv,
            layers,
        })
    }

    /// Rebuilds a model from named tensors as produced by
    /// [`KernelModel::named_parameters`], validating every shape.
    pub fn from_named_parameters(
        variant: KernelVariant,
        input_dim: usize,
        params: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let bad = Error::InvalidParameter;
        let mut iter = params.into_iter().peekable();
        fn expect(
            iter: &mut impl Iterator<Item = (String, Tensor)>,
            name: &str,
            shape: &[usize],
        ) -> Result<Tensor> {
            let (n, t) = iter
                .next()
                .ok_or_else(|| Error::InvalidParameter(format!("missing parameter {name}")))?;
            if n != name || t.shape() != shape {
                return Err(Error::InvalidParameter(format!(
                    "expected {name} {shape:?}, found {n} {:?}",
                    t.shape()
                )));
            }
            Ok(t)
        }
        let conv = match variant {
            KernelVariant::Subtract => None,
            KernelVariant::Concat => Some(PairConv {
                weight: expect(&mut iter, "conv.weight", &[2])?,
                bias: expect(&mut iter, "conv.bias", &[input_dim])?,
            }),
        };
        let mut layers = Vec::new();
        let mut fan_in = input_dim;
        loop {
            let i = layers.len();
            let weight_name = format!("fc{i}.weight");
            let out = match iter.peek() {
                Some((n, t)) if *n == weight_name && t.shape().len() == 2 => t.shape()[1],
                Some((n, _)) => return Err(bad(format!("unexpected parameter {n}"))),
                None => break,
            };
            let weight = expect(&mut iter, &weight_name, &[fan_in, out])?;
            let bias = expect(&mut iter, &format!("fc{i}.bias"), &[out])?;
            layers.push(Dense { weight, bias });
            fan_in = out;
        }
        if layers.is_empty() || fan_in != 1 {
            return Err(bad("kernel layers must end in a single output".into()));
        }
        Ok(Self {
            variant,
            input_dim,
            conv,
            layers,
        })
    }

    pub fn variant(&self) -> KernelVariant {
        self.variant
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn fc_layers(&self) -> usize {
        self.layers.len()
    }

    /// `[N, hidden..., 1]` widths of the fully connected stack.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(self.layers.iter().map(|l| l.bias.len()));
        dims
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(conv) = &self.conv {
            out.push(("conv.weight".to_string(), &conv.weight));
            out.push(("conv.bias".to_string(), &conv.bias));
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("fc{i}.weight"), &l.weight));
            out.push((format!("fc{i}.bias"), &l.bias));
        }
        out
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.named_parameters().into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(conv) = &mut self.conv {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
        }
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Overwrites every parameter, in model order.
    pub fn set_parameters(&mut self, values: &[Tensor]) -> Result<()> {
        let mut slots = self.parameters_mut();
        if slots.len() != values.len() {
            return Err(Error::Dimension {
                expected: slots.len(),
                got: values.len(),
            });
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    op: "set_parameters",
                    node: 0,
                    left: slot.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            **slot = v.clone();
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter on `tape` as trainable.
    pub fn register(&self, tape: &mut Tape) -> ModelParams {
        self.register_values(tape, &self.parameters())
    }

    /// Records caller-provided parameter values in place of the model's own.
    pub fn register_values(&self, tape: &mut Tape, values: &[Tensor]) -> ModelParams {
        ModelParams {
            ids: values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Model parameters as constants, for forward-only evaluation.
    fn register_constants(&self, tape: &mut Tape) -> ModelParams {
        ModelParams {
            ids: self
                .named_parameters()
                .into_iter()
                .map(|(_, t)| tape.leaf(t.clone()))
                .collect(),
        }
    }

    /// Records the kernel on `tape` for points `x` (`M x N`) against `mean`
    /// (`[N]`); returns the `M x 1` confidence node.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        params: &ModelParams,
        x: NodeId,
        mean: NodeId,
    ) -> Result<NodeId> {
        let cols = tape.value(x).cols();
        let mean_len = tape.value(mean).len();
        if cols != self.input_dim || mean_len != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: if cols != self.input_dim { cols } else { mean_len },
            });
        }
        let mut ids = params.ids.iter().copied();
        let mut h = match self.variant {
            KernelVariant::Subtract => tape.sub(x, mean)?,
            KernelVariant::Concat => {
                let w = ids.next().expect("conv weight");
                let b = ids.next().expect("conv bias");
                tape.pair_conv(x, mean, w, b)?
            }
        };
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            let w = ids.next().expect("layer weight");
            let b = ids.next().expect("layer bias");
            let z = tape.matmul(h, w)?;
            let z = tape.add(z, b)?;
            h = if i == last {
                tape.sigmoid(z)?
            } else {
                tape.relu(z)?
            };
        }
        Ok(h)
    }

    /// Confidence of every row of `x` being an inlier of the cluster at `mean`.
    pub fn forward(&self, x: &Tensor, mean: &[f64]) -> Result<Vec<f64>> {
        if x.shape().len() != 2 {
            return Err(Error::Dimension {
                expected: 2,
                got: x.shape().len(),
            });
        }
        let mut tape = Tape::new();
        let params = self.register_constants(&mut tape);
        let xs = tape.leaf(x.clone());
        let m = tape.leaf(Tensor::vector(mean.to_vec()));
        let out = self.forward_on(&mut tape, &params, xs, m)?;
        Ok(tape.evaluate(out)?.into_values())
    }

    /// Copy of this model with the pair filter fixed to `(w_point, w_mean)`
    /// and zero bias. Concat models only.
    pub fn with_pair_filter(&self, w_point: f64, w_mean: f64) -> Result<Self> {
        let mut out = self.clone();
        let conv = out
            .conv
            .as_mut()
            .ok_or_else(|| Error::InvalidParameter("subtract kernels have no pair filter".into()))?;
        conv.weight = Tensor::vector(vec![w_point, w_mean]);
        conv.bias = Tensor::zeros(vec![self.input_dim]);
        Ok(out)
    }

    /// Same network with the pair filter dropped.
    pub fn as_subtract(&self) -> Self {
        Self {
            variant: KernelVariant::Subtract,
            input_dim: self.input_dim,
            conv: None,
            layers: self.layers.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_points(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
        Tensor::matrix(m, n, (0..m * n).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn flat_kernel_cases() {
        let x = [0.3, -1.0];
        assert_eq!(flat_kernel(&x, &x, 0.1).unwrap(), 1.0);
        assert_eq!(flat_kernel(&[0.0, 0.0], &[3.0, 4.0], 5.0).unwrap(), 1.0);
        assert_eq!(flat_kernel(&[0.0, 0.0], &[3.0, 4.0], 4.9).unwrap(), 0.0);
        assert!(flat_kernel(&[0.0], &[0.0, 1.0], 1.0).is_err());
        assert!(flat_kernel(&[0.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn flat_kernel_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            assert_eq!(flat_kernel(&a, &b, 2.0).unwrap(), flat_kernel(&b, &a, 2.0).unwrap());
        }
    }

    #[test]
    fn gaussian_kernel_cases() {
        let sigma = 0.7;
        assert_eq!(gaussian_kernel(&[1.0, 2.0], &[1.0, 2.0], sigma).unwrap(), 1.0);
        let v = gaussian_kernel(&[0.0], &[sigma * 2f64.sqrt()], sigma).unwrap();
        assert!((v - (-1f64).exp()).abs() < 1e-15);
        assert!((v - 0.3679).abs() < 1e-4);
        assert!(gaussian_kernel(&[0.0], &[0.0], -1.0).is_err());
    }

    #[test]
    fn gaussian_monotone_in_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let c: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let dir: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (t1, t2) = (rng.random_range(0.0..1.0), rng.random_range(1.0..2.0));
            let near: Vec<f64> = c.iter().zip(&dir).map(|(a, d)| a + t1 * d).collect();
            let far: Vec<f64> = c.iter().zip(&dir).map(|(a, d)| a + t2 * d).collect();
            assert!(gaussian_kernel(&c, &near, 1.0).unwrap() >= gaussian_kernel(&c, &far, 1.0).unwrap());
        }
    }

    #[test]
    fn architecture_dims() {
        let m = KernelModel::new(16, KernelVariant::Subtract, 0).unwrap();
        assert_eq!(m.layer_dims(), vec![16, 8, 4, 1]);
        let c = KernelModel::new(16, KernelVariant::Concat, 0).unwrap();
        assert_eq!(c.layer_dims(), vec![16, 8, 4, 1]);
        let names: Vec<_> = c.named_parameters().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        assert_eq!(names[0], ("conv.weight".to_string(), vec![2]));
        assert_eq!(names[1], ("conv.bias".to_string(), vec![16]));
        let small = KernelModel::new(3, KernelVariant::Subtract, 0).unwrap();
        assert_eq!(small.layer_dims(), vec![3, 2, 1, 1]);
        assert_eq!(layer_dims(7, 3), vec![7, 4, 2, 1]);
        assert_eq!(layer_dims(16, 1), vec![16, 1]);
        assert_eq!(layer_dims(16, 4), vec![16, 8, 4, 2, 1]);
        assert!(KernelModel::new(0, KernelVariant::Subtract, 0).is_err());
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let a = KernelModel::new(8, KernelVariant::Concat, 42).unwrap();
        let b = KernelModel::new(8, KernelVariant::Concat, 42).unwrap();
        let c = KernelModel::new(8, KernelVariant::Concat, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (name, t) in a.named_parameters() {
            if name.ends_with("bias") {
                assert!(t.values().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn zero_weights_give_half() {
        let mut m = KernelModel::new(5, KernelVariant::Subtract, 1).unwrap();
        for p in m.parameters_mut() {
            p.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_points(&mut rng, 7, 5);
        let out = m.forward(&x, &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn concat_with_difference_filter_equals_subtract() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..5 {
            let concat = KernelModel::new(6, KernelVariant::Concat, seed).unwrap();
            let diff = concat.with_pair_filter(1.0, -1.0).unwrap();
            let sub = concat.as_subtract();
            let x = random_points(&mut rng, 20, 6);
            let mean: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = diff.forward(&x, &mean).unwrap();
            let b = sub.forward(&x, &mean).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        let sub = KernelModel::new(4, KernelVariant::Subtract, 0).unwrap();
        assert!(sub.with_pair_filter(1.0, -1.0).is_err());
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let m = KernelModel::new(4, KernelVariant::Subtract, 0).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        assert!(m.forward(&x, &[0.0; 3]).is_err());
        let x = Tensor::matrix(2, 4, vec![0.0; 8]).unwrap();
        assert!(m.forward(&x, &[0.0; 3]).is_err());
    }

    #[test]
    fn named_parameter_round_trip() {
        let m = KernelModel::with_depth(7, KernelVariant::Concat, 4, 3).unwrap();
        let named = m
            .named_parameters()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let back = KernelModel::from_named_parameters(KernelVariant::Concat, 7, named).unwrap();
        assert_eq!(back, m);
        let truncated: Vec<_> = m
            .named_parameters()
            .into_iter()
            .take(3)
            .map(|(n, t)| (n, t.clone()))
            .collect();
        assert!(KernelModel::from_named_parameters(KernelVariant::Concat, 7, truncated).is_err());
    }

    #[test]
    fn kernel_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for variant in [KernelVariant::Subtract, KernelVariant::Concat] {
            let m = KernelModel::new(5, variant, 8).unwrap();
            let x = random_points(&mut rng, 12, 5);
            let mean: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let targets: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
            let report = crate::autodiff::grad_check(
                |tape, ids| {
                    let params = ModelParams::from_ids(ids.to_vec());
                    let xs = tape.leaf(x.clone());
                    let mu = tape.leaf(Tensor::vector(mean.clone()));
                    let p = m.forward_on(tape, &params, xs, mu)?;
                    tape.masked_bce(p, &targets, &[true; 12])
                },
                &m.parameters(),
                1e-4,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{variant}: {report:?}");
            assert!(report.checked >= m.parameter_count() * 9 / 10);
        }
    }

    proptest! {
        #[test]
        fn confidences_in_open_unit_interval(
            seed in 0u64..1000,
            scale in 0.1f64..5.0,
            concat in any::<bool>(),
        ) {
            let variant = if concat { KernelVariant::Concat } else { KernelVariant::Subtract };
            let m = KernelModel::new(4, variant, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::matrix(9, 4, (0..36).map(|_| rng.random_range(-1.0..1.0) * scale).collect()).unwrap();
            let mean = [0.5, -0.5, 1.0, 0.0];
            for p in m.forward(&x, &mean).unwrap() {
                // Wide inputs can round the sigmoid to exactly 0 or 1.
                prop_assert!((0.0..=1.0).contains(&p), "{p}");
                if scale < 1.0 {
                    prop_assert!(p > 0.0 && p < 1.0, "{p}");
                }
            }
            prop_assert_eq!(m.forward(&x, &mean).unwrap(), m.forward(&x, &mean).unwrap());
        }

        #[test]
        fn subtract_is_translation_invariant(seed in 0u64..1000, shift in -5.0f64..5.0) {
            let m = KernelModel::new(3, KernelVariant::Subtract, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let x = random_points(&mut rng, 10, 3);
            let mean = [0.2, -0.4, 0.9];
            let moved = Tensor::matrix(10, 3, x.values().iter().map(|v| v + shift).collect()).unwrap();
            let moved_mean: Vec<f64> = mean.iter().map(|v| v + shift).collect();
            let a = m.forward(&x, &mean).unwrap();
            let b = m.forward(&moved, &moved_mean).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
