//! Iterative center finding.
//!
//! One step replaces the current mean with the kernel-weighted average of
//! all points. The learned kernel stops when two consecutive means predict
//! the same inlier set; the classical kernels stop when the mean moves less
//! than `tau`.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::kernels::{squared_distance, ClassicalKernel, KernelModel, ModelParams};

/// Added to the weight total before dividing.
pub const MEAN_GUARD: f64 = 1e-12;

/// Anything that scores every row of a point matrix against a mean.
pub trait InlierKernel {
    fn confidences(&self, points: &Tensor, mean: &[f64]) -> Result<Vec<f64>>;
}

impl InlierKernel for KernelModel {
    fn confidences(&self, points: &Tensor, mean: &[f64]) -> Result<Vec<f64>> {
        self.forward(points, mean)
    }
}

impl InlierKernel for ClassicalKernel {
    fn confidences(&self, points: &Tensor, mean: &[f64]) -> Result<Vec<f64>> {
        points.iter_rows().map(|row| self.eval(row, mean)).collect()
    }
}

impl<K: InlierKernel + ?Sized> InlierKernel for &K {
    fn confidences(&self, points: &Tensor, mean: &[f64]) -> Result<Vec<f64>> {
        (**self).confidences(points, mean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftConfig {
    /// Confidence cut separating inliers from outliers.
    pub inlier_threshold: f64,
    /// Cap on inference iterations.
    pub max_iterations: usize,
    /// Unrolled steps during training.
    pub train_iterations: usize,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            inlier_threshold: 0.5,
            max_iterations: 50,
            train_iterations: 4,
        }
    }
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inlier_threshold > 0.0 && self.inlier_threshold < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "inlier threshold {} outside (0, 1)",
                self.inlier_threshold
            )));
        }
        if self.max_iterations == 0 || self.train_iterations == 0 {
            return Err(Error::InvalidParameter("iteration counts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftTrace {
    /// `x0, x1, ..., xn`.
    pub means: Vec<Vec<f64>>,
    /// Confidences predicted by the final mean.
    pub confidences: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ShiftTrace {
    pub fn final_mean(&self) -> &[f64] {
        self.means.last().expect("trace holds the start point")
    }
}

/// `sum_i w_i x_i / (sum_i w_i + MEAN_GUARD)`, or `None` when every weight is zero.
pub fn weighted_mean(points: &Tensor, weights: &[f64]) -> Result<Option<Vec<f64>>> {
    if weights.len() != points.rows() {
        return Err(Error::Dimension {
            expected: points.rows(),
            got: weights.len(),
        });
    }
    let mut num = vec![0.0; points.cols()];
    let mut total = 0.0;
    for (row, &w) in points.iter_rows().zip(weights) {
        total += w;
        for (acc, &x) in num.iter_mut().zip(row) {
            *acc += w * x;
        }
    }
    if total == 0.0 {
        return Ok(None);
    }
    let denom = total + MEAN_GUARD;
    num.iter_mut().for_each(|v| *v /= denom);
    Ok(Some(num))
}

/// One sample-mean update. Returns the next mean and the weights used; an
/// all-zero weight vector holds the mean in place.
pub fn sample_mean_step<K: InlierKernel>(
    kernel: &K,
    points: &Tensor,
    mean: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if mean.len() != points.cols() {
        return Err(Error::Dimension {
            expected: points.cols(),
            got: mean.len(),
        });
    }
    let weights = kernel.confidences(points, mean)?;
    let next = weighted_mean(points, &weights)?.unwrap_or_else(|| mean.to_vec());
    Ok((next, weights))
}

fn binarize(confidences: &[f64], threshold: f64) -> impl Iterator<Item = bool> + '_ {
    confidences.iter().map(move |&c| c >= threshold)
}

/// Shifts from `start` until two consecutive means agree on which points are
/// inliers, or `max_iterations` updates have been made.
pub fn run_until_inlier_convergence<K: InlierKernel>(
    kernel: &K,
    points: &Tensor,
    start: &[f64],
    cfg: &ShiftConfig,
) -> Result<ShiftTrace> {
    cfg.validate()?;
    if start.len() != points.cols() {
        return Err(Error::Dimension {
            expected: points.cols(),
            got: start.len(),
        });
    }
    let mut means = vec![start.to_vec()];
    let mut previous = kernel.confidences(points, start)?;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        let current_mean = means.last().expect("non-empty");
        let next = weighted_mean(points, &previous)?.unwrap_or_else(|| current_mean.clone());
        let current = kernel.confidences(points, &next)?;
        means.push(next);
        iterations += 1;
        let agree = binarize(&current, cfg.inlier_threshold)
            .eq(binarize(&previous, cfg.inlier_threshold));
        previous = current;
        if agree {
            converged = true;
            break;
        }
    }
    Ok(ShiftTrace {
        means,
        confidences: previous,
        iterations,
        converged,
    })
}

/// Records `steps` mean updates from `start` followed by one more kernel
/// pass against the last mean; returns that final `M x 1` confidence node.
pub fn unrolled_training_forward(
    model: &KernelModel,
    tape: &mut Tape,
    params: &ModelParams,
    points: NodeId,
    start: NodeId,
    steps: usize,
) -> Result<NodeId> {
    if steps == 0 {
        return Err(Error::InvalidParameter("unroll depth must be >= 1".into()));
    }
    let mut trajectory = unrolled_training_trajectory(model, tape, params, points, start, steps)?;
    Ok(trajectory.pop().expect("non-empty trajectory"))
}

/// Like [`unrolled_training_forward`] but returns the confidence node of
/// every kernel pass: the `steps` weighting passes followed by the final one.
pub fn unrolled_training_trajectory(
    model: &KernelModel,
    tape: &mut Tape,
    params: &ModelParams,
    points: NodeId,
    start: NodeId,
    steps: usize,
) -> Result<Vec<NodeId>> {
    if steps == 0 {
        return Err(Error::InvalidParameter("unroll depth must be >= 1".into()));
    }
    let mut mean = start;
    let mut passes = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let weights = model.forward_on(tape, params, points, mean)?;
        passes.push(weights);
        if tape.value(weights).values().iter().sum::<f64>() == 0.0 {
            continue;
        }
        mean = tape.weighted_mean(points, weights, MEAN_GUARD)?;
    }
    passes.push(model.forward_on(tape, params, points, mean)?);
    Ok(passes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassicalShiftConfig {
    pub kernel: ClassicalKernel,
    /// Convergence threshold on consecutive-mean distance.
    pub tau: f64,
    pub max_iterations: usize,
    /// Converged means closer than this are merged (single linkage).
    pub merge_radius: f64,
}

impl ClassicalShiftConfig {
    pub fn new(kernel: ClassicalKernel, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
        }
        Ok(Self {
            kernel,
            tau,
            max_iterations: 300,
            merge_radius: tau,
        })
    }

    pub fn with_merge_radius(mut self, radius: f64) -> Self {
        self.merge_radius = radius;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalShiftResult {
    /// Merged centers, in first-seen order.
    pub centers: Vec<Vec<f64>>,
    /// Center index for each initialization.
    pub assignment: Vec<usize>,
    /// Unmerged converged mean for each initialization.
    pub modes: Vec<Vec<f64>>,
    pub converged: Vec<bool>,
}

fn classical_shift(points: &Tensor, cfg: &ClassicalShiftConfig, start: &[f64]) -> Result<(Vec<f64>, bool)> {
    let mut mean = start.to_vec();
    for _ in 0..cfg.max_iterations {
        let weights = cfg.kernel.confidences(points, &mean)?;
        let total: f64 = weights.iter().sum();
        if total == 0.0 {
            return Ok((mean, true));
        }
        let mut next = vec![0.0; mean.len()];
        for (row, &w) in points.iter_rows().zip(&weights) {
            for (acc, &x) in next.iter_mut().zip(row) {
                *acc += w * x;
            }
        }
        next.iter_mut().for_each(|v| *v /= total);
        let moved = squared_distance(&next, &mean).sqrt();
        mean = next;
        if moved < cfg.tau {
            return Ok((mean, true));
        }
    }
    Ok((mean, false))
}

/// Classical mean shift from each initialization, then single-linkage merge
/// of the converged means.
pub fn classical_mean_shift(
    points: &Tensor,
    cfg: &ClassicalShiftConfig,
    inits: &[Vec<f64>],
) -> Result<ClassicalShiftResult> {
    if inits.is_empty() {
        return Err(Error::InvalidParameter("classical mean shift needs initializations".into()));
    }
    if !(cfg.tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau must be positive, got {}", cfg.tau)));
    }
    let mut modes = Vec::with_capacity(inits.len());
    let mut converged = Vec::with_capacity(inits.len());
    for init in inits {
        if init.len() != points.cols() {
            return Err(Error::Dimension {
                expected: points.cols(),
                got: init.len(),
            });
        }
        let (mode, ok) = classical_shift(points, cfg, init)?;
        modes.push(mode);
        converged.push(ok);
    }

    let mut sets = crate::refiner::DisjointSet::new(modes.len());
    let r2 = cfg.merge_radius * cfg.merge_radius;
    for i in 0..modes.len() {
        for j in i + 1..modes.len() {
            if squared_distance(&modes[i], &modes[j]) < r2 {
                sets.union(i, j);
            }
        }
    }
    let labels = sets.labels();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let dim = points.cols();
    let mut centers = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (mode, &l) in modes.iter().zip(&labels) {
        counts[l] += 1;
        for (c, v) in centers[l].iter_mut().zip(mode) {
            *c += v;
        }
    }
    for (c, &n) in centers.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(ClassicalShiftResult {
        centers,
        assignment: labels,
        modes,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::kernels::KernelVariant;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Constant(f64);
    impl InlierKernel for Constant {
        fn confidences(&self, points: &Tensor, _: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![self.0; points.rows()])
        }
    }

    struct OneHot(usize);
    impl InlierKernel for OneHot {
        fn confidences(&self, points: &Tensor, _: &[f64]) -> Result<Vec<f64>> {
            Ok((0..points.rows()).map(|i| (i == self.0) as u8 as f64).collect())
        }
    }

    /// Scales another kernel's output by a positive constant.
    struct Scaled<'a>(&'a KernelModel, f64);
    impl InlierKernel for Scaled<'_> {
        fn confidences(&self, points: &Tensor, mean: &[f64]) -> Result<Vec<f64>> {
            Ok(self.0.forward(points, mean)?.into_iter().map(|v| v * self.1).collect())
        }
    }

    fn line(values: &[f64]) -> Tensor {
        Tensor::matrix(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn flat_step_hand_value() {
        let x = line(&[0.0, 1.0, 10.0]);
        let k = ClassicalKernel::flat(2.0).unwrap();
        let (next, w) = sample_mean_step(&k, &x, &[0.0]).unwrap();
        assert_eq!(w, vec![1.0, 1.0, 0.0]);
        assert!((next[0] - 0.5).abs() < 1e-11);
    }

    #[test]
    fn uniform_weights_give_column_mean() {
        let x = Tensor::matrix(4, 2, vec![1.0, 2.0, 3.0, -2.0, 5.0, 0.5, -1.0, 4.0]).unwrap();
        for c in [1e-3, 0.4, 7.0] {
            let (next, _) = sample_mean_step(&Constant(c), &x, &[0.0, 0.0]).unwrap();
            assert!((next[0] - 2.0).abs() < 1e-9);
            assert!((next[1] - 1.125).abs() < 1e-9);
        }
    }

    #[test]
    fn one_hot_weights_select_row() {
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, -2.0, 5.0, 0.5]).unwrap();
        let (next, _) = sample_mean_step(&OneHot(1), &x, &[0.0, 0.0]).unwrap();
        assert!((next[0] - 3.0).abs() < 1e-11 && (next[1] + 2.0).abs() < 1e-11);
    }

    #[test]
    fn zero_weights_hold_mean() {
        let x = line(&[0.0, 1.0]);
        let (next, _) = sample_mean_step(&Constant(0.0), &x, &[4.0]).unwrap();
        assert_eq!(next, vec![4.0]);
    }

    #[test]
    fn stationary_kernel_stops_on_first_agreement() {
        let x = line(&[0.0, 1.0, 2.0]);
        let trace = run_until_inlier_convergence(&Constant(0.8), &x, &[1.0], &ShiftConfig::default()).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.iterations, 1);
        assert_eq!(trace.means.len(), 2);
    }

    #[test]
    fn iteration_cap() {
        // From 0 the inliers are {0, 1, 2}; from their mean they grow to include 3.
        let x = line(&[0.0, 1.0, 2.0, 3.0, 10.0]);
        let k = ClassicalKernel::flat(2.5).unwrap();
        let cfg = ShiftConfig {
            max_iterations: 1,
            ..ShiftConfig::default()
        };
        let trace = run_until_inlier_convergence(&k, &x, &[0.0], &cfg).unwrap();
        assert_eq!(trace.means.len(), 2);
        assert!(!trace.converged);
        assert_eq!(trace.iterations, 1);
    }

    #[test]
    fn converged_mean_reconverges_immediately() {
        let x = line(&[0.0, 0.2, 0.4, 5.0, 5.3]);
        let k = ClassicalKernel::flat(1.0).unwrap();
        let cfg = ShiftConfig::default();
        let first = run_until_inlier_convergence(&k, &x, &[0.0], &cfg).unwrap();
        assert!(first.converged);
        let again = run_until_inlier_convergence(&k, &x, first.final_mean(), &cfg).unwrap();
        assert!(again.converged);
        assert_eq!(again.iterations, 1);
        assert_eq!(again.confidences, first.confidences);
    }

    #[test]
    fn weight_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = KernelModel::new(3, KernelVariant::Subtract, 2).unwrap();
        let x = Tensor::matrix(15, 3, (0..45).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let mean = [0.1, 0.0, -0.3];
        let (a, _) = sample_mean_step(&model, &x, &mean).unwrap();
        let (b, _) = sample_mean_step(&Scaled(&model, 2.0), &x, &mean).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn unrolled_single_step_is_step_then_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = KernelModel::new(4, KernelVariant::Subtract, 5).unwrap();
        let x = Tensor::matrix(10, 4, (0..40).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let start = x.row(3).to_vec();
        let mut tape = Tape::new();
        let params = model.register(&mut tape);
        let xs = tape.leaf(x.clone());
        let s = tape.leaf(Tensor::vector(start.clone()));
        let out = unrolled_training_forward(&model, &mut tape, &params, xs, s, 1).unwrap();
        let (next, _) = sample_mean_step(&model, &x, &start).unwrap();
        let direct = model.forward(&x, &next).unwrap();
        assert_eq!(tape.value(out).values(), direct.as_slice());
    }

    #[test]
    fn unrolled_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = KernelModel::new(4, KernelVariant::Subtract, 0).unwrap();
        let x = Tensor::matrix(12, 4, (0..48).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let targets: Vec<f64> = (0..12).map(|i| (i < 4) as u8 as f64).collect();
        let report = grad_check(
            |tape, ids| {
                let params = ModelParams::from_ids(ids.to_vec());
                let xs = tape.leaf(x.clone());
                let s = tape.leaf(Tensor::vector(x.row(0).to_vec()));
                let p = unrolled_training_forward(&model, tape, &params, xs, s, 4)?;
                tape.masked_bce(p, &targets, &[true; 12])
            },
            &model.parameters(),
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn classical_single_point() {
        let x = Tensor::matrix(1, 2, vec![3.0, -1.0]).unwrap();
        let cfg = ClassicalShiftConfig::new(ClassicalKernel::flat(1.0).unwrap(), 1e-6).unwrap();
        let r = classical_mean_shift(&x, &cfg, &[vec![3.0, -1.0]]).unwrap();
        assert_eq!(r.centers, vec![vec![3.0, -1.0]]);
        assert_eq!(r.assignment, vec![0]);
    }

    #[test]
    fn classical_two_groups_on_a_line() {
        let values = [0.0, 0.1, 0.2, 9.9, 10.0];
        let x = line(&values);
        let cfg = ClassicalShiftConfig::new(ClassicalKernel::flat(1.0).unwrap(), 1e-6).unwrap();
        let inits: Vec<Vec<f64>> = values.iter().map(|v| vec![*v]).collect();
        let r = classical_mean_shift(&x, &cfg, &inits).unwrap();
        assert_eq!(r.centers.len(), 2);
        assert!((r.centers[0][0] - 0.1).abs() < 1e-9);
        assert!((r.centers[1][0] - 9.95).abs() < 1e-9);
        assert_eq!(r.assignment, vec![0, 0, 0, 1, 1]);
    }

    #[test]
    fn flat_kernel_with_no_inliers_holds() {
        let x = line(&[0.0, 1.0]);
        let cfg = ClassicalShiftConfig::new(ClassicalKernel::flat(0.5).unwrap(), 1e-6).unwrap();
        let r = classical_mean_shift(&x, &cfg, &[vec![50.0]]).unwrap();
        assert_eq!(r.modes, vec![vec![50.0]]);
        assert!(r.converged[0]);
        assert!(classical_mean_shift(&x, &cfg, &[]).is_err());
    }

    #[test]
    fn gaussian_on_two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = rand_distr::Normal::new(0.0, 0.3).unwrap();
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for (label, c) in [[0.0, 0.0], [6.0, 4.0]].iter().enumerate() {
            for _ in 0..30 {
                rows.push(vec![
                    c[0] + rand_distr::Distribution::sample(&normal, &mut rng),
                    c[1] + rand_distr::Distribution::sample(&normal, &mut rng),
                ]);
                truth.push(label);
            }
        }
        let x = Tensor::from_rows(&rows).unwrap();
        let cfg = ClassicalShiftConfig::new(ClassicalKernel::gaussian(0.5).unwrap(), 1e-6)
            .unwrap()
            .with_merge_radius(0.25);
        let r = classical_mean_shift(&x, &cfg, &rows).unwrap();
        assert_eq!(r.centers.len(), 2);
        assert_eq!(r.assignment, truth);
        assert!(r.converged.iter().all(|&c| c));
    }

    proptest! {
        #[test]
        fn step_stays_in_convex_hull(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = KernelModel::new(2, KernelVariant::Subtract, seed).unwrap();
            let x = Tensor::matrix(8, 2, (0..16).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let (next, _) = sample_mean_step(&model, &x, &[0.0, 0.0]).unwrap();
            for d in 0..2 {
                let col: Vec<f64> = x.iter_rows().map(|r| r[d]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(next[d] >= lo - 1e-9 && next[d] <= hi + 1e-9);
            }
        }
    }
}
