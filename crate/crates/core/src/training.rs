//! Side information and the training loop.
//!
//! Pairwise labels are folded into pseudo-classes: must-link components, plus
//! which components are known to differ. Each training instance starts the
//! mean at one labelled point and asks the unrolled kernel to accept points of
//! the same pseudo-class and reject points cannot-linked to it. Extra
//! unlabelled points take part in the mean updates but not in the loss.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Adam, Tape, Tensor};
use crate::error::{Error, Result};
use crate::kernels::KernelModel;
use crate::meanshift::{unrolled_training_forward, unrolled_training_trajectory};
use crate::refiner::DisjointSet;

/// Raw "similar" and "dissimilar" index pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairwiseConstraints {
    pub must_link: Vec<(usize, usize)>,
    pub cannot_link: Vec<(usize, usize)>,
}

/// Pseudo-classes over the labelled points and the known separations
/// between them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SideInfoGraph {
    /// Sorted members, classes ordered by smallest member.
    classes: Vec<Vec<usize>>,
    class_of: BTreeMap<usize, usize>,
    /// Sorted cannot-linked classes per class.
    separated: Vec<Vec<usize>>,
    /// Members of every separated class, per class.
    negatives: Vec<Vec<usize>>,
}

impl SideInfoGraph {
    fn build(mut classes: Vec<Vec<usize>>, separations: &BTreeSet<(usize, usize)>) -> Self {
        // Relabel so classes are ordered by smallest member.
        for c in &mut classes {
            c.sort_unstable();
        }
        let mut order: Vec<usize> = (0..classes.len()).collect();
        order.sort_by_key(|&c| classes[c][0]);
        let mut new_id = vec![0; classes.len()];
        for (new, &old) in order.iter().enumerate() {
            new_id[old] = new;
        }
        let classes: Vec<Vec<usize>> = order.iter().map(|&c| classes[c].clone()).collect();
        let mut separated = vec![BTreeSet::new(); classes.len()];
        for &(a, b) in separations {
            separated[new_id[a]].insert(new_id[b]);
            separated[new_id[b]].insert(new_id[a]);
        }
        let separated: Vec<Vec<usize>> = separated.into_iter().map(|s| s.into_iter().collect()).collect();
        let negatives = separated
            .iter()
            .map(|s| s.iter().flat_map(|&c| classes[c].iter().copied()).collect())
            .collect();
        let class_of = classes
            .iter()
            .enumerate()
            .flat_map(|(c, members)| members.iter().map(move |&i| (i, c)))
            .collect();
        Self {
            classes,
            class_of,
            separated,
            negatives,
        }
    }

    pub fn empty() -> Self {
        Self::build(Vec::new(), &BTreeSet::new())
    }

    pub fn pseudo_classes(&self) -> &[Vec<usize>] {
        &self.classes
    }

    pub fn class_of(&self, index: usize) -> Option<usize> {
        self.class_of.get(&index).copied()
    }

    /// Classes known to differ from `class`.
    pub fn separated_from(&self, class: usize) -> &[usize] {
        &self.separated[class]
    }

    pub fn labelled_indices(&self) -> Vec<usize> {
        self.class_of.keys().copied().collect()
    }

    pub fn labelled_count(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Labelled points that can start an instance, i.e. whose class has a
    /// cannot-linked class to draw negatives from.
    pub fn eligible_inits(&self) -> Vec<usize> {
        self.class_of
            .iter()
            .filter(|(_, &c)| !self.negatives[c].is_empty())
            .map(|(&i, _)| i)
            .collect()
    }

    /// Expands back to explicit pairs: every same-class pair and every pair
    /// across separated classes, each with `i < j`.
    pub fn to_constraints(&self) -> PairwiseConstraints {
        let labelled = self.labelled_indices();
        let mut out = PairwiseConstraints::default();
        for (a, &i) in labelled.iter().enumerate() {
            let ci = self.class_of[&i];
            for &j in &labelled[a + 1..] {
                let cj = self.class_of[&j];
                if ci == cj {
                    out.must_link.push((i, j));
                } else if self.separated[ci].binary_search(&cj).is_ok() {
                    out.cannot_link.push((i, j));
                }
            }
        }
        out
    }
}

/// Must-link closure by union-find. A cannot-link inside a component is a
/// contradiction; all such pairs are reported.
pub fn derive_pseudo_classes(constraints: &PairwiseConstraints) -> Result<SideInfoGraph> {
    let endpoints: BTreeSet<usize> = constraints
        .must_link
        .iter()
        .chain(&constraints.cannot_link)
        .flat_map(|&(a, b)| [a, b])
        .collect();
    let slot: BTreeMap<usize, usize> = endpoints.iter().enumerate().map(|(s, &i)| (i, s)).collect();
    let mut sets = DisjointSet::new(endpoints.len());
    for &(a, b) in &constraints.must_link {
        sets.union(slot[&a], slot[&b]);
    }
    let labels = sets.labels();
    let mut bad: Vec<(usize, usize)> = constraints
        .cannot_link
        .iter()
        .filter(|(a, b)| labels[slot[a]] == labels[slot[b]])
        .copied()
        .collect();
    if !bad.is_empty() {
        bad.sort_unstable();
        bad.dedup();
        return Err(Error::Contradiction(bad));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut classes = vec![Vec::new(); k];
    for (&i, &s) in &slot {
        classes[labels[s]].push(i);
    }
    let separations = constraints
        .cannot_link
        .iter()
        .map(|(a, b)| (labels[slot[a]], labels[slot[b]]))
        .collect();
    Ok(SideInfoGraph::build(classes, &separations))
}

/// Simulated side information from ground-truth labels: every pair of sampled
/// points is similar when their labels agree and dissimilar otherwise.
///
/// Samples `ceil(fraction * n)` points, optionally only from `class_limit`
/// randomly chosen classes and at most `per_class_limit` points per class.
pub fn make_side_info(
    labels: &[i64],
    fraction: f64,
    class_limit: Option<usize>,
    per_class_limit: Option<usize>,
    seed: u64,
) -> Result<SideInfoGraph> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<i64> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let kept: BTreeSet<i64> = match class_limit {
        Some(0) => return Err(Error::InvalidParameter("class_limit must be >= 1".into())),
        Some(c) if c < all.len() => rand::seq::index::sample(&mut rng, all.len(), c)
            .into_iter()
            .map(|i| all[i])
            .collect(),
        _ => all.iter().copied().collect(),
    };
    let mut pool: Vec<usize> = (0..labels.len()).filter(|&i| kept.contains(&labels[i])).collect();
    let target = (fraction * labels.len() as f64).ceil() as usize;
    // Random order over the pool, then keep the first points the caps allow.
    pool.shuffle(&mut rng);
    let mut per_class: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    let mut taken = 0;
    for i in pool {
        if taken == target {
            break;
        }
        let members = per_class.entry(labels[i]).or_default();
        if per_class_limit.is_some_and(|cap| members.len() >= cap) {
            continue;
        }
        members.push(i);
        taken += 1;
    }
    if taken < 2 {
        return Err(Error::InvalidParameter(format!(
            "side information needs at least 2 points, sampling gave {taken}"
        )));
    }
    let classes: Vec<Vec<usize>> = per_class.into_values().collect();
    let k = classes.len();
    let separations = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect();
    Ok(SideInfoGraph::build(classes, &separations))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    /// Unrolled mean-shift steps per instance.
    pub train_iterations: usize,
    /// Inclusive bounds on points per instance.
    pub instance_size: (usize, usize),
    /// Bounds on the labelled to unlabelled ratio.
    pub labelled_ratio: (f64, f64),
    /// Bounds on positives as a fraction of labelled points.
    pub positive_ratio: (f64, f64),
    pub learning_rate: f64,
    /// Step size reached at the last batch; the rate follows a cosine from
    /// `learning_rate` down to this.
    pub final_learning_rate: f64,
    pub supervision: Supervision,
    /// Flip each coordinate of an instance with probability 1/2. The kernel
    /// then sees every labelled difference under all sign patterns, which
    /// carries rejection over to directions no labelled pair spans.
    pub reflect: bool,
    pub seed: u64,
}

/// Which kernel passes of the unrolled forward enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Supervision {
    /// Only the pass against the last mean.
    FinalPass,
    /// Every weighting pass plus the final one, averaged. Keeps each
    /// intermediate mean on its class, so the learned kernel has the class
    /// center as a fixed point and inference converges.
    #[default]
    EveryPass,
}

impl std::fmt::Display for Supervision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Supervision::FinalPass => "final",
            Supervision::EveryPass => "every",
        })
    }
}

impl std::str::FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(Supervision::FinalPass),
            "every" => Ok(Supervision::EveryPass),
            _ => Err(Error::InvalidParameter(format!("supervision must be final or every, got {s:?}"))),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 96,
            batches_per_epoch: 20,
            train_iterations: 4,
            instance_size: (200, 300),
            labelled_ratio: (1.0 / 3.0, 1.0),
            positive_ratio: (1.0 / 20.0, 1.0 / 10.0),
            learning_rate: 0.1,
            final_learning_rate: 0.01,
            supervision: Supervision::EveryPass,
            reflect: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.batch_size == 0 || self.batches_per_epoch == 0 {
            return bad("batch_size and batches_per_epoch must be >= 1");
        }
        if self.train_iterations == 0 {
            return bad("train_iterations must be >= 1");
        }
        let (lo, hi) = self.instance_size;
        if lo < 2 || lo > hi {
            return bad("instance_size needs 2 <= min <= max");
        }
        let (a, b) = self.labelled_ratio;
        if !(a > 0.0 && a <= b && b.is_finite()) {
            return bad("labelled_ratio needs 0 < min <= max");
        }
        let (a, b) = self.positive_ratio;
        if !(a > 0.0 && a <= b && b < 1.0) {
            return bad("positive_ratio needs 0 < min <= max < 1");
        }
        for lr in [self.learning_rate, self.final_learning_rate] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad("learning rates must be finite and >= 0");
            }
        }
        Ok(())
    }
}

/// One sampled training problem. Index lists may repeat points.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    /// The labelled point the mean starts from.
    pub init_index: usize,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    pub unlabelled: Vec<usize>,
    /// Drawn labelled to unlabelled ratio.
    pub labelled_ratio: f64,
    /// Drawn positive fraction of labelled points.
    pub positive_ratio: f64,
    /// Per-coordinate signs the instance is seen through; empty means none.
    pub reflection: Vec<f64>,
}

impl TrainingInstance {
    pub fn len(&self) -> usize {
        self.positive.len() + self.negative.len() + self.unlabelled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labelled_len(&self) -> usize {
        self.positive.len() + self.negative.len()
    }

    /// Positives, then negatives, then unlabelled.
    pub fn rows(&self) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.len());
        rows.extend(&self.positive);
        rows.extend(&self.negative);
        rows.extend(&self.unlabelled);
        rows
    }

    pub fn targets(&self) -> Vec<f64> {
        let mut t = vec![1.0; self.positive.len()];
        t.resize(self.len(), 0.0);
        t
    }

    pub fn loss_mask(&self) -> Vec<bool> {
        let mut m = vec![true; self.labelled_len()];
        m.resize(self.len(), false);
        m
    }
}

/// Draws one instance; see [`TrainConfig`] for the sampled quantities.
pub fn sample_instance<R: Rng + ?Sized>(
    graph: &SideInfoGraph,
    dataset_size: usize,
    dim: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainingInstance> {
    let eligible = graph.eligible_inits();
    if eligible.is_empty() {
        return Err(Error::NoNegatives);
    }
    if dataset_size == 0 {
        return Err(Error::InvalidParameter("empty dataset".into()));
    }
    let total = rng.random_range(cfg.instance_size.0..=cfg.instance_size.1);
    let r = rng.random_range(cfg.labelled_ratio.0..=cfg.labelled_ratio.1);
    let pi = rng.random_range(cfg.positive_ratio.0..=cfg.positive_ratio.1);
    let labelled = ((total as f64 * r / (1.0 + r)).round() as usize).clamp(2, total);
    let n_pos = ((pi * labelled as f64).round() as usize).clamp(1, labelled - 1);
    let n_neg = labelled - n_pos;

    let init_index = *eligible.choose(rng).expect("non-empty");
    let class = graph.class_of(init_index).expect("labelled");
    let members = &graph.classes[class];
    let negatives = &graph.negatives[class];
    let positive = (0..n_pos).map(|_| *members.choose(rng).expect("non-empty")).collect();
    let negative = (0..n_neg).map(|_| *negatives.choose(rng).expect("non-empty")).collect();
    let unlabelled = (0..total - labelled).map(|_| rng.random_range(0..dataset_size)).collect();
    let reflection = if cfg.reflect {
        (0..dim).map(|_| if rng.random_bool(0.5) { -1.0 } else { 1.0 }).collect()
    } else {
        Vec::new()
    };
    Ok(TrainingInstance {
        init_index,
        positive,
        negative,
        unlabelled,
        labelled_ratio: r,
        positive_ratio: pi,
        reflection,
    })
}

/// Instance rows and start point, seen through the instance's reflection.
fn instance_inputs(x: &Tensor, instance: &TrainingInstance) -> (Tensor, Tensor) {
    let mut points = x.gather_rows(&instance.rows());
    let mut start = Tensor::vector(x.row(instance.init_index).to_vec());
    let signs = &instance.reflection;
    if !signs.is_empty() {
        let n = signs.len();
        points.values_mut().iter_mut().enumerate().for_each(|(i, v)| *v *= signs[i % n]);
        start.values_mut().iter_mut().zip(signs).for_each(|(v, s)| *v *= s);
    }
    (points, start)
}

/// Records the unrolled forward pass for `instance` on `tape` and returns the
/// summed BCE over its labelled points, averaged over the supervised passes.
pub fn instance_loss(
    model: &KernelModel,
    tape: &mut Tape,
    params: &crate::kernels::ModelParams,
    x: &Tensor,
    instance: &TrainingInstance,
    train_iterations: usize,
    supervision: Supervision,
) -> Result<crate::autodiff::NodeId> {
    let (points, start) = instance_inputs(x, instance);
    let (points, start) = (tape.leaf(points), tape.leaf(start));
    let (targets, mask) = (instance.targets(), instance.loss_mask());
    let loss = match supervision {
        Supervision::FinalPass => {
            let probs = unrolled_training_forward(model, tape, params, points, start, train_iterations)?;
            tape.masked_bce(probs, &targets, &mask)?
        }
        Supervision::EveryPass => {
            let passes = unrolled_training_trajectory(model, tape, params, points, start, train_iterations)?;
            let mut total = None;
            for probs in &passes {
                let l = tape.masked_bce(*probs, &targets, &mask)?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            let scale = tape.leaf(Tensor::scalar(1.0 / passes.len() as f64));
            tape.mul(total.expect("at least two passes"), scale)?
        }
    };
    if !tape.value(loss).is_finite() {
        return Err(Error::NonFinite("instance loss"));
    }
    Ok(loss)
}

/// Loss and parameter gradients of one instance at `values`.
pub fn instance_gradients(
    model: &KernelModel,
    values: &[Tensor],
    x: &Tensor,
    instance: &TrainingInstance,
    train_iterations: usize,
    supervision: Supervision,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let params = model.register_values(&mut tape, values);
    let loss = instance_loss(model, &mut tape, &params, x, instance, train_iterations, supervision)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).values()[0], params.collect(&grads)))
}

/// Final-stage confidences for every row of `instance`, in [`TrainingInstance::rows`] order.
pub fn instance_predictions(
    model: &KernelModel,
    x: &Tensor,
    instance: &TrainingInstance,
    train_iterations: usize,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let params = model.register(&mut tape);
    let (points, start) = instance_inputs(x, instance);
    let (points, start) = (tape.leaf(points), tape.leaf(start));
    let probs = unrolled_training_forward(model, &mut tape, &params, points, start, train_iterations)?;
    Ok(tape.value(probs).values().to_vec())
}

/// Finite-difference check of the full unrolled instance loss on a random
/// problem with `points` rows in `dim` dimensions.
pub fn check_instance_gradients(
    variant: crate::kernels::KernelVariant,
    dim: usize,
    points: usize,
    train_iterations: usize,
    supervision: Supervision,
    seed: u64,
    h: f64,
) -> Result<crate::autodiff::GradCheckReport> {
    if points < 4 {
        return Err(Error::InvalidParameter("gradient check needs at least 4 points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::matrix(
        points,
        dim,
        (0..points * dim).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )?;
    let (p, n) = (points / 4, points / 2);
    let instance = TrainingInstance {
        init_index: 0,
        positive: (0..p).collect(),
        negative: (p..p + n).collect(),
        unlabelled: (p + n..points).collect(),
        labelled_ratio: (p + n) as f64 / (points - p - n) as f64,
        positive_ratio: p as f64 / (p + n) as f64,
        reflection: Vec::new(),
    };
    let model = KernelModel::he_initialized(dim, variant, crate::kernels::DEFAULT_FC_LAYERS, seed)?;
    crate::autodiff::grad_check(
        |tape, ids| {
            let params = crate::kernels::ModelParams::from_ids(ids.to_vec());
            instance_loss(&model, tape, &params, &x, &instance, train_iterations, supervision)
        },
        &model.parameters(),
        h,
    )
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: KernelModel,
    /// Mean BCE per labelled point, one entry per epoch.
    pub loss_history: Vec<f64>,
    pub optimizer_steps: u64,
}

/// Trains a copy of `model`. Instances are drawn sequentially from one seeded
/// stream; gradients within a batch are summed and applied as one Adam step.
pub fn train(model: &KernelModel, x: &Tensor, graph: &SideInfoGraph, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(model, x, graph, cfg, |_, _| {})
}

/// [`train`] with a callback after every epoch receiving `(epoch, loss)`.
pub fn train_with_progress(
    model: &KernelModel,
    x: &Tensor,
    graph: &SideInfoGraph,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if x.cols() != model.input_dim() {
        return Err(Error::Dimension {
            expected: model.input_dim(),
            got: x.cols(),
        });
    }
    if graph.labelled_indices().last().is_some_and(|&i| i >= x.rows()) {
        return Err(Error::InvalidParameter("side information refers to points beyond the dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut values = model.parameters();
    let mut adam = Adam::new(cfg.learning_rate, &values);
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    let total_steps = (cfg.epochs * cfg.batches_per_epoch) as f64;
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut labelled) = (0.0, 0usize);
        for _ in 0..cfg.batches_per_epoch {
            let batch = (0..cfg.batch_size)
                .map(|_| sample_instance(graph, x.rows(), x.cols(), cfg, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let results = batch
                .par_iter()
                .map(|inst| instance_gradients(model, &values, x, inst, cfg.train_iterations, cfg.supervision))
                .collect::<Result<Vec<_>>>()?;
            let mut total: Vec<Tensor> = values.iter().map(|v| Tensor::zeros(v.shape().to_vec())).collect();
            for ((loss, grads), inst) in results.iter().zip(&batch) {
                loss_sum += loss;
                labelled += inst.labelled_len();
                for (t, g) in total.iter_mut().zip(grads) {
                    t.values_mut().iter_mut().zip(g.values()).for_each(|(a, b)| *a += b);
                }
            }
            let progress = adam.steps() as f64 / (total_steps - 1.0).max(1.0);
            adam.learning_rate = cfg.final_learning_rate
                + 0.5 * (cfg.learning_rate - cfg.final_learning_rate) * (1.0 + (std::f64::consts::PI * progress).cos());
            adam.step(&mut values, &total)?;
        }
        let epoch_loss = loss_sum / labelled as f64;
        loss_history.push(epoch_loss);
        progress(epoch, epoch_loss);
    }
    let mut trained = model.clone();
    trained.set_parameters(&values)?;
    Ok(TrainOutcome {
        model: trained,
        loss_history,
        optimizer_steps: adam.steps(),
    })
}
