//! Turning many converged means into clusters.
//!
//! Every candidate mean scores every point, giving a confidence matrix `H`.
//! After bi-stochastic normalization `H~`, candidates are compared through
//! the cosine form of `H~ H~^T`; thresholding that similarity and taking
//! connected components merges duplicates. Each point then goes to the
//! merged cluster most confident about it, or to [`NOISE`] if none is.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::kernels::KernelModel;
use crate::meanshift::{run_until_inlier_convergence, InlierKernel, ShiftConfig};

/// Label given to points no merged cluster claims.
pub const NOISE: i64 = -1;

/// Union-find with path halving and union by rank.
#[derive(Debug, Clone)]
pub struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns false if `a` and `b` were already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }

    /// Component label per element, numbered `0..k` in order of first appearance.
    pub fn labels(&mut self) -> Vec<usize> {
        let n = self.parent.len();
        let mut by_root = vec![usize::MAX; n];
        let mut next = 0;
        (0..n)
            .map(|i| {
                let r = self.find(i);
                if by_root[r] == usize::MAX {
                    by_root[r] = next;
                    next += 1;
                }
                by_root[r]
            })
            .collect()
    }
}

/// Candidate-center by point inlier confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMatrix {
    /// `R x C`
    pub values: Tensor,
    /// One entry per row.
    pub centers: Vec<Vec<f64>>,
}

impl ConfidenceMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }
}

pub fn build_confidence_matrix<K: InlierKernel + Sync>(
    kernel: &K,
    centers: &[Vec<f64>],
    points: &Tensor,
) -> Result<ConfidenceMatrix> {
    if centers.is_empty() || points.rows() == 0 {
        return Err(Error::InvalidParameter("confidence matrix needs centers and points".into()));
    }
    let rows: Vec<Vec<f64>> = centers
        .par_iter()
        .map(|c| {
            if c.len() != points.cols() {
                return Err(Error::Dimension {
                    expected: points.cols(),
                    got: c.len(),
                });
            }
            kernel.confidences(points, c)
        })
        .collect::<Result<_>>()?;
    Ok(ConfidenceMatrix {
        values: Tensor::from_rows(&rows)?,
        centers: centers.to_vec(),
    })
}

pub const SINKHORN_ROUNDS: usize = 10;
pub const SINKHORN_TOLERANCE: f64 = 1e-9;

fn normalize_rows(values: &mut [f64], cols: usize, target: f64) -> Result<()> {
    for (i, row) in values.chunks_exact_mut(cols).enumerate() {
        let s: f64 = row.iter().sum();
        if !(s > 0.0) {
            return Err(Error::ZeroSum {
                axis: "row",
                index: i,
            });
        }
        let f = target / s;
        row.iter_mut().for_each(|v| *v *= f);
    }
    Ok(())
}

fn column_sums(values: &[f64], cols: usize) -> Vec<f64> {
    let mut sums = vec![0.0; cols];
    for row in values.chunks_exact(cols) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    sums
}

/// Alternating column/row scaling until rows sum to 1 and columns to `R/C`.
/// At most `max_rounds` rounds, stopping early once every column is within
/// [`SINKHORN_TOLERANCE`]; the last scaling is always the row one.
pub fn sinkhorn_bistochastic(h: &Tensor, max_rounds: usize) -> Result<Tensor> {
    if max_rounds == 0 {
        return Err(Error::InvalidParameter("sinkhorn needs at least one round".into()));
    }
    let (r, c) = (h.rows(), h.cols());
    let col_target = r as f64 / c as f64;
    let mut out = h.clone();
    let values = out.values_mut();
    for _ in 0..max_rounds {
        let sums = column_sums(values, c);
        for (j, s) in sums.iter().enumerate() {
            if !(*s > 0.0) {
                return Err(Error::ZeroSum {
                    axis: "column",
                    index: j,
                });
            }
        }
        for row in values.chunks_exact_mut(c) {
            for (v, s) in row.iter_mut().zip(&sums) {
                *v *= col_target / s;
            }
        }
        normalize_rows(values, c, 1.0)?;
        let worst = column_sums(values, c)
            .iter()
            .map(|s| (s - col_target).abs())
            .fold(0.0, f64::max);
        if worst < SINKHORN_TOLERANCE {
            break;
        }
    }
    Ok(out)
}

/// Cosine form of `H~ H~^T`: symmetric, with an exact unit diagonal.
pub fn center_similarity(ht: &Tensor) -> Result<Tensor> {
    let r = ht.rows();
    let norms: Vec<f64> = ht
        .iter_rows()
        .map(|row| row.iter().map(|v| v * v).sum::<f64>())
        .collect();
    if let Some(i) = norms.iter().position(|n| !(*n > 0.0)) {
        return Err(Error::ZeroSum {
            axis: "similarity diagonal",
            index: i,
        });
    }
    let upper: Vec<Vec<f64>> = (0..r)
        .into_par_iter()
        .map(|i| {
            let a = ht.row(i);
            (i + 1..r)
                .map(|j| {
                    let b = ht.row(j);
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    dot / (norms[i] * norms[j]).sqrt()
                })
                .collect()
        })
        .collect();
    let mut s = vec![0.0; r * r];
    for i in 0..r {
        s[i * r + i] = 1.0;
        for (off, &v) in upper[i].iter().enumerate() {
            let j = i + 1 + off;
            s[i * r + j] = v;
            s[j * r + i] = v;
        }
    }
    Tensor::matrix(r, r, s)
}

/// Components of the graph with an edge wherever similarity reaches `threshold`.
pub fn binarize_and_components(similarity: &Tensor, threshold: f64) -> Vec<usize> {
    let r = similarity.rows();
    let mut sets = DisjointSet::new(r);
    for i in 0..r {
        let row = similarity.row(i);
        for (j, &v) in row.iter().enumerate().skip(i + 1) {
            if v >= threshold {
                sets.union(i, j);
            }
        }
    }
    sets.labels()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    /// Mean of the member candidate centers, per merged cluster.
    pub centers: Vec<Vec<f64>>,
    /// Cluster per point, or [`NOISE`].
    pub assignment: Vec<i64>,
    /// Highest merged-cluster confidence per point.
    pub confidence: Vec<f64>,
    /// Merged cluster of every candidate row.
    pub component_map: Vec<usize>,
    /// Candidate runs that hit the iteration cap.
    pub non_converged: usize,
}

impl ClusterResult {
    pub fn cluster_count(&self) -> usize {
        self.centers.len()
    }

    pub fn noise_count(&self) -> usize {
        self.assignment.iter().filter(|&&a| a == NOISE).count()
    }
}

/// Averages member rows of `H` per component and assigns each point to the
/// most confident merged cluster.
pub fn merge_and_assign(
    h: &ConfidenceMatrix,
    labels: &[usize],
    inlier_threshold: f64,
) -> Result<ClusterResult> {
    if labels.len() != h.rows() {
        return Err(Error::Dimension {
            expected: h.rows(),
            got: labels.len(),
        });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let (c, dim) = (h.cols(), h.centers.first().map_or(0, Vec::len));
    let mut rows = vec![vec![0.0; c]; k];
    let mut centers = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (r, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (acc, v) in rows[l].iter_mut().zip(h.values.row(r)) {
            *acc += v;
        }
        for (acc, v) in centers[l].iter_mut().zip(&h.centers[r]) {
            *acc += v;
        }
    }
    for l in 0..k {
        let n = counts[l] as f64;
        rows[l].iter_mut().for_each(|v| *v /= n);
        centers[l].iter_mut().for_each(|v| *v /= n);
    }
    let mut assignment = Vec::with_capacity(c);
    let mut confidence = Vec::with_capacity(c);
    for p in 0..c {
        let (best, conf) = (0..k).fold((0usize, f64::NEG_INFINITY), |acc, l| {
            if rows[l][p] > acc.1 {
                (l, rows[l][p])
            } else {
                acc
            }
        });
        assignment.push(if conf >= inlier_threshold {
            best as i64
        } else {
            NOISE
        });
        confidence.push(conf);
    }
    Ok(ClusterResult {
        centers,
        assignment,
        confidence,
        component_map: labels.to_vec(),
        non_converged: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterConfig {
    pub init_count: usize,
    pub shift: ShiftConfig,
    /// Cut on the normalized center similarity.
    pub similarity_threshold: f64,
    pub sinkhorn_rounds: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            init_count: 500,
            shift: ShiftConfig::default(),
            similarity_threshold: 0.5,
            sinkhorn_rounds: SINKHORN_ROUNDS,
        }
    }
}

/// Entries below this are lifted before normalization so that a sigmoid
/// that underflowed to zero cannot empty a column.
const MIN_CONFIDENCE: f64 = 1e-300;

/// Candidate runs plus the confidence matrix, before merging.
#[derive(Debug, Clone)]
pub struct Candidates {
    pub matrix: ConfidenceMatrix,
    pub non_converged: usize,
}

/// Runs center finding from the given point indices.
pub fn find_candidates<K: InlierKernel + Sync>(
    points: &Tensor,
    kernel: &K,
    init_indices: &[usize],
    shift: &ShiftConfig,
) -> Result<Candidates> {
    if init_indices.is_empty() {
        return Err(Error::InvalidParameter("need at least one initialization".into()));
    }
    let traces = init_indices
        .par_iter()
        .map(|&i| run_until_inlier_convergence(kernel, points, points.row(i), shift))
        .collect::<Result<Vec<_>>>()?;
    let non_converged = traces.iter().filter(|t| !t.converged).count();
    let centers: Vec<Vec<f64>> = traces.iter().map(|t| t.final_mean().to_vec()).collect();
    let rows: Vec<&[f64]> = traces.iter().map(|t| t.confidences.as_slice()).collect();
    Ok(Candidates {
        matrix: ConfidenceMatrix {
            values: Tensor::from_rows(&rows)?,
            centers,
        },
        non_converged,
    })
}

/// Merges candidates into clusters at the given similarity threshold.
pub fn refine(candidates: &Candidates, cfg: &ClusterConfig) -> Result<ClusterResult> {
    let mut lifted = candidates.matrix.values.clone();
    lifted
        .values_mut()
        .iter_mut()
        .for_each(|v| *v = v.max(MIN_CONFIDENCE));
    let normalized = sinkhorn_bistochastic(&lifted, cfg.sinkhorn_rounds)?;
    let similarity = center_similarity(&normalized)?;
    let labels = binarize_and_components(&similarity, cfg.similarity_threshold);
    let mut result = merge_and_assign(&candidates.matrix, &labels, cfg.shift.inlier_threshold)?;
    result.non_converged = candidates.non_converged;
    Ok(result)
}

/// Full inference from explicit initialization indices.
pub fn cluster_from_inits<K: InlierKernel + Sync>(
    points: &Tensor,
    kernel: &K,
    init_indices: &[usize],
    cfg: &ClusterConfig,
) -> Result<ClusterResult> {
    cfg.shift.validate()?;
    let candidates = find_candidates(points, kernel, init_indices, &cfg.shift)?;
    refine(&candidates, cfg)
}

/// Seeded choice of `min(init_count, n)` distinct start indices.
pub fn sample_inits(n: usize, init_count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, n, init_count.min(n)).into_vec()
}

/// Clusters `points` with a trained kernel from randomly chosen starts.
pub fn cluster(
    points: &Tensor,
    model: &KernelModel,
    cfg: &ClusterConfig,
    seed: u64,
) -> Result<ClusterResult> {
    if cfg.init_count == 0 {
        return Err(Error::InvalidParameter("init_count must be >= 1".into()));
    }
    let inits = sample_inits(points.rows(), cfg.init_count, seed);
    cluster_from_inits(points, model, &inits, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelVariant;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_positive(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap()
    }

    fn row_sums(t: &Tensor) -> Vec<f64> {
        t.iter_rows().map(|r| r.iter().sum()).collect()
    }

    #[test]
    fn disjoint_set_chain() {
        let mut s = DisjointSet::new(4);
        assert!(s.union(0, 1));
        assert!(s.union(1, 2));
        assert!(!s.union(0, 2));
        assert_eq!(s.labels(), vec![0, 0, 0, 1]);
    }

    #[test]
    fn sinkhorn_diagonal_dominant() {
        let h = Tensor::matrix(2, 2, vec![0.9, 0.2, 0.1, 0.8]).unwrap();
        let out = sinkhorn_bistochastic(&h, 10).unwrap();
        for s in row_sums(&out) {
            assert!((s - 1.0).abs() < 1e-6);
        }
        // ten rounds of plain alternating scaling, computed independently
        let oracle = [0.8570608812209173, 0.1429391187790826, 0.14277520611676878, 0.8572247938832311];
        for (v, o) in out.values().iter().zip(oracle) {
            assert!((v - o).abs() < 1e-12, "{out:?}");
        }
        let v = out.values();
        assert!(v[0] > v[1] && v[3] > v[2]);
        let limit = sinkhorn_bistochastic(&h, 200).unwrap();
        for s in column_sums(limit.values(), 2) {
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sinkhorn_constant_is_uniform() {
        let h = Tensor::matrix(3, 5, vec![0.4; 15]).unwrap();
        let out = sinkhorn_bistochastic(&h, 1).unwrap();
        for v in out.values() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn sinkhorn_near_permutation() {
        let mut values = vec![1e-4; 9];
        for (r, c) in [(0, 2), (1, 0), (2, 1)] {
            values[r * 3 + c] = 0.99;
        }
        let out = sinkhorn_bistochastic(&Tensor::matrix(3, 3, values.clone()).unwrap(), 10).unwrap();
        for (i, v) in out.values().iter().enumerate() {
            let expected = if values[i] > 0.5 { 1.0 } else { 0.0 };
            assert!((v - expected).abs() < 1e-3);
        }
    }

    #[test]
    fn sinkhorn_rejects_zero_column() {
        let h = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(matches!(
            sinkhorn_bistochastic(&h, 10),
            Err(Error::ZeroSum { axis: "column", index: 1 })
        ));
    }

    #[test]
    fn similarity_cases() {
        let ht = Tensor::matrix(3, 4, vec![0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.3, 0.7]).unwrap();
        let s = center_similarity(&ht).unwrap();
        assert!((s.values()[1] - 1.0).abs() < 1e-15);
        assert_eq!(s.values()[2], 0.0);
        let zero = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(center_similarity(&zero).is_err());
    }

    #[test]
    fn components_cases() {
        let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(binarize_and_components(&eye, 0.5), vec![0, 1, 2]);
        let full = Tensor::matrix(3, 3, vec![1.0, 0.6, 0.9, 0.6, 1.0, 0.7, 0.9, 0.7, 1.0]).unwrap();
        assert_eq!(binarize_and_components(&full, 0.5), vec![0, 0, 0]);
        // a-b and b-c linked, a-c not
        let chain = Tensor::matrix(3, 3, vec![1.0, 0.8, 0.1, 0.8, 1.0, 0.8, 0.1, 0.8, 1.0]).unwrap();
        assert_eq!(binarize_and_components(&chain, 0.5), vec![0, 0, 0]);
    }

    fn matrix(rows: &[&[f64]]) -> ConfidenceMatrix {
        ConfidenceMatrix {
            values: Tensor::from_rows(rows).unwrap(),
            centers: (0..rows.len()).map(|i| vec![i as f64]).collect(),
        }
    }

    #[test]
    fn merge_single_candidate() {
        let h = matrix(&[&[0.9, 0.7, 0.51]]);
        let r = merge_and_assign(&h, &[0], 0.5).unwrap();
        assert_eq!(r.assignment, vec![0, 0, 0]);
    }

    #[test]
    fn merge_low_confidence_is_noise() {
        let h = matrix(&[&[0.9, 0.3], &[0.1, 0.2]]);
        let r = merge_and_assign(&h, &[0, 1], 0.5).unwrap();
        assert_eq!(r.assignment, vec![0, NOISE]);
        assert_eq!(r.noise_count(), 1);
        for (a, c) in r.assignment.iter().zip(&r.confidence) {
            if *a != NOISE {
                assert!(*c >= 0.5);
            }
        }
    }

    #[test]
    fn merging_duplicates_matches_either() {
        let row: &[f64] = &[0.9, 0.1, 0.8, 0.05];
        let other: &[f64] = &[0.1, 0.95, 0.2, 0.02];
        let merged = merge_and_assign(&matrix(&[row, other, row]), &[0, 1, 0], 0.5).unwrap();
        let alone = merge_and_assign(&matrix(&[row, other]), &[0, 1], 0.5).unwrap();
        assert_eq!(merged.assignment, alone.assignment);
        assert_eq!(merged.confidence, alone.confidence);
        assert_eq!(merged.centers[0], vec![1.0]);
    }

    #[test]
    fn confidence_matrix_rows() {
        let model = KernelModel::new(2, KernelVariant::Subtract, 1).unwrap();
        let x = Tensor::matrix(3, 2, vec![0.0, 1.0, 2.0, 0.5, -1.0, 0.0]).unwrap();
        let c = vec![vec![0.1, 0.2]];
        let h = build_confidence_matrix(&model, &c, &x).unwrap();
        assert_eq!(h.values.values(), model.forward(&x, &c[0]).unwrap().as_slice());
        let dup = build_confidence_matrix(&model, &[c[0].clone(), c[0].clone()], &x).unwrap();
        assert_eq!(dup.values.row(0), dup.values.row(1));
        assert!(dup.values.values().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert!(build_confidence_matrix(&model, &[vec![0.0]], &x).is_err());
    }

    #[test]
    fn single_init_on_single_blob() {
        // Untrained kernels still see one cluster when every point is an inlier.
        struct Everything;
        impl InlierKernel for Everything {
            fn confidences(&self, points: &Tensor, _: &[f64]) -> Result<Vec<f64>> {
                Ok(vec![0.9; points.rows()])
            }
        }
        let x = Tensor::matrix(5, 1, vec![0.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
        let cfg = ClusterConfig {
            init_count: 1,
            ..ClusterConfig::default()
        };
        let r = cluster_from_inits(&x, &Everything, &sample_inits(5, 1, 0), &cfg).unwrap();
        assert_eq!(r.cluster_count(), 1);
        assert!(r.assignment.iter().all(|&a| a == 0));
    }

    #[test]
    fn cluster_is_deterministic() {
        let model = KernelModel::new(2, KernelVariant::Subtract, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::matrix(40, 2, (0..80).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let cfg = ClusterConfig {
            init_count: 10,
            ..ClusterConfig::default()
        };
        assert_eq!(cluster(&x, &model, &cfg, 4).unwrap(), cluster(&x, &model, &cfg, 4).unwrap());
        assert_eq!(sample_inits(40, 500, 1).len(), 40);
    }

    proptest! {
        #[test]
        fn sinkhorn_marginals(seed in 0u64..200, r in 1usize..12, c in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_positive(&mut rng, r, c);
            let out = sinkhorn_bistochastic(&h, 50).unwrap();
            for s in row_sums(&out) {
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
            for s in column_sums(out.values(), c) {
                prop_assert!((s - r as f64 / c as f64).abs() < 1e-6);
            }
        }

        #[test]
        fn similarity_symmetric_unit_diagonal(seed in 0u64..200, r in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_positive(&mut rng, r, 6);
            let s = center_similarity(&sinkhorn_bistochastic(&h, 10).unwrap()).unwrap();
            for i in 0..r {
                prop_assert_eq!(s.values()[i * r + i], 1.0);
                for j in 0..r {
                    prop_assert!((s.values()[i * r + j] - s.values()[j * r + i]).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn assignment_is_argmax(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_positive(&mut rng, 4, 7);
            let cm = ConfidenceMatrix { values: h, centers: vec![vec![0.0]; 4] };
            let labels = vec![0, 1, 0, 2];
            let r = merge_and_assign(&cm, &labels, 0.3).unwrap();
            for p in 0..7 {
                let merged: Vec<f64> = (0..3).map(|l| {
                    let members: Vec<usize> = (0..4).filter(|&i| labels[i] == l).collect();
                    members.iter().map(|&i| cm.values.row(i)[p]).sum::<f64>() / members.len() as f64
                }).collect();
                let best = merged.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(r.confidence[p], best);
                if r.assignment[p] != NOISE {
                    prop_assert_eq!(merged[r.assignment[p] as usize], best);
                }
            }
        }
    }
}
