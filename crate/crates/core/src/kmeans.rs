//! Lloyd's k-means with k-means++ seeding, used as a reference baseline.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::kernels::squared_distance;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iterations: usize,
    /// Independent seedings; the lowest-inertia run wins.
    pub restarts: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iterations: 300,
            restarts: 10,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<i64>,
    /// Sum of squared distances to assigned centers.
    pub inertia: f64,
    pub iterations: usize,
}

fn nearest(centers: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    centers
        .iter()
        .map(|c| squared_distance(c, p))
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, d)| if d < best.1 { (i, d) } else { best })
}

fn plus_plus<R: Rng>(points: &Tensor, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.rows();
    let mut centers = vec![points.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = points.iter_rows().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // every point already coincides with a center
            Err(_) => rng.random_range(0..n),
        };
        let c = points.row(next).to_vec();
        for (d, p) in d2.iter_mut().zip(points.iter_rows()) {
            *d = d.min(squared_distance(p, &c));
        }
        centers.push(c);
    }
    centers
}

fn lloyd(points: &Tensor, mut centers: Vec<Vec<f64>>, max_iterations: usize) -> KMeansResult {
    let (n, dim, k) = (points.rows(), points.cols(), centers.len());
    let mut assignment = vec![usize::MAX; n];
    let mut iterations = 0;
    for _ in 0..max_iterations {
        iterations += 1;
        let mut changed = false;
        for (a, p) in assignment.iter_mut().zip(points.iter_rows()) {
            let (c, _) = nearest(&centers, p);
            changed |= *a != c;
            *a = c;
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignment.iter().zip(points.iter_rows()) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            // empty clusters keep their previous center
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = assignment
        .iter()
        .zip(points.iter_rows())
        .map(|(&a, p)| squared_distance(&centers[a], p))
        .sum();
    KMeansResult {
        centers,
        assignment: assignment.into_iter().map(|a| a as i64).collect(),
        inertia,
        iterations,
    }
}

pub fn kmeans(points: &Tensor, cfg: &KMeansConfig) -> Result<KMeansResult> {
    if cfg.k == 0 || cfg.k > points.rows() {
        return Err(Error::InvalidParameter(format!(
            "k must lie in 1..={}, got {}",
            points.rows(),
            cfg.k
        )));
    }
    if cfg.restarts == 0 || cfg.max_iterations == 0 {
        return Err(Error::InvalidParameter("restarts and max_iterations must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.restarts {
        let run = lloyd(points, plus_plus(points, cfg.k, &mut rng), cfg.max_iterations);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::metrics::accuracy;

    #[test]
    fn separable_blobs() {
        let d = synth_blobs(5, 60, 16, 1.0, 10.0, 2).unwrap();
        let r = kmeans(&d.features, &KMeansConfig::new(5, 0)).unwrap();
        assert!(accuracy(&r.assignment, d.label("intrinsic").unwrap()).unwrap() > 0.99);
    }

    #[test]
    fn one_dimensional_pairs() {
        let x = Tensor::matrix(4, 1, vec![0.0, 1.0, 10.0, 11.0]).unwrap();
        let r = kmeans(&x, &KMeansConfig::new(2, 3)).unwrap();
        assert_eq!(r.assignment[0], r.assignment[1]);
        assert_ne!(r.assignment[1], r.assignment[2]);
        assert!((r.inertia - 1.0).abs() < 1e-12);
        assert!(kmeans(&x, &KMeansConfig::new(5, 0)).is_err());
    }

    #[test]
    fn duplicate_points_do_not_break_seeding() {
        let x = Tensor::matrix(3, 1, vec![2.0, 2.0, 2.0]).unwrap();
        let r = kmeans(&x, &KMeansConfig::new(2, 0)).unwrap();
        assert_eq!(r.inertia, 0.0);
    }
}
