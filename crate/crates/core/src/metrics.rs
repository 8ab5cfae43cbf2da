//! External clustering indices: accuracy under the best one-to-one label
//! matching, normalized mutual information, and mutual information adjusted
//! for chance. Entropies use natural logs.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::refiner::NOISE;

/// Counts of co-occurring predicted and true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ContingencyTable {
    /// `counts[p][t]`
    pub counts: Vec<Vec<u64>>,
    /// Distinct predicted labels in ascending order, one per row.
    pub pred_labels: Vec<i64>,
    /// Distinct true labels in ascending order, one per column.
    pub true_labels: Vec<i64>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub total: u64,
}

fn index_labels(labels: &[i64]) -> (Vec<i64>, Vec<usize>) {
    let mut ids = BTreeMap::new();
    for &l in labels {
        ids.entry(l).or_insert(0);
    }
    for (i, v) in ids.values_mut().enumerate() {
        *v = i;
    }
    let idx = labels.iter().map(|l| ids[l]).collect();
    (ids.into_keys().collect(), idx)
}

impl ContingencyTable {
    pub fn new(pred: &[i64], truth: &[i64]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Dimension {
                expected: truth.len(),
                got: pred.len(),
            });
        }
        let (pred_labels, pi) = index_labels(pred);
        let (true_labels, ti) = index_labels(truth);
        let mut counts = vec![vec![0u64; true_labels.len()]; pred_labels.len()];
        for (&p, &t) in pi.iter().zip(&ti) {
            counts[p][t] += 1;
        }
        let row_sums = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums = (0..true_labels.len())
            .map(|t| counts.iter().map(|r| r[t]).sum())
            .collect();
        Ok(Self {
            counts,
            pred_labels,
            true_labels,
            row_sums,
            col_sums,
            total: pred.len() as u64,
        })
    }

    /// True when both labelings induce the same partition.
    pub fn is_bijective(&self) -> bool {
        self.pred_labels.len() == self.true_labels.len()
            && self
                .counts
                .iter()
                .all(|r| r.iter().filter(|&&c| c > 0).count() == 1)
    }

    pub fn mutual_information(&self) -> f64 {
        let n = self.total as f64;
        let mut mi = 0.0;
        for (p, row) in self.counts.iter().enumerate() {
            for (t, &c) in row.iter().enumerate() {
                if c > 0 {
                    let c = c as f64;
                    mi += c / n * (n * c / (self.row_sums[p] as f64 * self.col_sums[t] as f64)).ln();
                }
            }
        }
        mi.max(0.0)
    }

    pub fn pred_entropy(&self) -> f64 {
        entropy(&self.row_sums, self.total)
    }

    pub fn true_entropy(&self) -> f64 {
        entropy(&self.col_sums, self.total)
    }
}

fn entropy(counts: &[u64], total: u64) -> f64 {
    let n = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Minimum-cost assignment for a rectangular cost matrix, padded with zeros to
/// square. Returns the column chosen for each row, or `None` for rows matched
/// only to padding.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let at = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            cost[i][j]
        } else {
            0.0
        }
    };
    // 1-based potentials, column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![None; rows];
    for j in 1..=n {
        let i = matched[j];
        if i >= 1 && i <= rows && j <= cols {
            assignment[i - 1] = Some(j - 1);
        }
    }
    assignment
}

/// Fraction of points whose predicted cluster maps onto their true class under
/// the best one-to-one mapping. Points labelled [`NOISE`] are never correct.
pub fn accuracy(pred: &[i64], truth: &[i64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::InvalidParameter("accuracy of an empty labeling".into()));
    }
    let table = ContingencyTable::new(pred, truth)?;
    let rows: Vec<&Vec<u64>> = table
        .counts
        .iter()
        .zip(&table.pred_labels)
        .filter(|(_, &l)| l != NOISE)
        .map(|(r, _)| r)
        .collect();
    let cost: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&c| -(c as f64)).collect()).collect();
    let matched: u64 = hungarian(&cost)
        .iter()
        .zip(&rows)
        .filter_map(|(a, r)| a.map(|j| r[j]))
        .sum();
    Ok(matched as f64 / table.total as f64)
}

pub fn nmi(pred: &[i64], truth: &[i64]) -> Result<f64> {
    let table = ContingencyTable::new(pred, truth)?;
    let (hp, ht) = (table.pred_entropy(), table.true_entropy());
    if hp == 0.0 || ht == 0.0 {
        return Ok(if table.is_bijective() { 1.0 } else { 0.0 });
    }
    Ok((table.mutual_information() / (hp * ht).sqrt()).min(1.0))
}

/// `ln k!` for `k = 0..=n`.
fn ln_factorials(n: u64) -> Vec<f64> {
    let mut table = Vec::with_capacity(n as usize + 1);
    let mut acc = 0.0;
    table.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        table.push(acc);
    }
    table
}

/// Expected mutual information between two random labelings with the given
/// marginals, under the hypergeometric permutation model.
pub fn expected_mutual_information(row_sums: &[u64], col_sums: &[u64], total: u64) -> f64 {
    let lf = ln_factorials(total);
    let n = total as f64;
    let mut emi = 0.0;
    for &a in row_sums {
        for &b in col_sums {
            let lo = (a + b).saturating_sub(total).max(1);
            let hi = a.min(b);
            let fixed = lf[a as usize] + lf[b as usize] + lf[(total - a) as usize] + lf[(total - b) as usize]
                - lf[total as usize];
            for k in lo..=hi {
                let kf = k as f64;
                let term = kf / n * (n * kf / (a as f64 * b as f64)).ln();
                let ln_p = fixed
                    - lf[k as usize]
                    - lf[(a - k) as usize]
                    - lf[(b - k) as usize]
                    - lf[(total + k - a - b) as usize];
                emi += term * ln_p.exp();
            }
        }
    }
    emi
}

pub fn ami(pred: &[i64], truth: &[i64]) -> Result<f64> {
    let table = ContingencyTable::new(pred, truth)?;
    let emi = expected_mutual_information(&table.row_sums, &table.col_sums, table.total);
    let denom = (table.pred_entropy() * table.true_entropy()).sqrt() - emi;
    if denom.abs() <= f64::EPSILON {
        return Ok(if table.is_bijective() { 1.0 } else { 0.0 });
    }
    Ok((table.mutual_information() - emi) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub acc: f64,
    pub nmi: f64,
    pub ami: f64,
}

impl std::fmt::Display for Scores {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ACC={:.6} NMI={:.6} AMI={:.6}", self.acc, self.nmi, self.ami)
    }
}

pub fn evaluate(pred: &[i64], truth: &[i64]) -> Result<Scores> {
    Ok(Scores {
        acc: accuracy(pred, truth)?,
        nmi: nmi(pred, truth)?,
        ami: ami(pred, truth)?,
    })
}
