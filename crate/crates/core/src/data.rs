//! Datasets, side-information and assignment files, model files, and
//! synthetic generators.
//!
//! Dataset CSV has a header naming feature columns `f<anything>` and label
//! columns `label:<task>`. Floats are written in shortest round-trip form so a
//! write then read reproduces every value exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::kernels::{KernelModel, KernelVariant};
use crate::refiner::{ClusterResult, NOISE};
use crate::training::PairwiseConstraints;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `|X| x N`
    pub features: Tensor,
    /// Ground-truth labelings keyed by task name.
    pub labels: BTreeMap<String, Vec<i64>>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: BTreeMap<String, Vec<i64>>) -> Result<Self> {
        for l in labels.values() {
            if l.len() != features.rows() {
                return Err(Error::Dimension {
                    expected: features.rows(),
                    got: l.len(),
                });
            }
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn label(&self, task: &str) -> Result<&[i64]> {
        self.labels.get(task).map(Vec::as_slice).ok_or_else(|| {
            let known: Vec<&str> = self.labels.keys().map(String::as_str).collect();
            Error::InvalidParameter(format!("no label column {task:?} (have {known:?})"))
        })
    }

    /// Rows `indices`, labels included.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.gather_rows(indices),
            labels: self
                .labels
                .iter()
                .map(|(k, v)| (k.clone(), indices.iter().map(|&i| v[i]).collect()))
                .collect(),
        }
    }
}

fn parse_error(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        msg: msg.into(),
    }
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map_or(0, |p| p.line());
    parse_error(path, line, err.to_string())
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input)
}

/// Parses dataset CSV from any reader; `source` names it in errors.
pub fn read_dataset<R: Read>(input: R, source: &Path) -> Result<Dataset> {
    let mut rdr = reader(input);
    let headers = rdr.headers().map_err(|e| csv_error(source, e))?.clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(parse_error(source, 1, "empty file"));
    }
    let mut feature_cols = Vec::new();
    let mut label_cols = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if let Some(task) = h.strip_prefix("label:") {
            if task.is_empty() {
                return Err(parse_error(source, 1, "label column without a task name"));
            }
            label_cols.push((i, task.to_string()));
        } else if h.starts_with('f') {
            feature_cols.push(i);
        } else {
            return Err(parse_error(source, 1, format!("column {h:?} is neither f* nor label:*")));
        }
    }
    if feature_cols.is_empty() {
        return Err(parse_error(source, 1, "no feature columns"));
    }
    let mut values = Vec::new();
    let mut labels = vec![Vec::new(); label_cols.len()];
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(source, e))?;
        let line = record.position().map_or(0, |p| p.line());
        for &c in &feature_cols {
            let v: f64 = record[c]
                .parse()
                .map_err(|_| parse_error(source, line, format!("feature {:?} is not a number", &record[c])))?;
            if !v.is_finite() {
                return Err(parse_error(source, line, "non-finite feature"));
            }
            values.push(v);
        }
        for (slot, (c, _)) in label_cols.iter().enumerate() {
            let v: i64 = record[*c]
                .parse()
                .map_err(|_| parse_error(source, line, format!("label {:?} is not an integer", &record[*c])))?;
            labels[slot].push(v);
        }
    }
    let rows = values.len() / feature_cols.len();
    if rows == 0 {
        return Err(parse_error(source, 2, "no data rows"));
    }
    let features = Tensor::matrix(rows, feature_cols.len(), values)?;
    let labels = label_cols.into_iter().map(|(_, t)| t).zip(labels).collect();
    Dataset::new(features, labels)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(std::fs::File::open(path)?, path)
}

pub fn dataset_to_csv(data: &Dataset) -> String {
    let mut out = String::new();
    let mut header: Vec<String> = (0..data.dim()).map(|i| format!("f{i}")).collect();
    header.extend(data.labels.keys().map(|k| format!("label:{k}")));
    out.push_str(&header.join(","));
    out.push('\n');
    for (r, row) in data.features.iter_rows().enumerate() {
        let mut fields: Vec<String> = row.iter().map(f64::to_string).collect();
        fields.extend(data.labels.values().map(|l| l[r].to_string()));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Side-information CSV `i,j,label`, label 1 for similar and 0 for dissimilar.
pub fn read_side_info<R: Read>(input: R, source: &Path) -> Result<PairwiseConstraints> {
    let mut rdr = reader(input);
    let headers = rdr.headers().map_err(|e| csv_error(source, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["i", "j", "label"] {
        return Err(parse_error(source, 1, "expected header i,j,label"));
    }
    let mut out = PairwiseConstraints::default();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(source, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |k: usize| -> Result<usize> {
            record[k]
                .parse()
                .map_err(|_| parse_error(source, line, format!("{:?} is not an index", &record[k])))
        };
        let pair = (field(0)?, field(1)?);
        match &record[2] {
            "1" => out.must_link.push(pair),
            "0" => out.cannot_link.push(pair),
            other => return Err(parse_error(source, line, format!("label {other:?} is not 0 or 1"))),
        }
    }
    Ok(out)
}

pub fn load_side_info(path: &Path) -> Result<PairwiseConstraints> {
    read_side_info(std::fs::File::open(path)?, path)
}

pub fn side_info_to_csv(constraints: &PairwiseConstraints) -> String {
    let mut out = String::from("i,j,label\n");
    for (i, j) in &constraints.must_link {
        let _ = writeln!(out, "{i},{j},1");
    }
    for (i, j) in &constraints.cannot_link {
        let _ = writeln!(out, "{i},{j},0");
    }
    out
}

/// Assignment CSV `index,cluster,confidence`, noise as `-1`.
pub fn assignment_to_csv(result: &ClusterResult) -> String {
    let mut out = String::from("index,cluster,confidence\n");
    for (i, (c, p)) in result.assignment.iter().zip(&result.confidence).enumerate() {
        let _ = writeln!(out, "{i},{c},{p}");
    }
    out
}

pub fn labels_to_assignment_csv(labels: &[i64]) -> String {
    let mut out = String::from("index,cluster,confidence\n");
    for (i, c) in labels.iter().enumerate() {
        let _ = writeln!(out, "{i},{c},1");
    }
    out
}

/// Cluster labels from an assignment file, ordered by index.
pub fn read_assignment<R: Read>(input: R, source: &Path) -> Result<Vec<i64>> {
    let mut rdr = reader(input);
    let headers = rdr.headers().map_err(|e| csv_error(source, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["index", "cluster", "confidence"] {
        return Err(parse_error(source, 1, "expected header index,cluster,confidence"));
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(source, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let index: usize = record[0]
            .parse()
            .map_err(|_| parse_error(source, line, "bad index"))?;
        let cluster: i64 = record[1]
            .parse()
            .map_err(|_| parse_error(source, line, "bad cluster"))?;
        if cluster < NOISE {
            return Err(parse_error(source, line, "cluster below -1"));
        }
        rows.push((index, cluster, line));
    }
    rows.sort_by_key(|r| r.0);
    for (expect, &(index, _, line)) in rows.iter().enumerate() {
        if index != expect {
            return Err(parse_error(source, line, format!("indices must cover 0..n, missing {expect}")));
        }
    }
    Ok(rows.into_iter().map(|r| r.1).collect())
}

pub fn load_assignment(path: &Path) -> Result<Vec<i64>> {
    read_assignment(std::fs::File::open(path)?, path)
}

const MODEL_MAGIC: &str = "dms-model";
const MODEL_VERSION: &str = "v1";

/// Text form: a header line, then one `name shape values...` line per tensor.
pub fn model_to_string(model: &KernelModel) -> String {
    let mut out = format!("{MODEL_MAGIC} {MODEL_VERSION} {} {}\n", model.variant(), model.input_dim());
    for (name, t) in model.named_parameters() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = write!(out, "{name} {}", shape.join("x"));
        for v in t.values() {
            let _ = write!(out, " {v:.16e}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_model(text: &str, source: &Path) -> Result<KernelModel> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    let (variant, dim) = match header.as_slice() {
        [MODEL_MAGIC, MODEL_VERSION, variant, dim] => {
            let variant: KernelVariant = variant
                .parse()
                .map_err(|_| parse_error(source, 1, format!("unknown variant {variant:?}")))?;
            let dim: usize = dim.parse().map_err(|_| parse_error(source, 1, "bad input dimension"))?;
            (variant, dim)
        }
        [MODEL_MAGIC, version, ..] => {
            return Err(parse_error(source, 1, format!("unsupported model version {version}")))
        }
        _ => return Err(parse_error(source, 1, "not a model file")),
    };
    let mut params = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i as u64 + 2;
        let mut parts = line.split_whitespace();
        let Some(name) = parts.next() else { continue };
        let shape: Vec<usize> = parts
            .next()
            .ok_or_else(|| parse_error(source, line_no, "missing shape"))?
            .split('x')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_error(source, line_no, "bad shape"))?;
        let values: Vec<f64> = parts
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_error(source, line_no, "bad value"))?;
        let tensor = Tensor::new(shape, values).map_err(|e| parse_error(source, line_no, e.to_string()))?;
        params.push((name.to_string(), tensor));
    }
    KernelModel::from_named_parameters(variant, dim, params).map_err(|e| parse_error(source, 0, e.to_string()))
}

pub fn save_model(model: &KernelModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_string(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<KernelModel> {
    parse_model(&std::fs::read_to_string(path)?, path)
}

/// Zero mean and unit population variance per feature; constant features
/// become 0.
pub fn standardize(features: &Tensor) -> Tensor {
    let (rows, cols) = (features.rows(), features.cols());
    let n = rows as f64;
    let mut mean = vec![0.0; cols];
    for row in features.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; cols];
    for row in features.iter_rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let values = features
        .iter_rows()
        .flat_map(|row| {
            row.iter().zip(&mean).zip(&var).map(|((v, m), s)| {
                let sd = s.sqrt();
                if sd > 1e-300 {
                    (v - m) / sd
                } else {
                    0.0
                }
            })
        })
        .collect();
    Tensor::matrix(rows, cols, values).expect("same shape")
}

const PLACEMENT_ATTEMPTS: usize = 10_000;

/// `k` isotropic Gaussian blobs with centers at least `separation` apart.
/// Points are ordered by blob; labels go under `"intrinsic"`.
pub fn synth_blobs(
    k: usize,
    n_per: usize,
    dim: usize,
    spread: f64,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if k == 0 || dim == 0 || n_per == 0 {
        return Err(Error::InvalidParameter("blobs need k, n_per and dim >= 1".into()));
    }
    if !(spread >= 0.0 && separation >= 0.0) {
        return Err(Error::InvalidParameter("spread and separation must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Centers from a box wide enough to hold k well-separated points.
    let side = separation * (k as f64).powf(1.0 / dim as f64);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut attempts = 0;
    while centers.len() < k {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS {
            return Err(Error::Placement {
                k,
                separation,
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
        let c: Vec<f64> = (0..dim).map(|_| rand::Rng::random_range(&mut rng, -side / 2.0..=side / 2.0)).collect();
        if centers
            .iter()
            .all(|o| crate::kernels::squared_distance(o, &c).sqrt() >= separation)
        {
            centers.push(c);
        }
    }
    let noise = Normal::new(0.0, spread).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut values = Vec::with_capacity(k * n_per * dim);
    let mut labels = Vec::with_capacity(k * n_per);
    for (l, c) in centers.iter().enumerate() {
        for _ in 0..n_per {
            values.extend(c.iter().map(|m| m + noise.sample(&mut rng)));
            labels.push(l as i64);
        }
    }
    let features = Tensor::matrix(k * n_per, dim, values)?;
    Dataset::new(features, BTreeMap::from([("intrinsic".to_string(), labels)]))
}

/// Offsets of the two-level `taskA` layout: parent sign over dims 0..4,
/// child sign over dims 4..8.
const PARENT_OFFSET: f64 = 3.0;
const CHILD_OFFSET: f64 = 1.5;
/// Radius of the `taskB` triangle, replicated over dims 8..12 and 12..16.
const TASK_B_RADIUS: f64 = 2.0;
const MULTITASK_NOISE: f64 = 0.5;
const MULTITASK_PER_COMBINATION: usize = 100;

/// 1200 points in 16 dimensions carrying two independent partitions: `taskA`
/// (4 classes, dims 0..8) and `taskB` (3 classes, dims 8..16), plus `parent`
/// which pairs taskA classes `{0,1}` and `{2,3}`.
pub fn synth_multitask(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, MULTITASK_NOISE).expect("valid std");
    let mut combos: Vec<(i64, i64)> = (0..4)
        .flat_map(|a| (0..3).map(move |b| (a, b)))
        .flat_map(|ab| std::iter::repeat_n(ab, MULTITASK_PER_COMBINATION))
        .collect();
    combos.shuffle(&mut rng);
    let mut values = Vec::with_capacity(combos.len() * 16);
    for &(a, b) in &combos {
        let parent = if a / 2 == 0 { -1.0 } else { 1.0 };
        let child = if a % 2 == 0 { -1.0 } else { 1.0 };
        let theta = 2.0 * std::f64::consts::PI * b as f64 / 3.0;
        let center = (0..16).map(|d| match d {
            0..4 => parent * PARENT_OFFSET,
            4..8 => child * CHILD_OFFSET,
            8..12 => TASK_B_RADIUS * theta.cos(),
            _ => TASK_B_RADIUS * theta.sin(),
        });
        values.extend(center.map(|m| m + noise.sample(&mut rng)));
    }
    let features = Tensor::matrix(combos.len(), 16, values).expect("shape");
    let labels = BTreeMap::from([
        ("taskA".to_string(), combos.iter().map(|c| c.0).collect()),
        ("taskB".to_string(), combos.iter().map(|c| c.1).collect()),
        ("parent".to_string(), combos.iter().map(|c| c.0 / 2).collect()),
    ]);
    Dataset::new(features, labels).expect("consistent lengths")
}

/// Path with `suffix` appended to the file name.
pub fn sibling_path(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}
