//! Command-line front end: synthesize data, simulate side information,
//! train kernels, cluster, evaluate, run baselines, check gradients and sweep
//! ablations.
//!
//! Every artifact is written atomically next to a `<file>.manifest` holding
//! the resolved arguments, so a run can be repeated exactly.

mod config;
mod io;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dms_core::data::{self, Dataset};
use dms_core::kmeans::{kmeans, KMeansConfig};
use dms_core::meanshift::{classical_mean_shift, ClassicalShiftConfig, ShiftConfig};
use dms_core::metrics::{evaluate, Scores};
use dms_core::refiner::{cluster, ClusterConfig};
use dms_core::training::{self, derive_pseudo_classes, make_side_info, SideInfoGraph};
use dms_core::{ClassicalKernel, KernelModel, KernelVariant, Supervision};

pub use config::TrainSettings;
pub use io::{write_atomic, Manifest};

#[derive(Parser, Debug)]
#[command(name = "dms", version, about = "Mean shift clustering with a learned kernel")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Simulate pairwise side information from a label column.
    Sideinfo(SideInfoArgs),
    /// Train a kernel from a dataset and side information.
    Train(TrainArgs),
    /// Cluster a dataset with a trained kernel.
    Cluster(ClusterArgs),
    /// Score an assignment against a label column.
    Eval(EvalArgs),
    /// Cluster with k-means++ or classical mean shift.
    Baseline(BaselineArgs),
    /// Finite-difference check of the training loss gradients.
    Gradcheck(GradcheckArgs),
    /// Sweep training iterations, kernel depth or side-information limits.
    Ablate(AblateArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Blobs,
    Multitask,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "blobs")]
    pub kind: SynthKind,
    /// Number of blobs.
    #[arg(long, default_value_t = 5)]
    pub blobs: usize,
    #[arg(long, default_value_t = 200)]
    pub per_blob: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Per-dimension standard deviation of each blob.
    #[arg(long, default_value_t = 1.0)]
    pub spread: f64,
    /// Minimum distance between blob centers.
    #[arg(long, default_value_t = 20.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SideInfoArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Label column the pairs are derived from.
    #[arg(long, default_value = "intrinsic")]
    pub task: String,
    #[arg(long, default_value_t = 0.05)]
    pub fraction: f64,
    /// Only sample points from this many randomly chosen classes.
    #[arg(long)]
    pub class_limit: Option<usize>,
    /// At most this many points per class.
    #[arg(long)]
    pub per_class_limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training options; each overrides the config file, which overrides defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainOptions {
    /// `key = value` file with training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<KernelVariant>,
    /// Fully connected layers in the kernel.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
    #[arg(long)]
    pub train_iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub final_learning_rate: Option<f64>,
    /// Loss on the `final` kernel pass only, or on `every` pass.
    #[arg(long)]
    pub supervision: Option<Supervision>,
    /// Flip random coordinates of each training instance (`true` or `false`).
    #[arg(long)]
    pub reflect: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub side_info: PathBuf,
    #[command(flatten)]
    pub options: TrainOptions,
    /// Print the loss after every epoch to stderr.
    #[arg(long)]
    pub verbose: bool,
    /// Model file; the loss history goes to `<out>.loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Inference options shared by `cluster` and `ablate`.
#[derive(Args, Debug, Clone)]
pub struct InferenceOptions {
    /// Random starting points for center finding.
    #[arg(long, default_value_t = 500)]
    pub init_count: usize,
    /// Confidence separating inliers from outliers.
    #[arg(long, default_value_t = 0.5)]
    pub inlier_threshold: f64,
    /// Cut on normalized center similarity when merging.
    #[arg(long, default_value_t = 0.5)]
    pub similarity_threshold: f64,
    #[arg(long, default_value_t = 50)]
    pub max_iterations: usize,
}

impl InferenceOptions {
    fn config(&self, train_iterations: usize) -> ClusterConfig {
        ClusterConfig {
            init_count: self.init_count,
            shift: ShiftConfig {
                inlier_threshold: self.inlier_threshold,
                max_iterations: self.max_iterations,
                train_iterations,
            },
            similarity_threshold: self.similarity_threshold,
            ..ClusterConfig::default()
        }
    }

    fn record(&self, m: &mut Manifest) {
        m.push("init_count", self.init_count);
        m.push("inlier_threshold", self.inlier_threshold);
        m.push("similarity_threshold", self.similarity_threshold);
        m.push("max_iterations", self.max_iterations);
    }
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub inference: InferenceOptions,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub assignment: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "intrinsic")]
    pub task: String,
    /// Score only points absent from this side-information file.
    #[arg(long)]
    pub exclude: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineMethod {
    Kmeans,
    Meanshift,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassicalKind {
    Flat,
    Gaussian,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub method: BaselineMethod,
    #[arg(long)]
    pub data: PathBuf,
    /// Clusters for k-means.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum, default_value = "flat")]
    pub kernel: ClassicalKind,
    /// Flat-kernel radius or Gaussian sigma.
    #[arg(long, default_value_t = 1.0)]
    pub bandwidth: f64,
    /// Mean shift stops once the mean moves less than this.
    #[arg(long, default_value_t = 1e-3)]
    pub tau: f64,
    /// Converged means closer than this are merged; defaults to the bandwidth.
    #[arg(long)]
    pub merge_radius: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Points per checked instance.
    #[arg(long, default_value_t = 24)]
    pub points: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    /// Unrolled training iterations.
    Iterations,
    /// Fully connected layers in the kernel.
    Layers,
    /// Number of classes side information is drawn from.
    Classes,
    /// Maximum side-information points per class.
    Points,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub sweep: Sweep,
    /// Values to sweep; defaults depend on the sweep.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<usize>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "intrinsic")]
    pub task: String,
    #[arg(long, default_value_t = 0.05)]
    pub fraction: f64,
    #[command(flatten)]
    pub options: TrainOptions,
    #[command(flatten)]
    pub inference: InferenceOptions,
    /// Metrics table.
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs one command line (including the program name) and returns the exit
/// code. Reports go to `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> Result<i32>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    execute(cli.command, stdout)
}

pub fn execute(command: Command, stdout: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Synth(a) => synth(&a),
        Command::Sideinfo(a) => sideinfo(&a),
        Command::Train(a) => train(&a),
        Command::Cluster(a) => cluster_cmd(&a),
        Command::Eval(a) => eval(&a, stdout),
        Command::Baseline(a) => baseline(&a),
        Command::Gradcheck(a) => gradcheck(&a, stdout),
        Command::Ablate(a) => ablate(&a, stdout),
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    data::load_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_graph(path: &Path) -> Result<SideInfoGraph> {
    let pairs = data::load_side_info(path).with_context(|| format!("reading side information {}", path.display()))?;
    Ok(derive_pseudo_classes(&pairs)?)
}

fn synth(a: &SynthArgs) -> Result<i32> {
    let d = match a.kind {
        SynthKind::Blobs => data::synth_blobs(a.blobs, a.per_blob, a.dim, a.spread, a.separation, a.seed)?,
        SynthKind::Multitask => data::synth_multitask(a.seed),
    };
    let mut m = Manifest::new("synth");
    m.push("kind", format!("{:?}", a.kind).to_lowercase());
    if a.kind == SynthKind::Blobs {
        m.push("blobs", a.blobs);
        m.push("per_blob", a.per_blob);
        m.push("dim", a.dim);
        m.push("spread", a.spread);
        m.push("separation", a.separation);
    }
    m.push("seed", a.seed);
    m.push("out", a.out.display());
    write_atomic(&a.out, data::dataset_to_csv(&d))?;
    m.write_for(&a.out)?;
    Ok(0)
}

fn sideinfo(a: &SideInfoArgs) -> Result<i32> {
    let d = load_dataset(&a.data)?;
    let g = make_side_info(d.label(&a.task)?, a.fraction, a.class_limit, a.per_class_limit, a.seed)?;
    let mut m = Manifest::new("sideinfo");
    m.push("data", a.data.display());
    m.push("task", &a.task);
    m.push("fraction", a.fraction);
    m.push_opt("class_limit", a.class_limit);
    m.push_opt("per_class_limit", a.per_class_limit);
    m.push("seed", a.seed);
    m.push("labelled_points", g.labelled_count());
    m.push("out", a.out.display());
    write_atomic(&a.out, data::side_info_to_csv(&g.to_constraints()))?;
    m.write_for(&a.out)?;
    Ok(0)
}

fn train(a: &TrainArgs) -> Result<i32> {
    let settings = TrainSettings::resolve(&a.options)?;
    let d = load_dataset(&a.data)?;
    let g = load_graph(&a.side_info)?;
    let model = settings.initial_model(d.dim())?;
    let outcome = training::train_with_progress(&model, &d.features, &g, &settings.train, |e, l| {
        if a.verbose {
            eprintln!("epoch {e} loss {l:.6}");
        }
    })?;
    let mut loss = String::from("epoch,loss\n");
    for (e, l) in outcome.loss_history.iter().enumerate() {
        loss.push_str(&format!("{e},{l}\n"));
    }
    let loss_path = data::sibling_path(&a.out, ".loss.csv");
    let mut m = Manifest::new("train");
    m.push("data", a.data.display());
    m.push("side_info", a.side_info.display());
    settings.record(&mut m);
    m.push("out", a.out.display());
    m.push("loss_history", loss_path.display());
    write_atomic(&a.out, data::model_to_string(&outcome.model))?;
    write_atomic(&loss_path, loss)?;
    m.write_for(&a.out)?;
    Ok(0)
}

fn cluster_cmd(a: &ClusterArgs) -> Result<i32> {
    let model = data::load_model(&a.model).with_context(|| format!("reading model {}", a.model.display()))?;
    let d = load_dataset(&a.data)?;
    let result = cluster(&d.features, &model, &a.inference.config(4), a.seed)?;
    let mut m = Manifest::new("cluster");
    m.push("model", a.model.display());
    m.push("data", a.data.display());
    a.inference.record(&mut m);
    m.push("seed", a.seed);
    m.push("clusters", result.cluster_count());
    m.push("noise_points", result.noise_count());
    m.push("non_converged_runs", result.non_converged);
    m.push("out", a.out.display());
    if result.non_converged > 0 {
        eprintln!(
            "warning: {} of {} center searches hit the iteration cap",
            result.non_converged, a.inference.init_count
        );
    }
    write_atomic(&a.out, data::assignment_to_csv(&result))?;
    m.write_for(&a.out)?;
    Ok(0)
}

/// Indices not mentioned in the side information.
pub fn held_out(n: usize, graph: &SideInfoGraph) -> Vec<usize> {
    (0..n).filter(|&i| graph.class_of(i).is_none()).collect()
}

/// Scores on `indices` only.
pub fn scores_on(pred: &[i64], truth: &[i64], indices: &[usize]) -> Result<Scores> {
    let p: Vec<i64> = indices.iter().map(|&i| pred[i]).collect();
    let t: Vec<i64> = indices.iter().map(|&i| truth[i]).collect();
    Ok(evaluate(&p, &t)?)
}

fn eval(a: &EvalArgs, stdout: &mut dyn Write) -> Result<i32> {
    let pred = data::load_assignment(&a.assignment)
        .with_context(|| format!("reading assignment {}", a.assignment.display()))?;
    let d = load_dataset(&a.data)?;
    let truth = d.label(&a.task)?;
    if pred.len() != truth.len() {
        bail!("assignment has {} points, dataset has {}", pred.len(), truth.len());
    }
    let indices = match &a.exclude {
        Some(p) => held_out(truth.len(), &load_graph(p)?),
        None => (0..truth.len()).collect(),
    };
    let report = format!("{}\n", scores_on(&pred, truth, &indices)?);
    if let Some(out) = &a.out {
        let mut m = Manifest::new("eval");
        m.push("assignment", a.assignment.display());
        m.push("data", a.data.display());
        m.push("task", &a.task);
        m.push_opt("exclude", a.exclude.as_ref().map(|p| p.display()));
        m.push("points", indices.len());
        m.push("out", out.display());
        write_atomic(out, &report)?;
        m.write_for(out)?;
    }
    stdout.write_all(report.as_bytes())?;
    Ok(0)
}

fn baseline(a: &BaselineArgs) -> Result<i32> {
    let d = load_dataset(&a.data)?;
    let mut m = Manifest::new("baseline");
    m.push("method", format!("{:?}", a.method).to_lowercase());
    m.push("data", a.data.display());
    let labels: Vec<i64> = match a.method {
        BaselineMethod::Kmeans => {
            let k = a.k.context("--k is required for k-means")?;
            let r = kmeans(&d.features, &KMeansConfig::new(k, a.seed))?;
            m.push("k", k);
            m.push("inertia", r.inertia);
            r.assignment
        }
        BaselineMethod::Meanshift => {
            let kernel = match a.kernel {
                ClassicalKind::Flat => ClassicalKernel::flat(a.bandwidth)?,
                ClassicalKind::Gaussian => ClassicalKernel::gaussian(a.bandwidth)?,
            };
            let merge = a.merge_radius.unwrap_or(a.bandwidth);
            let cfg = ClassicalShiftConfig::new(kernel, a.tau)?.with_merge_radius(merge);
            let inits: Vec<Vec<f64>> = d.features.iter_rows().map(<[f64]>::to_vec).collect();
            let r = classical_mean_shift(&d.features, &cfg, &inits)?;
            m.push("kernel", format!("{:?}", a.kernel).to_lowercase());
            m.push("bandwidth", a.bandwidth);
            m.push("tau", a.tau);
            m.push("merge_radius", merge);
            m.push("clusters", r.centers.len());
            r.assignment.iter().map(|&c| c as i64).collect()
        }
    };
    m.push("seed", a.seed);
    m.push("out", a.out.display());
    write_atomic(&a.out, data::labels_to_assignment_csv(&labels))?;
    m.write_for(&a.out)?;
    Ok(0)
}

/// Variants and input dimensions covered by `gradcheck`.
pub const GRADCHECK_CASES: [(KernelVariant, usize); 4] = [
    (KernelVariant::Subtract, 4),
    (KernelVariant::Subtract, 16),
    (KernelVariant::Concat, 4),
    (KernelVariant::Concat, 16),
];

fn gradcheck(a: &GradcheckArgs, stdout: &mut dyn Write) -> Result<i32> {
    let mut ok = true;
    for (variant, dim) in GRADCHECK_CASES {
        let r = training::check_instance_gradients(variant, dim, a.points, 4, Supervision::default(), a.seed, a.step)?;
        let pass = r.max_rel_error < a.tolerance;
        ok &= pass;
        writeln!(
            stdout,
            "{variant} N={dim} M={} max_rel_error={:.3e} checked={} skipped={} {}",
            a.points,
            r.max_rel_error,
            r.checked,
            r.skipped,
            if pass { "PASS" } else { "FAIL" }
        )?;
    }
    Ok(if ok { 0 } else { 1 })
}

fn ablate(a: &AblateArgs, stdout: &mut dyn Write) -> Result<i32> {
    let base = TrainSettings::resolve(&a.options)?;
    let d = load_dataset(&a.data)?;
    let truth = d.label(&a.task)?;
    let class_count = truth.iter().collect::<BTreeSet<_>>().len();
    let values = if !a.values.is_empty() {
        a.values.clone()
    } else {
        match a.sweep {
            Sweep::Iterations => vec![2, 4, 6, 8],
            Sweep::Layers => vec![1, 2, 3, 4],
            Sweep::Classes => (2..=class_count).collect(),
            Sweep::Points => vec![1, 2, 5, 10],
        }
    };
    let name = format!("{:?}", a.sweep).to_lowercase();
    let mut table = format!("{name} clusters noise ACC NMI AMI\n");
    for &v in &values {
        let mut settings = base.clone();
        let (mut class_limit, mut per_class_limit) = (None, None);
        match a.sweep {
            Sweep::Iterations => settings.train.train_iterations = v,
            Sweep::Layers => settings.layers = v,
            Sweep::Classes => class_limit = Some(v),
            Sweep::Points => per_class_limit = Some(v),
        }
        let g = make_side_info(truth, a.fraction, class_limit, per_class_limit, settings.train.seed)?;
        let model = settings.initial_model(d.dim())?;
        let trained = training::train(&model, &d.features, &g, &settings.train)?.model;
        let cfg = a.inference.config(settings.train.train_iterations);
        let result = cluster(&d.features, &trained, &cfg, settings.train.seed)?;
        let scores = scores_on(&result.assignment, truth, &held_out(d.len(), &g))?;
        let line = format!(
            "{v} {} {} {:.6} {:.6} {:.6}\n",
            result.cluster_count(),
            result.noise_count(),
            scores.acc,
            scores.nmi,
            scores.ami
        );
        stdout.write_all(line.as_bytes())?;
        table.push_str(&line);
    }
    let mut m = Manifest::new("ablate");
    m.push("sweep", &name);
    m.push(
        "values",
        values.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
    );
    m.push("data", a.data.display());
    m.push("task", &a.task);
    m.push("fraction", a.fraction);
    base.record(&mut m);
    a.inference.record(&mut m);
    m.push("out", a.out.display());
    write_atomic(&a.out, &table)?;
    m.write_for(&a.out)?;
    Ok(0)
}

/// Model built from settings for a dataset of `dim` features.
impl TrainSettings {
    pub fn initial_model(&self, dim: usize) -> Result<KernelModel> {
        Ok(KernelModel::with_depth(dim, self.variant, self.layers, self.train.seed)?)
    }
}
