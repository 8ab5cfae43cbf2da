//! Training settings resolved from defaults, an optional `key = value` file
//! and command-line flags, in increasing priority.

use std::path::Path;

use anyhow::{bail, Context, Result};

use dms_core::kernels::DEFAULT_FC_LAYERS;
use dms_core::{KernelVariant, TrainConfig};

use crate::io::Manifest;
use crate::TrainOptions;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub variant: KernelVariant,
    pub layers: usize,
    pub train: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            variant: KernelVariant::Subtract,
            layers: DEFAULT_FC_LAYERS,
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("invalid value `{value}` for `{key}`: {e}"))
}

impl TrainSettings {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "variant" => self.variant = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "batches_per_epoch" => t.batches_per_epoch = parse(key, value)?,
            "train_iterations" => t.train_iterations = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "final_learning_rate" => t.final_learning_rate = parse(key, value)?,
            "supervision" => t.supervision = parse(key, value)?,
            "reflect" => t.reflect = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "instance_min" => t.instance_size.0 = parse(key, value)?,
            "instance_max" => t.instance_size.1 = parse(key, value)?,
            "labelled_ratio_min" => t.labelled_ratio.0 = parse(key, value)?,
            "labelled_ratio_max" => t.labelled_ratio.1 = parse(key, value)?,
            "positive_ratio_min" => t.positive_ratio.0 = parse(key, value)?,
            "positive_ratio_max" => t.positive_ratio.1 = parse(key, value)?,
            other => bail!("unknown training setting `{other}`"),
        }
        Ok(())
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("{}:{}: expected `key = value`", path.display(), n + 1))?;
            self.set(k.trim(), v.trim())
                .with_context(|| format!("{}:{}", path.display(), n + 1))?;
        }
        Ok(())
    }

    pub fn resolve(opts: &TrainOptions) -> Result<Self> {
        let mut s = Self::default();
        if let Some(p) = &opts.config {
            s.apply_file(p)?;
        }
        let t = &mut s.train;
        if let Some(v) = opts.variant {
            s.variant = v;
        }
        if let Some(v) = opts.layers {
            s.layers = v;
        }
        macro_rules! over {
            ($($f:ident),*) => { $(if let Some(v) = opts.$f { t.$f = v; })* };
        }
        over!(epochs, batch_size, batches_per_epoch, train_iterations, learning_rate, final_learning_rate, supervision, reflect, seed);
        s.train.validate()?;
        if s.layers == 0 {
            bail!("layers must be >= 1");
        }
        Ok(s)
    }

    pub fn record(&self, m: &mut Manifest) {
        let t = &self.train;
        m.push("variant", self.variant);
        m.push("layers", self.layers);
        m.push("epochs", t.epochs);
        m.push("batch_size", t.batch_size);
        m.push("batches_per_epoch", t.batches_per_epoch);
        m.push("train_iterations", t.train_iterations);
        m.push("learning_rate", t.learning_rate);
        m.push("final_learning_rate", t.final_learning_rate);
        m.push("supervision", t.supervision);
        m.push("reflect", t.reflect);
        m.push("instance_min", t.instance_size.0);
        m.push("instance_max", t.instance_size.1);
        m.push("labelled_ratio_min", t.labelled_ratio.0);
        m.push("labelled_ratio_max", t.labelled_ratio.1);
        m.push("positive_ratio_min", t.positive_ratio.0);
        m.push("positive_ratio_max", t.positive_ratio.1);
        m.push("seed", t.seed);
    }
}
