//! Flat `key = value` run configuration shared by the CLI commands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::activation::ActivationSpec;
use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::trainer::TrainConfig;

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Generate synthetic blobs in memory.
    Synth,
    /// A directory with a `manifest.txt` (as written by `fcrseg synth`).
    Manifest,
    /// A BBBC006 directory tree.
    Bbbc006,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub root: Option<PathBuf>,
    pub focal_plane: u32,
    /// Total synthetic images; split 80/20 into train and eval.
    pub synth_count: usize,
    pub synth_density: f64,
    pub synth_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synth,
            root: None,
            focal_plane: 16,
            synth_count: 250,
            synth_density: 0.3,
            synth_seed: 1,
        }
    }
}

/// Network, training and data settings for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig {
                source: DataSource::Bbbc006,
                ..DataConfig::default()
            },
            out_dir: PathBuf::from("runs/fcrseg"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

/// `epoch:alpha` pairs separated by commas, e.g. `0:2,80:2,160:4`.
pub fn parse_schedule(value: &str) -> Result<ActivationSpec> {
    let pairs = value
        .split(',')
        .map(|p| {
            let (e, a) = p
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("bad schedule entry `{p}`")))?;
            Ok((parse::<usize>("alpha_schedule", e)?, parse::<f64>("alpha_schedule", a)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ActivationSpec::new(pairs)
}

pub fn format_schedule(spec: &ActivationSpec) -> String {
    spec.schedule
        .iter()
        .map(|(e, a)| format!("{e}:{a}"))
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Synthetic benchmark preset: 128×128 blobs, 200/50 split, base 8 filters,
    /// depth 4, 60 epochs.
    pub fn desk() -> Self {
        RunConfig {
            net: NetConfig::desk(),
            train: TrainConfig::desk(),
            data: DataConfig::default(),
            out_dir: PathBuf::from("runs/desk"),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" | "default" => Ok(Self::default()),
            _ => Err(Error::Config(format!("unknown preset `{name}`"))),
        }
    }

    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "base_filters" => self.net.base_filters = parse(key, v)?,
            "depth" => self.net.depth = parse(key, v)?,
            "out_channels" => self.net.out_channels = parse(key, v)?,
            "height" => self.net.input_size.0 = parse(key, v)?,
            "width" => self.net.input_size.1 = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "lr_decay" => t.lr_decay = parse(key, v)?,
            "lr_decay_every" => t.lr_decay_every = parse(key, v)?,
            "alpha_schedule" => t.alpha_schedule = parse_schedule(v)?,
            "adjacency_radius" => t.adjacency_radius = parse(key, v)?,
            "include_background" => t.include_background = parse_bool(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "eval_every" => t.eval_every = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "adam_eps" => t.adam_eps = parse(key, v)?,
            "w_intra" => t.loss.w_intra = parse(key, v)?,
            "w_inter" => t.loss.w_inter = parse(key, v)?,
            "remap_inter" => t.loss.remap_inter = parse_bool(key, v)?,
            "post_activation" => t.loss.post_activation = parse_bool(key, v)?,
            "min_area" => t.postprocess.min_area = parse(key, v)?,
            "background_policy" => t.postprocess.policy = v.parse()?,
            "connectivity" => t.postprocess.connectivity = v.parse()?,
            "device" => t.device = v.to_string(),
            "parallelism" => t.parallelism = v.to_string(),
            "data_source" => {
                self.data.source = match v {
                    "synth" => DataSource::Synth,
                    "manifest" => DataSource::Manifest,
                    "bbbc006" => DataSource::Bbbc006,
                    _ => return Err(Error::Config(format!("unknown data_source `{v}`"))),
                }
            }
            "data_root" => self.data.root = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "focal_plane" => self.data.focal_plane = parse(key, v)?,
            "synth_count" => self.data.synth_count = parse(key, v)?,
            "synth_density" => self.data.synth_density = parse(key, v)?,
            "synth_seed" => self.data.synth_seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Serialises every key; [`RunConfig::apply_text`] reads it back exactly.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("base_filters", self.net.base_filters.to_string());
        kv("depth", self.net.depth.to_string());
        kv("out_channels", self.net.out_channels.to_string());
        kv("height", self.net.input_size.0.to_string());
        kv("width", self.net.input_size.1.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", format!("{:e}", t.lr));
        kv("epochs", t.epochs.to_string());
        kv("lr_decay", t.lr_decay.to_string());
        kv("lr_decay_every", t.lr_decay_every.to_string());
        kv("alpha_schedule", format_schedule(&t.alpha_schedule));
        kv("adjacency_radius", t.adjacency_radius.to_string());
        kv("include_background", t.include_background.to_string());
        kv("seed", t.seed.to_string());
        kv("eval_every", t.eval_every.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("adam_eps", format!("{:e}", t.adam_eps));
        kv("w_intra", t.loss.w_intra.to_string());
        kv("w_inter", t.loss.w_inter.to_string());
        kv("remap_inter", t.loss.remap_inter.to_string());
        kv("post_activation", t.loss.post_activation.to_string());
        kv("min_area", t.postprocess.min_area.to_string());
        kv("background_policy", t.postprocess.policy.to_string());
        kv(
            "connectivity",
            match t.postprocess.connectivity {
                crate::postprocess::Connectivity::Four => "4".into(),
                crate::postprocess::Connectivity::Eight => "8".into(),
            },
        );
        kv("device", t.device.clone());
        kv("parallelism", t.parallelism.clone());
        kv(
            "data_source",
            match self.data.source {
                DataSource::Synth => "synth",
                DataSource::Manifest => "manifest",
                DataSource::Bbbc006 => "bbbc006",
            }
            .into(),
        );
        kv(
            "data_root",
            self.data.root.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv("focal_plane", self.data.focal_plane.to_string());
        kv("synth_count", self.data.synth_count.to_string());
        kv("synth_density", self.data.synth_density.to_string());
        kv("synth_seed", self.data.synth_seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }
}
