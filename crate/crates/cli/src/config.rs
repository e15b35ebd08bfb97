//! Run configuration: a flat key-value text file with section headers.
//!
//! Grammar (see the README for the field reference):
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! Unknown sections or keys are errors: a config file is a reproducibility
//! audit trail. The only environment override is `GT_SEED`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gt_core::engine::AccKind;
use gt_core::graph::NormMode;
use gt_core::models::{LayerKind, ModelSpec};
use gt_core::nn::Activation;
use gt_core::tensor::Real;
use gt_core::trainer::{OptimizerKind, Strategy, TrainingConfig, UpdateMode};
use gt_core::view::SamplerConfig;
use gt_core::{CoreError, DatasetBundle, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [dataset]
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
    pub symmetrize: bool,
    pub self_loops: bool,
    pub clusters: Option<PathBuf>,

    // [model]
    pub kind: LayerKind,
    /// Hidden layer widths; the input width comes from the feature file and
    /// the final encoding width equals the class count.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub acc: String,
    pub bias: bool,
    pub dropout_keep: Real,
    pub l2: Real,
    pub normalization: NormMode,
    pub edge_proj_dim: usize,
    pub attention_slope: Real,

    // [training]
    pub strategy: Strategy,
    pub steps: usize,
    pub optimizer: String,
    pub lr: Real,
    pub adam_beta1: Real,
    pub adam_beta2: Real,
    pub adam_eps: Real,
    pub batch_fraction: f64,
    pub clusters_per_batch: usize,
    pub update_mode: String,
    pub async_concurrency: usize,
    pub sampler_fanouts: Vec<usize>,
    pub eval_every: usize,
    pub patience: usize,
    pub seed: u64,
    pub deterministic: bool,

    // [partition]
    pub partitions: usize,
    pub contiguous: bool,

    // [output]
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            edges: PathBuf::new(),
            features: PathBuf::new(),
            labels: PathBuf::new(),
            symmetrize: true,
            self_loops: false,
            clusters: None,
            kind: LayerKind::Gcn,
            hidden: vec![16],
            activation: Activation::Relu,
            acc: "sum".into(),
            bias: false,
            dropout_keep: 1.0,
            l2: 0.0,
            normalization: NormMode::Renormalized,
            edge_proj_dim: 0,
            attention_slope: 0.2,
            strategy: Strategy::Global,
            steps: 200,
            optimizer: "adam".into(),
            lr: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_fraction: 0.05,
            clusters_per_batch: 1,
            update_mode: "sync".into(),
            async_concurrency: 2,
            sampler_fanouts: Vec::new(),
            eval_every: 1,
            patience: 50,
            seed: 1,
            deterministic: false,
            partitions: 1,
            contiguous: false,
            out_dir: PathBuf::from("runs/out"),
        }
    }
}

fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(CoreError::Config(format!("{key}: expected true/false, got {v}"))),
    }
}

fn parse_num<T: FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CoreError::Config(format!("{key}: bad value {v}")))
}

fn parse_list(v: &str, key: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|x| parse_num(x.trim(), key))
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| CoreError::Parse {
                path: origin.display().to_string(),
                line: lineno + 1,
                msg,
            };
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(err("unterminated section header".into()));
                }
                section = line[1..line.len() - 1].to_string();
                match section.as_str() {
                    "dataset" | "model" | "training" | "partition" | "output" => continue,
                    other => return Err(err(format!("unknown section [{other}]"))),
                }
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err("expected key = value".into()));
            };
            let key = key.trim();
            let value = value.trim();
            let full = format!("{section}.{key}");
            match full.as_str() {
                "dataset.edges" => cfg.edges = value.into(),
                "dataset.features" => cfg.features = value.into(),
                "dataset.labels" => cfg.labels = value.into(),
                "dataset.symmetrize" => cfg.symmetrize = parse_bool(value, &full)?,
                "dataset.self_loops" => cfg.self_loops = parse_bool(value, &full)?,
                "dataset.clusters" => {
                    cfg.clusters = (!value.is_empty()).then(|| value.into())
                }
                "model.kind" => cfg.kind = value.parse()?,
                "model.hidden" => cfg.hidden = parse_list(value, &full)?,
                "model.activation" => cfg.activation = value.parse()?,
                "model.acc" => cfg.acc = value.to_string(),
                "model.bias" => cfg.bias = parse_bool(value, &full)?,
                "model.dropout_keep" => cfg.dropout_keep = parse_num(value, &full)?,
                "model.l2" => cfg.l2 = parse_num(value, &full)?,
                "model.normalization" => cfg.normalization = value.parse()?,
                "model.edge_proj_dim" => cfg.edge_proj_dim = parse_num(value, &full)?,
                "model.attention_slope" => cfg.attention_slope = parse_num(value, &full)?,
                "training.strategy" => cfg.strategy = value.parse()?,
                "training.steps" => cfg.steps = parse_num(value, &full)?,
                "training.optimizer" => cfg.optimizer = value.to_string(),
                "training.lr" => cfg.lr = parse_num(value, &full)?,
                "training.adam_beta1" => cfg.adam_beta1 = parse_num(value, &full)?,
                "training.adam_beta2" => cfg.adam_beta2 = parse_num(value, &full)?,
                "training.adam_eps" => cfg.adam_eps = parse_num(value, &full)?,
                "training.batch_fraction" => cfg.batch_fraction = parse_num(value, &full)?,
                "training.clusters_per_batch" => {
                    cfg.clusters_per_batch = parse_num(value, &full)?
                }
                "training.update_mode" => cfg.update_mode = value.to_string(),
                "training.async_concurrency" => {
                    cfg.async_concurrency = parse_num(value, &full)?
                }
                "training.sampler_fanouts" => cfg.sampler_fanouts = parse_list(value, &full)?,
                "training.eval_every" => cfg.eval_every = parse_num(value, &full)?,
                "training.patience" => cfg.patience = parse_num(value, &full)?,
                "training.seed" => cfg.seed = parse_num(value, &full)?,
                "training.deterministic" => cfg.deterministic = parse_bool(value, &full)?,
                "partition.count" => cfg.partitions = parse_num(value, &full)?,
                "partition.contiguous" => cfg.contiguous = parse_bool(value, &full)?,
                "output.dir" => cfg.out_dir = value.into(),
                other => return Err(err(format!("unknown key {other}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut cfg = Self::parse(&text, path)?;
        if let Ok(seed) = std::env::var("GT_SEED") {
            cfg.seed = seed
                .parse()
                .map_err(|_| CoreError::Config(format!("GT_SEED: bad value {seed}")))?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.optimizer.as_str() {
            "adam" | "sgd" => {}
            other => return Err(CoreError::Config(format!("unknown optimizer {other}"))),
        }
        match self.update_mode.as_str() {
            "sync" | "async" => {}
            other => return Err(CoreError::Config(format!("unknown update_mode {other}"))),
        }
        match self.acc.as_str() {
            "sum" | "mean" | "mean_global" | "attention" => {}
            other => return Err(CoreError::Config(format!("unknown acc {other}"))),
        }
        if self.partitions == 0 {
            return Err(CoreError::Config("partition.count must be positive".into()));
        }
        if self.steps == 0 {
            return Err(CoreError::Config("training.steps must be positive".into()));
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(s, "[dataset]");
        let _ = writeln!(s, "edges = {}", self.edges.display());
        let _ = writeln!(s, "features = {}", self.features.display());
        let _ = writeln!(s, "labels = {}", self.labels.display());
        let _ = writeln!(s, "symmetrize = {}", self.symmetrize);
        let _ = writeln!(s, "self_loops = {}", self.self_loops);
        let _ = writeln!(
            s,
            "clusters = {}",
            self.clusters
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        );
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "kind = {}", self.kind.as_str());
        let _ = writeln!(s, "hidden = {}", list(&self.hidden));
        let _ = writeln!(s, "activation = {}", self.activation.as_str());
        let _ = writeln!(s, "acc = {}", self.acc);
        let _ = writeln!(s, "bias = {}", self.bias);
        let _ = writeln!(s, "dropout_keep = {}", self.dropout_keep);
        let _ = writeln!(s, "l2 = {}", self.l2);
        let _ = writeln!(s, "normalization = {}", self.normalization.as_str());
        let _ = writeln!(s, "edge_proj_dim = {}", self.edge_proj_dim);
        let _ = writeln!(s, "attention_slope = {}", self.attention_slope);
        let _ = writeln!(s, "\n[training]");
        let _ = writeln!(s, "strategy = {}", self.strategy.as_str());
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "optimizer = {}", self.optimizer);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "adam_beta1 = {}", self.adam_beta1);
        let _ = writeln!(s, "adam_beta2 = {}", self.adam_beta2);
        let _ = writeln!(s, "adam_eps = {}", self.adam_eps);
        let _ = writeln!(s, "batch_fraction = {}", self.batch_fraction);
        let _ = writeln!(s, "clusters_per_batch = {}", self.clusters_per_batch);
        let _ = writeln!(s, "update_mode = {}", self.update_mode);
        let _ = writeln!(s, "async_concurrency = {}", self.async_concurrency);
        let _ = writeln!(s, "sampler_fanouts = {}", list(&self.sampler_fanouts));
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "deterministic = {}", self.deterministic);
        let _ = writeln!(s, "\n[partition]");
        let _ = writeln!(s, "count = {}", self.partitions);
        let _ = writeln!(s, "contiguous = {}", self.contiguous);
        let _ = writeln!(s, "\n[output]");
        let _ = writeln!(s, "dir = {}", self.out_dir.display());
        s
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer.as_str() {
            "sgd" => OptimizerKind::Sgd { lr: self.lr },
            _ => OptimizerKind::Adam {
                lr: self.lr,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
        }
    }

    pub fn acc_kind(&self) -> AccKind {
        match self.acc.as_str() {
            "mean" => AccKind::Mean {
                global_degree: false,
            },
            "mean_global" => AccKind::Mean {
                global_degree: true,
            },
            "attention" => AccKind::AttentionSoftmax,
            _ => AccKind::Sum,
        }
    }

    /// Builds the model spec against a loaded dataset (input and class
    /// dimensions come from the data).
    pub fn model_spec(&self, bundle: &DatasetBundle) -> Result<ModelSpec> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(bundle.graph.feature_dim());
        dims.extend_from_slice(&self.hidden);
        dims.push(bundle.class_count);
        let mut spec = match self.kind {
            LayerKind::Gcn => ModelSpec::gcn(dims, self.activation, bundle.class_count),
            LayerKind::GatEdge => ModelSpec::gat_edge(
                dims,
                self.activation,
                bundle.class_count,
                bundle.graph.edge_feature_dim(),
                self.edge_proj_dim,
            ),
        };
        if matches!(self.kind, LayerKind::Gcn) {
            spec.acc = self.acc_kind();
        }
        spec.bias = self.bias;
        spec.dropout_keep = self.dropout_keep;
        spec.l2 = self.l2;
        spec.normalization = self.normalization;
        spec.attention_slope = self.attention_slope;
        spec.validate()?;
        Ok(spec)
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            strategy: self.strategy,
            steps: self.steps,
            optimizer: self.optimizer_kind(),
            batch_fraction: self.batch_fraction,
            clusters_per_batch: self.clusters_per_batch,
            update_mode: if self.update_mode == "async" {
                UpdateMode::Async {
                    concurrency: self.async_concurrency.max(1),
                }
            } else {
                UpdateMode::Sync
            },
            sampler: (!self.sampler_fanouts.is_empty()).then(|| SamplerConfig {
                fanouts: self.sampler_fanouts.clone(),
            }),
            seed: self.seed,
            deterministic: self.deterministic,
            eval_every: self.eval_every,
            patience: self.patience,
        }
    }
}
