//! Experiment configuration: a flat key-value document (JSON or TOML) over
//! built-in defaults, with command-line overrides applied last.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::federation::{ServerHyper, ServerKind, StragglerPolicy, Weighting};
use crate::metrics::BwtMode;
use crate::model::{Activation, BackboneSpec};
use crate::schedule::OrderingCase;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SynthSpec),
    Csv(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PartitionSpec {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub tasks: usize,
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub case: OrderingCase,
    pub client_lr: f64,
    pub server: ServerKind,
    pub server_lr: f64,
    /// `None` picks the kind's default (0.9 adaptive, 0 for FedSGD).
    pub beta1: Option<f64>,
    pub beta2: f64,
    pub tau: f64,
    pub weighting: Weighting,
    pub partition: PartitionSpec,
    pub drop_prob: f64,
    /// Mini-batch size; 0 means full batch.
    pub batch_size: usize,
    pub test_fraction: f64,
    pub shuffle_classes: bool,
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub skip_window: usize,
    pub bwt_mode: BwtMode,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub emit_svg: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Synthetic(SynthSpec {
                classes: 20,
                dim: 32,
                per_class: 100,
                spread: 0.5,
            }),
            tasks: 10,
            clients: 5,
            rounds: 300,
            local_epochs: 2,
            case: OrderingCase::AsyncFcl,
            client_lr: 0.05,
            server: ServerKind::FedAdam,
            server_lr: 0.5,
            beta1: None,
            beta2: 0.99,
            tau: 1e-3,
            weighting: Weighting::SampleWeighted,
            partition: PartitionSpec::Iid,
            drop_prob: 0.0,
            batch_size: 16,
            test_fraction: 0.2,
            shuffle_classes: false,
            layer_dims: vec![32, 32],
            activation: Activation::Relu,
            skip_window: 1,
            bwt_mode: BwtMode::Literal,
            seed: 0,
            output_dir: PathBuf::from("out"),
            emit_svg: false,
        }
    }
}

impl ExperimentConfig {
    /// The desk-scale setup used for trend experiments: 20 classes in 32
    /// dimensions, `T = 5`, `N = 5`, `R = 100`, `K = 2`, FedAdam `η = 0.5`.
    /// Small training shards and large test sets keep accuracy estimates
    /// stable across seeds; `τ = 0.025` keeps a FedAdam step near the size of a
    /// client delta.
    pub fn desk() -> Self {
        ExperimentConfig {
            data: DataSource::Synthetic(SynthSpec {
                classes: 20,
                dim: 32,
                per_class: 300,
                spread: 0.4,
            }),
            tasks: 5,
            rounds: 100,
            test_fraction: 0.75,
            tau: 0.025,
            batch_size: 16,
            ..ExperimentConfig::default()
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "dataset",
    "csv_path",
    "synth_classes",
    "synth_dim",
    "synth_per_class",
    "synth_spread",
    "tasks",
    "clients",
    "rounds",
    "local_epochs",
    "case",
    "client_lr",
    "server",
    "server_lr",
    "beta1",
    "beta2",
    "tau",
    "weighting",
    "partition",
    "dirichlet_alpha",
    "drop_prob",
    "batch_size",
    "test_fraction",
    "shuffle_classes",
    "layer_dims",
    "activation",
    "skip_window",
    "bwt_mode",
    "seed",
    "output_dir",
    "emit_svg",
];

fn bad(key: &str, want: &str, got: &Value) -> Error {
    Error::config(format!("key {key:?}: expected {want}, got {got}"))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Number(n) => n.as_f64().ok_or_else(|| bad(key, "a number", v)),
        Value::String(s) => s.trim().parse().map_err(|_| bad(key, "a number", v)),
        _ => Err(bad(key, "a number", v)),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Number(n) => n.as_u64().ok_or_else(|| bad(key, "a nonnegative integer", v)),
        Value::String(s) => s.trim().parse().map_err(|_| bad(key, "a nonnegative integer", v)),
        _ => Err(bad(key, "a nonnegative integer", v)),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    usize::try_from(as_u64(key, v)?).map_err(|_| bad(key, "a count", v))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    match v {
        Value::Bool(b) => Ok(*b),
        Value::String(s) => match s.trim() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(bad(key, "a boolean", v)),
        },
        _ => Err(bad(key, "a boolean", v)),
    }
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| bad(key, "a string", v))
}

fn parse_named<T: std::str::FromStr<Err = Error>>(key: &str, v: &Value) -> Result<T> {
    as_str(key, v)?
        .parse()
        .map_err(|e: Error| Error::config(format!("key {key:?}: {e}")))
}

impl ExperimentConfig {
    fn synth_mut(&mut self, key: &str) -> Result<&mut SynthSpec> {
        match &mut self.data {
            DataSource::Synthetic(s) => Ok(s),
            DataSource::Csv(_) => Err(Error::config(format!(
                "key {key:?}: only valid for the synthetic dataset"
            ))),
        }
    }

    /// Set one flat key. Numbers may arrive as strings (command-line values).
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "dataset" => match as_str(key, v)? {
                "synthetic" => {
                    if !matches!(self.data, DataSource::Synthetic(_)) {
                        self.data = ExperimentConfig::default().data;
                    }
                }
                "csv" => {
                    if !matches!(self.data, DataSource::Csv(_)) {
                        self.data = DataSource::Csv(PathBuf::new());
                    }
                }
                other => return Err(Error::config(format!("key \"dataset\": unknown source {other:?}"))),
            },
            "csv_path" => self.data = DataSource::Csv(PathBuf::from(as_str(key, v)?)),
            "synth_classes" => self.synth_mut(key)?.classes = as_usize(key, v)?,
            "synth_dim" => self.synth_mut(key)?.dim = as_usize(key, v)?,
            "synth_per_class" => self.synth_mut(key)?.per_class = as_usize(key, v)?,
            "synth_spread" => self.synth_mut(key)?.spread = as_f64(key, v)?,
            "tasks" => self.tasks = as_usize(key, v)?,
            "clients" => self.clients = as_usize(key, v)?,
            "rounds" => self.rounds = as_usize(key, v)?,
            "local_epochs" => self.local_epochs = as_usize(key, v)?,
            "case" => self.case = parse_named(key, v)?,
            "client_lr" => self.client_lr = as_f64(key, v)?,
            "server" => self.server = parse_named(key, v)?,
            "server_lr" => self.server_lr = as_f64(key, v)?,
            "beta1" => {
                self.beta1 = match v {
                    Value::Null => None,
                    Value::String(s) if s == "default" => None,
                    _ => Some(as_f64(key, v)?),
                }
            }
            "beta2" => self.beta2 = as_f64(key, v)?,
            "tau" => self.tau = as_f64(key, v)?,
            "weighting" => self.weighting = parse_named(key, v)?,
            "partition" => {
                self.partition = match as_str(key, v)? {
                    "iid" => PartitionSpec::Iid,
                    "dirichlet" => match self.partition {
                        PartitionSpec::Dirichlet { alpha } => PartitionSpec::Dirichlet { alpha },
                        PartitionSpec::Iid => PartitionSpec::Dirichlet { alpha: 0.5 },
                    },
                    other => {
                        return Err(Error::config(format!("key \"partition\": unknown scheme {other:?}")))
                    }
                }
            }
            "dirichlet_alpha" => {
                self.partition = PartitionSpec::Dirichlet {
                    alpha: as_f64(key, v)?,
                }
            }
            "drop_prob" => self.drop_prob = as_f64(key, v)?,
            "batch_size" => self.batch_size = as_usize(key, v)?,
            "test_fraction" => self.test_fraction = as_f64(key, v)?,
            "shuffle_classes" => self.shuffle_classes = as_bool(key, v)?,
            "layer_dims" => {
                self.layer_dims = match v {
                    Value::Array(items) => items.iter().map(|x| as_usize(key, x)).collect::<Result<_>>()?,
                    Value::String(s) => s
                        .split(',')
                        .map(|x| as_usize(key, &Value::String(x.to_string())))
                        .collect::<Result<_>>()?,
                    _ => return Err(bad(key, "a list of counts", v)),
                }
            }
            "activation" => {
                self.activation = match as_str(key, v)? {
                    "relu" => Activation::Relu,
                    "tanh" => Activation::Tanh,
                    other => return Err(Error::config(format!("key \"activation\": unknown {other:?}"))),
                }
            }
            "skip_window" => self.skip_window = as_usize(key, v)?,
            "bwt_mode" => self.bwt_mode = parse_named(key, v)?,
            "seed" => self.seed = as_u64(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(as_str(key, v)?),
            "emit_svg" => self.emit_svg = as_bool(key, v)?,
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Flat echo of every key; feeding it back through [`set`](Self::set)
    /// rebuilds the same config.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        match &self.data {
            DataSource::Synthetic(s) => {
                put("dataset", json!("synthetic"));
                put("synth_classes", json!(s.classes));
                put("synth_dim", json!(s.dim));
                put("synth_per_class", json!(s.per_class));
                put("synth_spread", json!(s.spread));
            }
            DataSource::Csv(p) => {
                put("dataset", json!("csv"));
                put("csv_path", json!(p.to_string_lossy()));
            }
        }
        put("tasks", json!(self.tasks));
        put("clients", json!(self.clients));
        put("rounds", json!(self.rounds));
        put("local_epochs", json!(self.local_epochs));
        put("case", json!(self.case.to_string()));
        put("client_lr", json!(self.client_lr));
        put("server", json!(self.server.to_string()));
        put("server_lr", json!(self.server_lr));
        put("beta1", json!(self.beta1));
        put("beta2", json!(self.beta2));
        put("tau", json!(self.tau));
        put("weighting", json!(self.weighting.to_string()));
        match self.partition {
            PartitionSpec::Iid => put("partition", json!("iid")),
            PartitionSpec::Dirichlet { alpha } => {
                put("partition", json!("dirichlet"));
                put("dirichlet_alpha", json!(alpha));
            }
        }
        put("drop_prob", json!(self.drop_prob));
        put("batch_size", json!(self.batch_size));
        put("test_fraction", json!(self.test_fraction));
        put("shuffle_classes", json!(self.shuffle_classes));
        put("layer_dims", json!(self.layer_dims));
        put(
            "activation",
            json!(match self.activation {
                Activation::Relu => "relu",
                Activation::Tanh => "tanh",
            }),
        );
        put("skip_window", json!(self.skip_window));
        put(
            "bwt_mode",
            json!(match self.bwt_mode {
                BwtMode::Literal => "literal",
                BwtMode::Boundary => "boundary",
            }),
        );
        put("seed", json!(self.seed));
        put("output_dir", json!(self.output_dir.to_string_lossy()));
        put("emit_svg", json!(self.emit_svg));
        m
    }

    pub fn phase_len(&self) -> usize {
        self.rounds / self.tasks.max(1)
    }

    pub fn server_hyper(&self) -> ServerHyper {
        let mut h = ServerHyper::defaults(self.server, self.server_lr);
        if let Some(b1) = self.beta1 {
            h.beta1 = b1;
        }
        h.beta2 = self.beta2;
        h.tau = self.tau;
        h
    }

    pub fn backbone_spec(&self, input_dim: usize) -> BackboneSpec {
        BackboneSpec {
            input_dim,
            layer_dims: self.layer_dims.clone(),
            activation: self.activation,
            skip_window: self.skip_window,
        }
    }

    /// Check the cross-key invariants; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let need = |ok: bool, key: &str, msg: String| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("key {key:?}: {msg}")))
            }
        };
        need(self.tasks >= 1, "tasks", "must be at least 1".into())?;
        need(self.clients >= 1, "clients", "must be at least 1".into())?;
        need(self.local_epochs >= 1, "local_epochs", "must be at least 1".into())?;
        need(
            self.rounds >= 1 && self.rounds % self.tasks == 0,
            "rounds",
            format!("rounds ({}) must be a positive multiple of tasks ({})", self.rounds, self.tasks),
        )?;
        need(
            self.client_lr >= 0.0 && self.client_lr.is_finite(),
            "client_lr",
            format!("must be a finite rate >= 0, got {}", self.client_lr),
        )?;
        need(
            self.server_lr > 0.0 && self.server_lr.is_finite(),
            "server_lr",
            format!("must be > 0, got {}", self.server_lr),
        )?;
        need(
            (0.0..=1.0).contains(&self.test_fraction) && self.test_fraction > 0.0 && self.test_fraction < 1.0,
            "test_fraction",
            format!("must lie in (0, 1), got {}", self.test_fraction),
        )?;
        if let PartitionSpec::Dirichlet { alpha } = self.partition {
            need(
                alpha > 0.0 && alpha.is_finite(),
                "dirichlet_alpha",
                format!("must be > 0, got {alpha}"),
            )?;
        }
        StragglerPolicy::new(self.drop_prob).map_err(|e| Error::config(format!("key \"drop_prob\": {e}")))?;
        self.server_hyper()
            .validate()
            .map_err(|e| Error::config(format!("server settings: {e}")))?;
        match &self.data {
            DataSource::Synthetic(s) => {
                need(s.classes >= 2, "synth_classes", "must be at least 2".into())?;
                need(s.dim >= 1, "synth_dim", "must be at least 1".into())?;
                need(s.per_class >= 2, "synth_per_class", "must be at least 2".into())?;
                need(s.spread > 0.0, "synth_spread", format!("must be > 0, got {}", s.spread))?;
                need(
                    s.classes % self.tasks == 0,
                    "synth_classes",
                    format!("{} classes do not divide into {} tasks", s.classes, self.tasks),
                )?;
            }
            DataSource::Csv(p) => need(!p.as_os_str().is_empty(), "csv_path", "missing".into())?,
        }
        self.backbone_spec(1)
            .validate()
            .map_err(|e| Error::config(format!("key \"layer_dims\"/\"skip_window\": {e}")))
    }
}

/// Parse a flat document: JSON when it looks like an object, TOML otherwise.
pub fn parse_document(text: &str) -> Result<BTreeMap<String, Value>> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Ok(BTreeMap::new());
    }
    let value: Value = if trimmed.starts_with('{') {
        serde_json::from_str(trimmed).map_err(|e| Error::config(format!("JSON config: {e}")))?
    } else {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| Error::config(format!("TOML config: {e}")))?;
        serde_json::to_value(table)?
    };
    match value {
        Value::Object(map) => Ok(map.into_iter().collect()),
        other => Err(Error::config(format!("config must be a key-value document, got {other}"))),
    }
}

/// Defaults, then the file at `path` (if any), then `overrides` in order.
pub fn load_config(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        apply(&mut cfg, parse_document(&text)?)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Apply keys so that the data source is chosen before its parameters.
fn apply(cfg: &mut ExperimentConfig, doc: BTreeMap<String, Value>) -> Result<()> {
    let mut doc = doc;
    for first in ["dataset", "partition"] {
        if let Some(v) = doc.remove(first) {
            cfg.set(first, &v)?;
        }
    }
    for (k, v) in &doc {
        cfg.set(k, v)?;
    }
    Ok(())
}

/// Build a config from a flat map with the same ordering rules as a file.
pub fn from_flat(doc: BTreeMap<String, Value>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    apply(&mut cfg, doc)?;
    cfg.validate()?;
    Ok(cfg)
}
