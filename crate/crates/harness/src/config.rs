//! Line-oriented experiment configuration.
//!
//! ```text
//! # comment
//! name = desk
//! repeats = 5
//! train.gamma = 5
//! train.model.hidden = 64,64
//! sweep.n_pos = 0|2|3|4
//! ```
//!
//! `train.*` keys are dotted paths into [`TrainConfig`]; anything left out
//! keeps its default. `sweep.*` keys name the same paths relative to
//! `train` and list `|`-separated alternatives for an ablation. Sequence
//! values are comma-separated.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::{Map, Value};
use sscl_core::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct ConfigError {
    /// 1-based; 0 when the problem is not tied to a line.
    pub line: usize,
    pub msg: String,
}

fn err(line: usize, msg: impl Into<String>) -> ConfigError {
    ConfigError { line, msg: msg.into() }
}

/// A swept field and the values it takes.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    /// Dotted path relative to `train`.
    pub path: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    /// Seeds `train.seed`, `train.seed + 1`, ...
    pub repeats: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            train: TrainConfig::default(),
            variants: Vec::new(),
            repeats: 1,
        }
    }
}

/// One point of a sweep: a label and the fully resolved config.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantRun {
    pub label: String,
    pub train: TrainConfig,
}

impl ExperimentSpec {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|i| self.train.seed + i).collect()
    }

    /// Cartesian product of the sweep in declaration order, the last
    /// declared field varying fastest.
    pub fn variant_runs(&self) -> Result<Vec<VariantRun>, ConfigError> {
        let base = serde_json::to_value(&self.train).map_err(|e| err(0, e.to_string()))?;
        let mut out = vec![(Vec::<String>::new(), base)];
        for v in &self.variants {
            let mut next = Vec::with_capacity(out.len() * v.values.len());
            for (labels, cfg) in &out {
                for value in &v.values {
                    let mut cfg = cfg.clone();
                    set_path(&mut cfg, &v.path, value.clone());
                    let mut labels = labels.clone();
                    labels.push(format!("{}={}", v.path, label_value(value)));
                    next.push((labels, cfg));
                }
            }
            out = next;
        }
        out.into_iter()
            .map(|(labels, cfg)| {
                let label = if labels.is_empty() {
                    "base".to_string()
                } else {
                    labels.join(" ")
                };
                let train = to_train(cfg, 0)?;
                Ok(VariantRun { label, train })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(err(
                0,
                format!("name `{}` must be nonempty and use only [A-Za-z0-9._-]", self.name),
            ));
        }
        if self.repeats == 0 {
            return Err(err(0, "repeats must be >= 1"));
        }
        self.train.validate().map_err(|e| err(0, e.to_string()))?;
        self.variant_runs().map(|_| ())
    }
}

fn label_value(v: &Value) -> String {
    match v {
        Value::Array(items) => format!("[{}]", items.iter().map(format_scalar).collect::<Vec<_>>().join("/")),
        other => format_scalar(other),
    }
}

/// Leaf paths of the default training config with their default values.
fn template_leaves() -> Map<String, Value> {
    let mut out = Map::new();
    flatten(
        &serde_json::to_value(TrainConfig::default()).expect("config serializes"),
        "",
        &mut out,
    );
    out
}

fn flatten(v: &Value, prefix: &str, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(child, &key, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut cur = root;
    let mut parts = path.split('.').peekable();
    while let Some(p) = parts.next() {
        let obj = cur.as_object_mut().expect("path walks objects");
        if parts.peek().is_none() {
            obj.insert(p.to_string(), value);
            return;
        }
        cur = obj.get_mut(p).expect("path exists in template");
    }
}

fn to_train(v: Value, line: usize) -> Result<TrainConfig, ConfigError> {
    serde_json::from_value(v).map_err(|e| err(line, format!("invalid training config: {e}")))
}

fn parse_scalar(text: &str, template: &Value) -> Result<Value, String> {
    match template {
        Value::Bool(_) => text
            .parse::<bool>()
            .map(Value::Bool)
            .map_err(|_| format!("expected true or false, got `{text}`")),
        Value::Number(n) if n.is_u64() => text
            .parse::<u64>()
            .map(Value::from)
            .map_err(|_| format!("expected a nonnegative integer, got `{text}`")),
        Value::Number(_) => {
            let x: f64 = text.parse().map_err(|_| format!("expected a number, got `{text}`"))?;
            serde_json::Number::from_f64(x)
                .map(Value::Number)
                .ok_or_else(|| format!("expected a finite number, got `{text}`"))
        }
        Value::String(_) => {
            if text.is_empty() {
                Err("expected a value".into())
            } else {
                Ok(Value::String(text.to_string()))
            }
        }
        other => Err(format!("unsupported template value {other}")),
    }
}

fn parse_value(text: &str, template: &Value) -> Result<Value, String> {
    match template {
        Value::Array(items) => {
            let elem = items.first().cloned().unwrap_or(Value::from(0u64));
            if text.is_empty() {
                return Ok(Value::Array(Vec::new()));
            }
            text.split(',')
                .map(|t| parse_scalar(t.trim(), &elem))
                .collect::<Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        scalar => parse_scalar(text, scalar),
    }
}

fn format_scalar(v: &Value) -> String {
    match v {
        Value::Number(n) if n.is_u64() || n.is_i64() => n.to_string(),
        Value::Number(n) => format!("{}", n.as_f64().expect("finite float")),
        Value::String(s) => s.clone(),
        Value::Bool(b) => b.to_string(),
        other => other.to_string(),
    }
}

fn format_value(v: &Value) -> String {
    match v {
        Value::Array(items) => items.iter().map(format_scalar).collect::<Vec<_>>().join(","),
        other => format_scalar(other),
    }
}

fn suggest(key: &str, leaves: &Map<String, Value>) -> String {
    let mut candidates = vec!["name".to_string(), "repeats".to_string()];
    for k in leaves.keys() {
        candidates.push(format!("train.{k}"));
        candidates.push(format!("sweep.{k}"));
    }
    candidates
        .into_iter()
        .min_by_key(|c| (strsim::levenshtein(key, c), c.clone()))
        .expect("candidate list is nonempty")
}

pub fn parse_config_str(text: &str) -> Result<ExperimentSpec, ConfigError> {
    let leaves = template_leaves();
    let mut spec = ExperimentSpec::default();
    let mut train = serde_json::to_value(&spec.train).expect("config serializes");
    let mut seen: Vec<(String, usize)> = Vec::new();
    let mut last_train_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| err(line, format!("expected key = value, got `{content}`")))?;
        if let Some((_, first)) = seen.iter().find(|(k, _)| k == key) {
            return Err(err(line, format!("duplicate key `{key}` (first set on line {first})")));
        }
        seen.push((key.to_string(), line));
        let at = |msg: String| err(line, format!("`{key}`: {msg}"));
        match key {
            "name" => spec.name = value.to_string(),
            "repeats" => {
                spec.repeats = value
                    .parse()
                    .map_err(|_| at(format!("expected a positive integer, got `{value}`")))?
            }
            _ => {
                let unknown = || {
                    err(
                        line,
                        format!("unknown key `{key}`; did you mean `{}`?", suggest(key, &leaves)),
                    )
                };
                if let Some(path) = key.strip_prefix("train.") {
                    let template = leaves.get(path).ok_or_else(unknown)?;
                    set_path(&mut train, path, parse_value(value, template).map_err(at)?);
                    last_train_line = line;
                } else if let Some(path) = key.strip_prefix("sweep.") {
                    let template = leaves.get(path).ok_or_else(unknown)?;
                    let values = value
                        .split('|')
                        .map(|v| parse_value(v.trim(), template))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(at)?;
                    for v in &values {
                        let mut probe = serde_json::to_value(TrainConfig::default()).expect("config serializes");
                        set_path(&mut probe, path, v.clone());
                        to_train(probe, line)?;
                    }
                    spec.variants.push(Variant {
                        path: path.to_string(),
                        values,
                    });
                } else {
                    return Err(unknown());
                }
            }
        }
    }
    spec.train = to_train(train, last_train_line)?;
    spec.validate()?;
    Ok(spec)
}

pub fn parse_config(path: &Path) -> anyhow::Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
    parse_config_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

/// Writes every key explicitly, so the output is independent of defaults.
pub fn dump_config(spec: &ExperimentSpec) -> String {
    let mut out = String::new();
    writeln!(out, "name = {}", spec.name).unwrap();
    writeln!(out, "repeats = {}", spec.repeats).unwrap();
    let mut leaves = Map::new();
    flatten(
        &serde_json::to_value(&spec.train).expect("config serializes"),
        "",
        &mut leaves,
    );
    for (k, v) in &leaves {
        writeln!(out, "train.{k} = {}", format_value(v)).unwrap();
    }
    for v in &spec.variants {
        let values: Vec<String> = v.values.iter().map(format_value).collect();
        writeln!(out, "sweep.{} = {}", v.path, values.join("|")).unwrap();
    }
    out
}
