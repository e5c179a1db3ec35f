//! Flat `key = value` run configuration with typed defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use medmoco::diagnostics::{FeatureSource, DEFAULT_COLLAPSE_RATIO};
use medmoco::downstream::{EvalConfig, EvalMode};
use medmoco::engine::{AugmentConfig, TrainConfig};
use medmoco::phantom::{standard_splits, PhantomConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Uint,
    Float,
    Bool,
    Text,
    Choice(&'static [&'static str]),
    UintList,
}

/// Every accepted key, its default and its type, in the order written to
/// `config.resolved`.
const KEYS: &[(&str, &str, Kind)] = &[
    // dataset
    ("data_dir", "data", Kind::Text),
    ("image_size", "64", Kind::Uint),
    ("num_classes", "5", Kind::Uint),
    ("num_samples", "2048", Kind::Uint),
    ("downstream_train", "256", Kind::Uint),
    ("downstream_val", "64", Kind::Uint),
    ("template_seed", "0", Kind::Uint),
    ("sample_seed_base", "0", Kind::Uint),
    ("deform_amplitude", "0.15", Kind::Float),
    ("texture_noise", "0.05", Kind::Float),
    // pretraining
    ("seed", "0", Kind::Uint),
    ("epochs", "20", Kind::Uint),
    ("batch_size", "32", Kind::Uint),
    ("queue_size", "1024", Kind::Uint),
    ("momentum", "0.999", Kind::Float),
    ("tau", "0.2", Kind::Float),
    ("lambda", "1.0", Kind::Float),
    ("patches", "20", Kind::Uint),
    ("lr", "0.03", Kind::Float),
    ("weight_decay", "0.0001", Kind::Float),
    ("sgd_momentum", "0.9", Kind::Float),
    ("enable_local", "true", Kind::Bool),
    ("enable_whitening", "true", Kind::Bool),
    ("denominator_includes_positive", "true", Kind::Bool),
    ("whitening_iterations", "5", Kind::Uint),
    ("checkpoint_every", "0", Kind::Uint),
    ("resume", "", Kind::Text),
    ("crop_scale_min", "0.2", Kind::Float),
    ("crop_scale_max", "1.0", Kind::Float),
    ("crop_ratio_min", "0.75", Kind::Float),
    ("crop_ratio_max", "1.3333333333333333", Kind::Float),
    ("flip_prob", "0.5", Kind::Float),
    ("jitter", "0.4", Kind::Float),
    ("blur_prob", "0.5", Kind::Float),
    ("blur_sigma_min", "0.1", Kind::Float),
    ("blur_sigma_max", "2.0", Kind::Float),
    // diagnostics
    ("source", "pooled", Kind::Choice(&["pooled", "embedding"])),
    ("collapse_ratio", "0.0001", Kind::Float),
    // evaluation
    ("checkpoint", "", Kind::Text),
    ("eval_mode", "frozen", Kind::Choice(&["frozen", "finetune"])),
    ("label_fraction", "1.0", Kind::Float),
    ("combination_seed", "0", Kind::Uint),
    ("eval_iterations", "2000", Kind::Uint),
    ("eval_lr", "0.05", Kind::Float),
    ("eval_batch_size", "16", Kind::Uint),
    ("eval_sgd_momentum", "0.9", Kind::Float),
    ("eval_weight_decay", "0.0001", Kind::Float),
    ("convert_whitening", "true", Kind::Bool),
    ("eval_seed", "0", Kind::Uint),
    // ablation
    ("ablation_seeds", "0", Kind::UintList),
    ("finetune_iterations", "2000", Kind::Uint),
];

/// Why a configuration was rejected, with the offending token.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub token: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.token, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(token: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        token: token.into(),
        message: message.into(),
    }
}

fn kind_of(key: &str) -> Option<Kind> {
    KEYS.iter()
        .find(|(k, _, _)| *k == key)
        .map(|(_, _, kind)| *kind)
}

/// Parse and canonicalize one value.
fn normalize(key: &str, raw: &str) -> Result<String, ConfigError> {
    let kind = kind_of(key).ok_or_else(|| err(key, "unknown key"))?;
    let bad = |what: &str| err(key, format!("expected {what}, got {raw:?}"));
    Ok(match kind {
        Kind::Uint => raw
            .parse::<u64>()
            .map_err(|_| bad("a non-negative integer"))?
            .to_string(),
        Kind::Float => {
            let v = raw.parse::<f64>().map_err(|_| bad("a number"))?;
            if !v.is_finite() {
                return Err(bad("a finite number"));
            }
            format!("{v:?}")
        }
        Kind::Bool => match raw {
            "true" => "true".into(),
            "false" => "false".into(),
            _ => return Err(bad("true or false")),
        },
        Kind::Text => raw.to_string(),
        Kind::Choice(options) => {
            if !options.contains(&raw) {
                return Err(bad(&options.join(" or ")));
            }
            raw.to_string()
        }
        Kind::UintList => {
            let parts: Result<Vec<u64>, _> =
                raw.split(',').map(|p| p.trim().parse::<u64>()).collect();
            let parts = parts.map_err(|_| bad("a comma-separated list of integers"))?;
            parts
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        }
    })
}

/// Fully resolved configuration: every key has a value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|(k, v, _)| (*k, normalize(k, v).expect("valid default")))
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        let v = normalize(key, raw.trim())?;
        let k = KEYS
            .iter()
            .find(|(k, _, _)| *k == key)
            .expect("known key")
            .0;
        self.values.insert(k, v);
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| err(assignment, "expected key=value"))?;
        self.set(k.trim(), v)
    }

    /// Apply the lines of a config file. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(line, format!("{origin}:{}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err(path.display().to_string(), e.to_string()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// `key = value` lines in declaration order.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, _, _) in KEYS {
            out.push_str(&format!("{k} = {}\n", self.values[k]));
        }
        out
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("unknown key {key}"))
    }

    fn uint(&self, key: &str) -> u64 {
        self.get(key).parse().expect("normalized")
    }

    fn usize(&self, key: &str) -> usize {
        self.uint(key) as usize
    }

    fn float(&self, key: &str) -> f64 {
        self.get(key).parse().expect("normalized")
    }

    fn flag(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn data_dir(&self) -> PathBuf {
        PathBuf::from(self.get("data_dir"))
    }

    pub fn resume(&self) -> Option<PathBuf> {
        self.path("resume")
    }

    pub fn checkpoint(&self) -> Option<PathBuf> {
        self.path("checkpoint")
    }

    pub fn source(&self) -> FeatureSource {
        match self.get("source") {
            "embedding" => FeatureSource::ProjectorEmbedding,
            _ => FeatureSource::PooledBackbone,
        }
    }

    pub fn collapse_ratio(&self) -> f64 {
        let r = self.float("collapse_ratio");
        if r > 0.0 && r < 1.0 {
            r
        } else {
            DEFAULT_COLLAPSE_RATIO
        }
    }

    pub fn ablation_seeds(&self) -> Vec<u64> {
        self.get("ablation_seeds")
            .split(',')
            .map(|v| v.parse().expect("normalized"))
            .collect()
    }

    pub fn finetune_iterations(&self) -> usize {
        self.usize("finetune_iterations")
    }

    /// Pretraining set plus the downstream train and validation sets, each
    /// with its own sample seed range.
    pub fn phantom_sets(&self) -> [(&'static str, PhantomConfig); 3] {
        let base = PhantomConfig {
            image_size: self.usize("image_size"),
            num_classes: self.usize("num_classes"),
            num_samples: self.usize("num_samples"),
            template_seed: self.uint("template_seed"),
            sample_seed_base: self.uint("sample_seed_base"),
            deform_amplitude: self.float("deform_amplitude"),
            texture_noise: self.float("texture_noise"),
        };
        standard_splits(
            &base,
            self.usize("downstream_train"),
            self.usize("downstream_val"),
        )
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.usize("batch_size"),
            queue_size: self.usize("queue_size"),
            momentum: self.float("momentum"),
            tau: self.float("tau"),
            lambda: self.float("lambda"),
            patches: self.usize("patches"),
            epochs: self.usize("epochs"),
            lr: self.float("lr"),
            weight_decay: self.float("weight_decay"),
            sgd_momentum: self.float("sgd_momentum"),
            enable_local: self.flag("enable_local"),
            enable_whitening: self.flag("enable_whitening"),
            denominator_includes_positive: self.flag("denominator_includes_positive"),
            whitening_iterations: self.usize("whitening_iterations"),
            seed: self.uint("seed"),
            checkpoint_every: self.uint("checkpoint_every"),
            augment: AugmentConfig {
                crop_scale: (self.float("crop_scale_min"), self.float("crop_scale_max")),
                crop_ratio: (self.float("crop_ratio_min"), self.float("crop_ratio_max")),
                flip_prob: self.float("flip_prob"),
                jitter: self.float("jitter"),
                blur_prob: self.float("blur_prob"),
                blur_sigma: (self.float("blur_sigma_min"), self.float("blur_sigma_max")),
            },
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            mode: match self.get("eval_mode") {
                "finetune" => EvalMode::Finetune,
                _ => EvalMode::Frozen,
            },
            label_fraction: self.float("label_fraction"),
            combination_seed: self.uint("combination_seed"),
            iterations: self.usize("eval_iterations"),
            lr: self.float("eval_lr"),
            batch_size: self.usize("eval_batch_size"),
            sgd_momentum: self.float("eval_sgd_momentum"),
            weight_decay: self.float("eval_weight_decay"),
            convert_whitening: self.flag("convert_whitening"),
            seed: self.uint("eval_seed"),
        }
    }

    /// Typed validation of every section.
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (_, p) in self.phantom_sets() {
            p.validate().map_err(|e| err("dataset", e.to_string()))?;
        }
        self.train()
            .validate()
            .map_err(|e| err("pretrain", e.to_string()))?;
        self.eval()
            .validate()
            .map_err(|e| err("evaluate", e.to_string()))?;
        let r = self.float("collapse_ratio");
        if !(r > 0.0 && r < 1.0) {
            return Err(err(
                "collapse_ratio",
                format!("must lie in (0, 1), got {r}"),
            ));
        }
        Ok(())
    }
}
