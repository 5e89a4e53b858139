use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::PromptMode;
use crate::data::SynthConfig;
use crate::error::{Error, Result};

/// Every knob of one training run. Defaults are the toy-scale settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a validation-accuracy gain; 0
    /// disables early stopping.
    pub patience: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Contrastive temperature τ.
    pub tau: f64,
    pub alpha_tv: f64,
    pub alpha_ta: f64,
    /// Number of learnable tokens `D` (also the aligned length `L`).
    pub prompt_len: usize,
    /// Aligned feature width `H`.
    pub hidden: usize,
    pub map_heads: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub gate_index: usize,
    pub gate_beta: f64,
    pub sbma_on: bool,
    pub map_on: bool,
    pub tcl_on: bool,
    pub prompt_mode: PromptMode,
    /// Block the contrastive gradient into the augmented branch.
    pub stop_grad_label: bool,
    /// Include prompt and special positions in the mean pool.
    pub pool_prompt: bool,
    /// Use audio as attention keys and video as values.
    pub swap_roles: bool,
    /// Replace video and audio with zeros (text-only baseline).
    pub text_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 16,
            eval_batch_size: 8,
            epochs: 50,
            patience: 10,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            tau: 0.07,
            alpha_tv: 1.0,
            alpha_ta: 1.0,
            prompt_len: 3,
            hidden: 24,
            map_heads: 4,
            encoder_layers: 2,
            encoder_heads: 4,
            gate_index: 0,
            gate_beta: 0.5,
            sbma_on: true,
            map_on: true,
            tcl_on: true,
            prompt_mode: PromptMode::ModalityAware,
            stop_grad_label: false,
            pool_prompt: true,
            swap_roles: false,
            text_only: false,
        }
    }
}

impl TrainConfig {
    /// Checks ranges and returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("tau", self.tau),
            ("alpha_tv", self.alpha_tv),
            ("alpha_ta", self.alpha_ta),
            ("gate_beta", self.gate_beta),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("eval_batch_size", self.eval_batch_size),
            ("prompt_len", self.prompt_len),
            ("hidden", self.hidden),
            ("map_heads", self.map_heads),
            ("encoder_layers", self.encoder_layers),
            ("encoder_heads", self.encoder_heads),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if !self.hidden.is_multiple_of(self.map_heads) {
            return Err(Error::config(format!(
                "hidden {} is not divisible by map_heads {}",
                self.hidden, self.map_heads
            )));
        }
        if self.gate_index >= self.encoder_layers {
            return Err(Error::config("gate_index must be below encoder_layers"));
        }
        let mut warnings = Vec::new();
        if self.tcl_on && self.batch_size < 2 {
            warnings.push("batch_size 1 gives a zero contrastive loss (no negatives)".to_string());
        }
        if !self.map_on && self.prompt_mode != PromptMode::ModalityAware {
            warnings.push("prompt_mode has no effect with map_on = false".to_string());
        }
        Ok(warnings)
    }
}

/// Where the samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SynthConfig),
    Archive(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SynthConfig::default())
    }
}

/// A complete, replayable experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub train: TrainConfig,
    /// Runs use training seeds `train.seed .. train.seed + seeds`.
    pub seeds: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<Vec<String>> {
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        if self.seeds == 0 {
            return Err(Error::config("seeds must be at least 1"));
        }
        self.train.validate()
    }

    /// Applies `key=value` overrides with dotted keys, e.g.
    /// `train.learning_rate=0.01`. Values are parsed as JSON when possible
    /// and as plain strings otherwise; the result must still match the
    /// schema.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut value, o.as_ref())?;
        }
        serde_json::from_value(value).map_err(|e| Error::config(format!("after overrides: {e}")))
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            train: TrainConfig::default(),
            seeds: 1,
        }
    }
}

/// Sets one dotted key in a JSON tree. The key must already exist.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::config(format!("unknown config key {key:?}")))?;
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let compatible = matches!(
        (&*node, &parsed),
        (Value::Null, _)
            | (Value::Bool(_), Value::Bool(_))
            | (Value::Number(_), Value::Number(_))
            | (Value::String(_), Value::String(_))
            | (Value::Array(_), Value::Array(_))
            | (Value::Object(_), Value::Object(_))
    );
    if !compatible {
        return Err(Error::config(format!("{key} expects {}, got {raw:?}", kind(node))));
    }
    *node = parsed;
    Ok(())
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}
