//! Plain-text run configuration: one `key = value` per line, `#` starts a
//! comment. `turbo.preset` is applied before any individual weight, so
//! line order never matters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;
use turbo_sim::collider::{DetConfig, GenConfig};
use turbo_sim::evalx::ChiSquareConfig;
use turbo_sim::nnet::AdamConfig;
use turbo_sim::turbo::{preset_weights, ModelConfig, Regularization, Schedule, TurboWeights};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} already set on line {first}")]
    Duplicate { line: usize, key: String, first: usize },
    #[error("line {line}: {key}: {message}")]
    Value { line: usize, key: String, message: String },
}

type Result<T> = std::result::Result<T, ConfigError>;

/// Every tunable, after defaults, preset and file have been applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Fallback for every seed not set more specifically.
    pub seed: Option<u64>,
    pub preset: Option<String>,
    pub weights: TurboWeights,
    pub model: ModelConfig,
    pub model_seed: Option<u64>,
    pub clip_bound: f64,
    pub generator_adam: AdamConfig,
    pub critic_adam: AdamConfig,
    pub epochs: u64,
    pub batch_size: usize,
    pub critic_steps: usize,
    pub train_seed: Option<u64>,
    pub gen: GenConfig,
    pub det: DetConfig,
    pub chi: ChiSquareConfig,
    pub bins: usize,
    pub observables: Vec<String>,
    pub svg: bool,
    pub eval_seed: Option<u64>,
    pub paths: BTreeMap<String, PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = Schedule::default();
        Self {
            seed: None,
            preset: None,
            weights: TurboWeights::default(),
            model: ModelConfig::default(),
            model_seed: None,
            clip_bound: 0.01,
            generator_adam: s.generator_adam,
            critic_adam: s.critic_adam,
            epochs: s.epochs,
            batch_size: s.batch_size,
            critic_steps: s.critic_steps,
            train_seed: None,
            gen: GenConfig::default(),
            det: DetConfig::default(),
            chi: ChiSquareConfig::default(),
            bins: 50,
            observables: Vec::new(),
            svg: false,
            eval_seed: None,
            paths: BTreeMap::new(),
        }
    }
}

pub const PATH_KEYS: [&str; 4] = ["data", "out", "model", "report"];

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

impl Entry<'_> {
    fn err(&self, message: impl Into<String>) -> ConfigError {
        ConfigError::Value {
            line: self.line,
            key: self.key.to_string(),
            message: message.into(),
        }
    }

    fn f64(&self) -> Result<f64> {
        match self.value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.err(format!("expected a finite number, got {:?}", self.value))),
        }
    }

    fn positive(&self) -> Result<f64> {
        let v = self.f64()?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(self.err(format!("must be positive, got {v}")))
        }
    }

    fn non_negative(&self) -> Result<f64> {
        let v = self.f64()?;
        if v >= 0.0 {
            Ok(v)
        } else {
            Err(self.err(format!("must not be negative, got {v}")))
        }
    }

    fn unit(&self) -> Result<f64> {
        let v = self.f64()?;
        if (0.0..1.0).contains(&v) {
            Ok(v)
        } else {
            Err(self.err(format!("must lie in [0, 1), got {v}")))
        }
    }

    fn u64(&self) -> Result<u64> {
        self.value
            .parse()
            .map_err(|_| self.err(format!("expected a non-negative integer, got {:?}", self.value)))
    }

    fn usize(&self) -> Result<usize> {
        self.value
            .parse()
            .map_err(|_| self.err(format!("expected a non-negative integer, got {:?}", self.value)))
    }

    fn at_least(&self, min: usize) -> Result<usize> {
        let v = self.usize()?;
        if v >= min {
            Ok(v)
        } else {
            Err(self.err(format!("must be at least {min}, got {v}")))
        }
    }

    fn sizes(&self) -> Result<Vec<usize>> {
        if self.value.is_empty() {
            return Ok(Vec::new());
        }
        self.value
            .split(',')
            .map(|s| match s.trim().parse::<usize>() {
                Ok(v) if v > 0 => Ok(v),
                _ => Err(self.err(format!("expected comma-separated positive widths, got {:?}", self.value))),
            })
            .collect()
    }

    fn bool(&self) -> Result<bool> {
        match self.value {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(self.err(format!("expected true or false, got {v:?}"))),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<Entry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: raw.to_string(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    text: raw.to_string(),
                });
            }
            if let Some(first) = entries.iter().find(|e| e.key == key) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.into(),
                    first: first.line,
                });
            }
            entries.push(Entry { line, key, value });
        }

        let mut c = RunConfig::default();
        if let Some(e) = entries.iter().find(|e| e.key == "turbo.preset") {
            c.weights = preset_weights(e.value).map_err(|err| e.err(err.to_string()))?;
            c.preset = Some(e.value.to_string());
        }
        let mut regularization = None;
        for e in &entries {
            c.apply(e, &mut regularization)?;
        }
        match regularization {
            Some(("weight-clip", _)) => {
                c.model.regularization = Regularization::WeightClip { bound: c.clip_bound };
            }
            Some(("gradient-penalty", _)) | None => {}
            Some((other, line)) => {
                return Err(ConfigError::Value {
                    line,
                    key: "critic.regularization".into(),
                    message: format!("expected gradient-penalty or weight-clip, got {other:?}"),
                })
            }
        }
        Ok(c)
    }

    fn apply<'a>(&mut self, e: &Entry<'a>, regularization: &mut Option<(&'a str, usize)>) -> Result<()> {
        if let Some(field) = e.key.strip_prefix("turbo.") {
            if field == "preset" {
                return Ok(());
            }
            let v = if field == "p_norm" { e.positive()? } else { e.non_negative()? };
            let Some(slot) = self.weights.field_mut(field) else {
                return Err(self.unknown(e));
            };
            *slot = v;
            return Ok(());
        }
        match e.key {
            "seed" => self.seed = Some(e.u64()?),
            "nnet.hidden" => self.model.hidden = e.sizes()?,
            "nnet.noise_dim" => self.model.noise_dim = e.usize()?,
            "nnet.seed" => self.model_seed = Some(e.u64()?),
            "critic.hidden" => self.model.critic_hidden = e.sizes()?,
            "critic.penalty_coefficient" => self.model.penalty_coefficient = e.non_negative()?,
            "critic.regularization" => *regularization = Some((e.value, e.line)),
            "critic.clip_bound" => self.clip_bound = e.positive()?,
            "critic.lr" => self.critic_adam.lr = e.positive()?,
            "critic.beta1" => self.critic_adam.beta1 = e.unit()?,
            "critic.beta2" => self.critic_adam.beta2 = e.unit()?,
            "critic.eps" => self.critic_adam.eps = e.positive()?,
            "optim.lr" => self.generator_adam.lr = e.positive()?,
            "optim.beta1" => self.generator_adam.beta1 = e.unit()?,
            "optim.beta2" => self.generator_adam.beta2 = e.unit()?,
            "optim.eps" => self.generator_adam.eps = e.positive()?,
            "train.epochs" => self.epochs = e.u64()?,
            "train.batch_size" => self.batch_size = e.at_least(2)?,
            "train.critic_steps" => self.critic_steps = e.usize()?,
            "train.seed" => self.train_seed = Some(e.u64()?),
            "gen.m_t" => self.gen.m_t = e.positive()?,
            "gen.gamma_t" => self.gen.gamma_t = e.non_negative()?,
            "gen.m_w" => self.gen.m_w = e.positive()?,
            "gen.gamma_w" => self.gen.gamma_w = e.non_negative()?,
            "gen.m_b" => self.gen.m_b = e.non_negative()?,
            "gen.pt_sigma" => self.gen.pt_sigma = e.non_negative()?,
            "gen.mass_excess" => self.gen.mass_excess = e.non_negative()?,
            "gen.rapidity_sigma" => self.gen.rapidity_sigma = e.non_negative()?,
            "det.jet_resolution" => self.det.jet_resolution = e.non_negative()?,
            "det.electron_resolution" => self.det.electron_resolution = e.non_negative()?,
            "det.jet_angle" => self.det.jet_angle = e.non_negative()?,
            "det.electron_angle" => self.det.electron_angle = e.non_negative()?,
            "det.recoil_resolution" => self.det.recoil_resolution = e.non_negative()?,
            "eval.m_w" => self.chi.m_w = e.positive()?,
            "eval.m_t" => self.chi.m_t = e.positive()?,
            "eval.sigma_w" => self.chi.sigma_w = e.positive()?,
            "eval.sigma_t" => self.chi.sigma_t = e.positive()?,
            "eval.bins" => self.bins = e.at_least(1)?,
            "eval.observables" => {
                self.observables = e
                    .value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "eval.svg" => self.svg = e.bool()?,
            "eval.seed" => self.eval_seed = Some(e.u64()?),
            k => match k.strip_prefix("paths.") {
                Some(name) if PATH_KEYS.contains(&name) => {
                    if e.value.is_empty() {
                        return Err(e.err("empty path"));
                    }
                    self.paths.insert(name.to_string(), PathBuf::from(e.value));
                }
                _ => return Err(self.unknown(e)),
            },
        }
        Ok(())
    }

    fn unknown(&self, e: &Entry) -> ConfigError {
        ConfigError::UnknownKey {
            line: e.line,
            key: e.key.to_string(),
        }
    }

    /// Model architecture with its seed resolved against `fallback`.
    pub fn model_config(&self, fallback: u64) -> ModelConfig {
        ModelConfig {
            seed: self.model_seed.unwrap_or(fallback),
            ..self.model.clone()
        }
    }

    pub fn schedule(&self, fallback: u64) -> Schedule {
        Schedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            critic_steps: self.critic_steps,
            seed: self.train_seed.unwrap_or(fallback),
            generator_adam: self.generator_adam,
            critic_adam: self.critic_adam,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Keys accepted besides the `turbo.*` weight fields.
    const KEYS: &[&str] = &[
        "seed",
        "turbo.preset",
        "nnet.hidden",
        "nnet.noise_dim",
        "nnet.seed",
        "critic.hidden",
        "critic.penalty_coefficient",
        "critic.regularization",
        "critic.clip_bound",
        "critic.lr",
        "critic.beta1",
        "critic.beta2",
        "critic.eps",
        "optim.lr",
        "optim.beta1",
        "optim.beta2",
        "optim.eps",
        "train.epochs",
        "train.batch_size",
        "train.critic_steps",
        "train.seed",
        "gen.m_t",
        "gen.gamma_t",
        "gen.m_w",
        "gen.gamma_w",
        "gen.m_b",
        "gen.pt_sigma",
        "gen.mass_excess",
        "gen.rapidity_sigma",
        "det.jet_resolution",
        "det.electron_resolution",
        "det.jet_angle",
        "det.electron_angle",
        "det.recoil_resolution",
        "eval.m_w",
        "eval.m_t",
        "eval.sigma_w",
        "eval.sigma_t",
        "eval.bins",
        "eval.observables",
        "eval.svg",
        "eval.seed",
        "paths.data",
        "paths.out",
        "paths.model",
        "paths.report",
    ];

    #[test]
    fn defaults_without_file() {
        let c = RunConfig::parse("# nothing\n\n").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn preset_applies_before_overrides_in_any_order() {
        let c = RunConfig::parse("turbo.lambda_xt = 0.5\nturbo.preset = gan\n").unwrap();
        assert_eq!(c.weights.gamma, 1.0);
        assert_eq!(c.weights.kappa_xxt, 1.0);
        assert_eq!(c.weights.lambda_xt, 0.5);
        assert_eq!(c.weights.lambda_zt, 0.0);
    }

    #[test]
    fn typed_values() {
        let c = RunConfig::parse(
            "nnet.hidden = 64, 32\ncritic.hidden =\ntrain.epochs = 3  # short\noptim.lr = 1e-3\neval.observables = m_tt, b_py\neval.svg = true\npaths.out = a b.tsds\ncritic.regularization = weight-clip\ncritic.clip_bound = 0.05\n",
        )
        .unwrap();
        assert_eq!(c.model.hidden, vec![64, 32]);
        assert!(c.model.critic_hidden.is_empty());
        assert_eq!(c.epochs, 3);
        assert_eq!(c.generator_adam.lr, 1e-3);
        assert_eq!(c.observables, vec!["m_tt", "b_py"]);
        assert!(c.svg);
        assert_eq!(c.paths["out"], PathBuf::from("a b.tsds"));
        assert_eq!(c.model.regularization, Regularization::WeightClip { bound: 0.05 });
    }

    #[test]
    fn rejections() {
        let cases = [
            ("turbo.delta = 1", "unknown key"),
            ("gen.mass = 3", "unknown key"),
            ("paths.logs = x", "unknown key"),
            ("train.epochs = -1", "non-negative integer"),
            ("turbo.alpha = -1", "negative"),
            ("turbo.p_norm = 0", "positive"),
            ("optim.lr = nan", "finite"),
            ("nnet.hidden = 4,0", "positive widths"),
            ("train.batch_size = 1", "at least 2"),
            ("turbo.preset = vae", "aae, gan, full-turbo"),
            ("critic.regularization = spectral", "weight-clip"),
            ("eval.svg = yes", "true or false"),
            ("just words", "key = value"),
            ("seed = 1\nseed = 2", "already set on line 1"),
        ];
        for (text, needle) in cases {
            let err = RunConfig::parse(text).unwrap_err().to_string();
            assert!(err.contains(needle), "{text:?}: {err}");
        }
    }

    #[test]
    fn every_listed_key_is_accepted() {
        for key in KEYS {
            let value = match *key {
                "turbo.preset" => "aae",
                "critic.regularization" => "gradient-penalty",
                "nnet.hidden" | "critic.hidden" => "8",
                "eval.observables" => "m_tt",
                "eval.svg" => "false",
                k if k.starts_with("paths.") => "p",
                k if k.contains("beta") => "0.5",
                _ => "3",
            };
            RunConfig::parse(&format!("{key} = {value}")).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
        for field in TurboWeights::FIELDS {
            RunConfig::parse(&format!("turbo.{field} = 2")).unwrap();
        }
    }

    #[test]
    fn seeds_fall_back() {
        let c = RunConfig::parse("train.seed = 9").unwrap();
        assert_eq!(c.schedule(4).seed, 9);
        assert_eq!(c.model_config(4).seed, 4);
    }
}
