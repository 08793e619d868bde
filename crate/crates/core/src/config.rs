//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated. Unknown and repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::bayes::NoiseModel;
use crate::error::{Error, Result};
use crate::gp::SEKernelParams;
use crate::train::{HorizonDist, MetaTrainConfig};

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        context: format!("config line {line}"),
        message: message.into(),
    }
}

/// Parsed entries keyed by name, each with its line number.
struct Entries(BTreeMap<String, (usize, String)>);

impl Entries {
    fn parse(text: &str, allowed: &[&str]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| parse_err(line, format!("expected key = value, got '{s}'")))?;
            let (k, v) = (k.trim(), v.trim());
            if !allowed.contains(&k) {
                return Err(parse_err(
                    line,
                    format!("unknown key '{k}' (allowed: {})", allowed.join(", ")),
                ));
            }
            if map.insert(k.to_string(), (line, v.to_string())).is_some() {
                return Err(parse_err(line, format!("key '{k}' given twice")));
            }
        }
        Ok(Entries(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| parse_err(*line, format!("invalid value '{v}' for '{key}'"))),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.0.get(key) {
            None => Ok(None),
            Some((_, v)) if v.is_empty() => Ok(Some(Vec::new())),
            Some((line, v)) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| parse_err(*line, format!("invalid list item '{}' for '{key}'", p.trim())))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "hidden_dims",
    "feature_dim",
    "sigma_eps",
    "batch_size",
    "horizon",
    "horizon_dist",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "iterations",
    "eval_every",
    "eval_max_context",
    "seed",
];

impl FromStr for HorizonDist {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(HorizonDist::Uniform),
            "zero" => Ok(HorizonDist::Zero),
            _ => Err(Error::Config(format!("unknown horizon_dist '{s}' (uniform or zero)"))),
        }
    }
}

impl HorizonDist {
    pub fn as_str(self) -> &'static str {
        match self {
            HorizonDist::Uniform => "uniform",
            HorizonDist::Zero => "zero",
        }
    }
}

/// Training configuration; keys not given keep their defaults.
pub fn parse_train_config(text: &str) -> Result<MetaTrainConfig> {
    let e = Entries::parse(text, TRAIN_KEYS)?;
    let mut c = MetaTrainConfig::default();
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = e.get(stringify!($field))? {
                c.$field = v;
            }
        };
    }
    if let Some(v) = e.list("hidden_dims")? {
        c.hidden_dims = v;
    }
    if let Some(v) = e.list("sigma_eps")? {
        c.sigma_eps = v;
    }
    set!(feature_dim);
    set!(batch_size);
    set!(horizon);
    set!(horizon_dist);
    set!(learning_rate);
    set!(beta1);
    set!(beta2);
    set!(epsilon);
    set!(iterations);
    set!(eval_every);
    set!(eval_max_context);
    set!(seed);
    c.validate()?;
    Ok(c)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn train_config_text(c: &MetaTrainConfig) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
    kv("hidden_dims", join(&c.hidden_dims));
    kv("feature_dim", c.feature_dim.to_string());
    kv("sigma_eps", join(&c.sigma_eps));
    kv("batch_size", c.batch_size.to_string());
    kv("horizon", c.horizon.to_string());
    kv("horizon_dist", c.horizon_dist.as_str().to_string());
    kv("learning_rate", c.learning_rate.to_string());
    kv("beta1", c.beta1.to_string());
    kv("beta2", c.beta2.to_string());
    kv("epsilon", c.epsilon.to_string());
    kv("iterations", c.iterations.to_string());
    kv("eval_every", c.eval_every.to_string());
    kv("eval_max_context", c.eval_max_context.to_string());
    kv("seed", c.seed.to_string());
    out
}

const GP_KEYS: &[&str] = &["gp_lengthscale", "gp_signal_var", "gp_noise_var"];

/// GP hyperparameters; missing keys fall back to
/// [`SEKernelParams::default_for`] the given noise model.
pub fn parse_gp_config(text: &str, noise: &NoiseModel) -> Result<SEKernelParams> {
    let e = Entries::parse(text, GP_KEYS)?;
    let mut p = SEKernelParams::default_for(noise);
    if let Some(v) = e.get("gp_lengthscale")? {
        p.lengthscale = v;
    }
    if let Some(v) = e.get("gp_signal_var")? {
        p.signal_var = v;
    }
    if let Some(v) = e.list::<f64>("gp_noise_var")? {
        p.noise_var = if v.len() == 1 { vec![v[0]; noise.dim()] } else { v };
    }
    if p.noise_var.len() != noise.dim() {
        return Err(Error::Config(format!(
            "gp_noise_var has {} values, model has {} outputs",
            p.noise_var.len(),
            noise.dim()
        )));
    }
    p.validate()?;
    Ok(p)
}
