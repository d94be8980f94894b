//! Run configuration, read from `key=value` text.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::encoder::{EncoderConfig, EncoderKind};
use crate::ensemble::Fusion;
use crate::error::{Error, Result};
use crate::synextract::{parse_syntax_list, SyntaxType};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub emb_dim: usize,
    pub syntax: Vec<SyntaxType>,
    pub fusion: Fusion,
    pub gate: bool,
    pub crf_mask: bool,
    pub min_count: usize,
    /// Stop once dev F1 reaches this value (percent).
    pub target_f1: Option<f64>,
    pub static_vectors: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub trees: Option<PathBuf>,
    pub deps: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            batch_size: 32,
            epochs: 100,
            seed: 1,
            encoder: EncoderConfig::default(),
            emb_dim: 100,
            syntax: SyntaxType::ALL.to_vec(),
            fusion: Fusion::Sa,
            gate: true,
            crf_mask: false,
            min_count: 1,
            target_f1: None,
            static_vectors: None,
            train: None,
            dev: None,
            test: None,
            trees: None,
            deps: None,
            out: None,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Error::Config(format!("{key}: {e} (`{v}`)")))
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl TrainConfig {
    /// Applies one setting. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "lr" => self.lr = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "epsilon" => self.epsilon = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "dropout" => self.encoder.dropout = parse_num(key, v)?,
            "encoder" => self.encoder.kind = v.parse::<EncoderKind>()?,
            "layers" => self.encoder.layers = parse_num(key, v)?,
            "hidden" => self.encoder.hidden = parse_num(key, v)?,
            "heads" => self.encoder.heads = parse_num(key, v)?,
            "emb_dim" => self.emb_dim = parse_num(key, v)?,
            "syntax" => {
                self.syntax = if v.is_empty() || v == "none" {
                    Vec::new()
                } else {
                    parse_syntax_list(v)?
                }
            }
            "fusion" => self.fusion = v.parse()?,
            "gate" => self.gate = parse_bool(key, v)?,
            "crf_mask" => self.crf_mask = parse_bool(key, v)?,
            "min_count" => self.min_count = parse_num(key, v)?,
            "target_f1" => {
                self.target_f1 = if v == "none" { None } else { Some(parse_num(key, v)?) }
            }
            "static_vectors" => self.static_vectors = Some(PathBuf::from(v)),
            "train" => self.train = Some(PathBuf::from(v)),
            "dev" => self.dev = Some(PathBuf::from(v)),
            "test" => self.test = Some(PathBuf::from(v)),
            "trees" => self.trees = Some(PathBuf::from(v)),
            "deps" => self.deps = Some(PathBuf::from(v)),
            "out" => self.out = Some(PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown setting `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                line: i + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            c.set(k, v).map_err(|e| Error::Format {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        TrainConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Settings that shape the model and its training, in a fixed order.
    /// Data paths are left out.
    pub fn model_pairs(&self) -> Vec<(String, String)> {
        let syntax = if self.syntax.is_empty() {
            "none".to_string()
        } else {
            self.syntax.iter().map(|t| t.name()).collect::<Vec<_>>().join(",")
        };
        let mut v: Vec<(&str, String)> = vec![
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("dropout", self.encoder.dropout.to_string()),
            ("encoder", self.encoder.kind.to_string()),
            ("layers", self.encoder.layers.to_string()),
            ("hidden", self.encoder.hidden.to_string()),
            ("heads", self.encoder.heads.to_string()),
            ("emb_dim", self.emb_dim.to_string()),
            ("syntax", syntax),
            ("fusion", self.fusion.to_string()),
            ("gate", on_off(self.gate).to_string()),
            ("crf_mask", on_off(self.crf_mask).to_string()),
            ("min_count", self.min_count.to_string()),
        ];
        if let Some(t) = self.target_f1 {
            v.push(("target_f1", t.to_string()));
        }
        v.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.model_pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("need lr > 0 and betas in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.emb_dim == 0 {
            return Err(Error::Config("emb_dim must be positive".into()));
        }
        match self.fusion {
            Fusion::None => {
                if self.gate {
                    return Err(Error::Config("fusion=none requires gate=off".into()));
                }
                if !self.syntax.is_empty() {
                    return Err(Error::Config("fusion=none takes no syntax types".into()));
                }
            }
            Fusion::Dc => {
                if self.gate {
                    return Err(Error::Config("the gate requires fusion=sa".into()));
                }
            }
            Fusion::Sa => {}
        }
        if self.fusion != Fusion::None && self.syntax.is_empty() {
            return Err(Error::Config(format!("fusion={} needs syntax types", self.fusion)));
        }
        Ok(())
    }

    /// The no-syntax baseline: `fusion=none`, gate off, no types.
    pub fn baseline(mut self) -> Self {
        self.fusion = Fusion::None;
        self.gate = false;
        self.syntax.clear();
        self
    }
}
