//! `section.key = value` run files.
//!
//! Every key has a default except `run.seed`. Keys left empty in the
//! `model.*`, `downsampler.*` and `upsampler.*` sections fall back to the
//! preset named by `run.preset`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use blockpool::checks::preset_sizes;
use blockpool::model::{CharModuleSizes, Task, VariantName};
use blockpool::train::{EvalMetric, TrainConfig};
use blockpool::transformer::ModelConfig;
use blockpool::upsampler::Conditioning;
use blockpool::{Error, Result};
use blockpool_tensor::DType;

/// Known keys with their defaults.
pub const KEYS: &[(&str, &str)] = &[
    ("run.seed", ""),
    ("run.out", "runs/default"),
    ("run.variant", "sdd"),
    ("run.task", "translation"),
    ("run.preset", "tiny"),
    ("run.dtype", "f64"),
    ("data.train_src", ""),
    ("data.train_tgt", ""),
    ("data.valid_src", ""),
    ("data.valid_tgt", ""),
    ("data.train", ""),
    ("data.valid", ""),
    ("data.vocab", ""),
    ("model.d_model", ""),
    ("model.n_heads", ""),
    ("model.enc_layers", ""),
    ("model.dec_layers", ""),
    ("model.d_ff", ""),
    ("model.dropout", ""),
    ("model.max_positions", ""),
    ("downsampler.k", ""),
    ("downsampler.d_char", ""),
    ("downsampler.kernel", ""),
    ("downsampler.layers", ""),
    ("upsampler.d_slice", ""),
    ("upsampler.d_char_embed", ""),
    ("upsampler.hidden", ""),
    ("upsampler.lmax_bytes", ""),
    ("upsampler.conditioning", ""),
    ("train.batch_size", "16"),
    ("train.grad_accum", "1"),
    ("train.lr", "2e-4"),
    ("train.beta1", "0.9"),
    ("train.beta2", "0.999"),
    ("train.eps", "1e-8"),
    ("train.weight_decay", "0"),
    ("train.warmup_steps", "200"),
    ("train.patience", "10"),
    ("train.max_steps", "2000"),
    ("train.eval_every", "0"),
    ("train.eval_metric", "bleu"),
    ("train.max_blocks", "256"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d)
}

fn parse_assignment(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    Some((k.trim(), v.trim()))
}

impl RunConfig {
    /// Parses a run file and applies `key=value` overrides on top.
    pub fn parse(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        let mut values: BTreeMap<String, String> = KEYS.iter().map(|(k, d)| (k.to_string(), d.to_string())).collect();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let (key, value) = parse_assignment(line).ok_or_else(|| err("expected `section.key = value`".into()))?;
            if default_of(key).is_none() {
                return Err(err(format!("unknown key {key:?}")));
            }
            if let Some(prev) = seen.insert(key.to_string(), i + 1) {
                return Err(err(format!("{key:?} already set on line {prev}")));
            }
            values.insert(key.to_string(), value.to_string());
        }
        for o in overrides {
            let (key, value) = parse_assignment(o).ok_or_else(|| Error::Parse {
                path: "--override".into(),
                line: 0,
                msg: format!("expected key=value, got {o:?}"),
            })?;
            if default_of(key).is_none() {
                return Err(Error::Parse {
                    path: "--override".into(),
                    line: 0,
                    msg: format!("unknown key {key:?}"),
                });
            }
            values.insert(key.to_string(), value.to_string());
        }
        let cfg = RunConfig { values };
        if cfg.raw("run.seed").is_empty() {
            return Err(Error::Config("run.seed is mandatory".into()));
        }
        cfg.seed()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text, &path.display().to_string(), overrides)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        let v = self.raw(key);
        if v.is_empty() {
            return Ok(None);
        }
        v.parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{key} = {v:?} is not a valid value")))
    }

    fn get_or<T: FromStr>(&self, key: &str, fallback: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(fallback))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("run.seed")?.ok_or_else(|| Error::Config("run.seed is mandatory".into()))
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("run.out"))
    }

    pub fn variant(&self) -> Result<VariantName> {
        self.raw("run.variant").parse()
    }

    pub fn task(&self) -> Result<Task> {
        self.raw("run.task").parse()
    }

    pub fn dtype(&self) -> Result<DType> {
        DType::parse(self.raw("run.dtype")).ok_or_else(|| Error::Config(format!("unknown dtype {:?}", self.raw("run.dtype"))))
    }

    pub fn vocab_path(&self) -> Option<PathBuf> {
        self.path("data.vocab")
    }

    /// Training and optional validation files. Translation reads
    /// `*_src`/`*_tgt` pairs, classification reads `label<TAB>text` files.
    pub fn data_paths(&self) -> Result<DataPaths> {
        let need = |key: &str| self.path(key).ok_or_else(|| Error::Config(format!("{key} is required")));
        Ok(match self.task()? {
            Task::Translation => DataPaths::Parallel {
                train: (need("data.train_src")?, need("data.train_tgt")?),
                valid: match (self.path("data.valid_src"), self.path("data.valid_tgt")) {
                    (Some(s), Some(t)) => Some((s, t)),
                    (None, None) => None,
                    _ => return Err(Error::Config("data.valid_src and data.valid_tgt go together".into())),
                },
            },
            Task::Classification => DataPaths::Labeled {
                train: need("data.train")?,
                valid: self.path("data.valid"),
            },
        })
    }

    pub fn model_sizes(&self) -> Result<(ModelConfig, CharModuleSizes)> {
        let (m, s) = preset_sizes(self.raw("run.preset"))?;
        let model = ModelConfig {
            d_model: self.get_or("model.d_model", m.d_model)?,
            n_heads: self.get_or("model.n_heads", m.n_heads)?,
            n_enc_layers: self.get_or("model.enc_layers", m.n_enc_layers)?,
            n_dec_layers: self.get_or("model.dec_layers", m.n_dec_layers)?,
            d_ff: self.get_or("model.d_ff", m.d_ff)?,
            dropout: self.get_or("model.dropout", m.dropout)?,
            max_positions: self.get_or("model.max_positions", m.max_positions)?,
        };
        let conditioning = match self.raw("upsampler.conditioning") {
            "" => s.conditioning,
            "slice" => Conditioning::Slice,
            "repeat" => Conditioning::Repeat,
            other => return Err(Error::Config(format!("unknown conditioning {other:?}"))),
        };
        let sizes = CharModuleSizes {
            k: self.get_or("downsampler.k", s.k)?,
            d_char: self.get_or("downsampler.d_char", s.d_char)?,
            conv_kernel: self.get_or("downsampler.kernel", s.conv_kernel)?,
            conv_layers: self.get_or("downsampler.layers", s.conv_layers)?,
            d_slice: self.get_or("upsampler.d_slice", s.d_slice)?,
            d_char_embed: self.get_or("upsampler.d_char_embed", s.d_char_embed)?,
            lstm_hidden: self.get_or("upsampler.hidden", s.lstm_hidden)?,
            lmax_bytes: self.get_or("upsampler.lmax_bytes", s.lmax_bytes)?,
            conditioning,
        };
        Ok((model, sizes))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let metric: EvalMetric = self.raw("train.eval_metric").parse()?;
        let cfg = TrainConfig {
            batch_size: self.get_or("train.batch_size", d.batch_size)?,
            grad_accum: self.get_or("train.grad_accum", d.grad_accum)?,
            lr: self.get_or("train.lr", d.lr)?,
            beta1: self.get_or("train.beta1", d.beta1)?,
            beta2: self.get_or("train.beta2", d.beta2)?,
            eps: self.get_or("train.eps", d.eps)?,
            weight_decay: self.get_or("train.weight_decay", d.weight_decay)?,
            warmup_steps: self.get_or("train.warmup_steps", d.warmup_steps)?,
            patience: self.get_or("train.patience", d.patience)?,
            max_steps: self.get_or("train.max_steps", d.max_steps)?,
            eval_every: self.get_or("train.eval_every", d.eval_every)?,
            seed: self.seed()?,
            eval_metric: metric,
            max_blocks: self.get_or("train.max_blocks", d.max_blocks)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.values
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataPaths {
    Parallel {
        train: (PathBuf, PathBuf),
        valid: Option<(PathBuf, PathBuf)>,
    },
    Labeled {
        train: PathBuf,
        valid: Option<PathBuf>,
    },
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, overrides: &[&str]) -> Result<RunConfig> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        RunConfig::parse(text, "t.conf", &o)
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(parse("run.out = x\n", &[]), Err(Error::Config(_))));
        assert!(parse("run.seed = -1\n", &[]).is_err());
        assert_eq!(parse("run.seed = 9 # comment\n", &[]).unwrap().seed().unwrap(), 9);
    }

    #[test]
    fn unknown_and_duplicate_keys_name_the_line() {
        let e = parse("run.seed = 1\n\nmodel.width = 3\n", &[]).unwrap_err().to_string();
        assert!(e.starts_with("t.conf:3:"), "{e}");
        let e = parse("run.seed = 1\nrun.seed = 2\n", &[]).unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
        assert!(parse("run.seed = 1\n", &["train.nope=1"]).is_err());
        assert!(parse("run.seed = 1\n", &["no equals sign"]).is_err());
    }

    #[test]
    fn overrides_win_and_presets_fill_gaps() {
        let cfg = parse("run.seed = 1\nmodel.d_model = 48\ntrain.lr = 1e-3\n", &["train.lr=5e-4", "downsampler.k=6"]).unwrap();
        let t = cfg.train_config().unwrap();
        assert_eq!(t.lr, 5e-4);
        assert_eq!(t.seed, 1);
        let (m, s) = cfg.model_sizes().unwrap();
        assert_eq!(m.d_model, 48);
        assert_eq!(m.n_heads, ModelConfig::tiny().n_heads);
        assert_eq!(s.k, 6);
        assert!(cfg.resolved().contains("train.lr = 5e-4\n"));
        assert_eq!(cfg.to_json()["downsampler.k"], "6");
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let cfg = parse("run.seed = 1\ntrain.batch_size = 6\ntrain.grad_accum = 4\n", &[]).unwrap();
        assert!(matches!(cfg.train_config(), Err(Error::Config(_))));
        let cfg = parse("run.seed = 1\nmodel.d_model = wide\n", &[]).unwrap();
        assert!(matches!(cfg.model_sizes(), Err(Error::Config(_))));
        let cfg = parse("run.seed = 1\nrun.dtype = f16\n", &[]).unwrap();
        assert!(cfg.dtype().is_err());
    }

    #[test]
    fn data_paths_follow_the_task() {
        let cfg = parse("run.seed = 1\ndata.train_src = a\ndata.train_tgt = b\ndata.valid_src = c\n", &[]).unwrap();
        assert!(cfg.data_paths().is_err());
        let cfg = parse("run.seed = 1\nrun.task = classification\ndata.train = l.tsv\n", &[]).unwrap();
        assert_eq!(
            cfg.data_paths().unwrap(),
            DataPaths::Labeled {
                train: PathBuf::from("l.tsv"),
                valid: None
            }
        );
    }
}
