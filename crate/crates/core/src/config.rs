//! Flat `key = value` run configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::decode::{DecodeOptions, Strategy};
use crate::error::{Error, Result};
use crate::eval::Protocol;
use crate::kg::{MetaKind, Split};
use crate::model::ModelConfig;
use crate::train::TrainPlan;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoding {
    Beam,
    Sample,
}

impl FromStr for Decoding {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "beam" => Ok(Decoding::Beam),
            "sample" => Ok(Decoding::Sample),
            _ => Err(format!("expected beam or sample, got {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub meta_kind: MetaKind,

    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,

    pub batch_size: usize,
    pub lr: f64,
    pub desc_len: usize,
    pub seq2seq_dropout_p: f64,
    pub max_epochs: u64,
    pub eval_every: u64,
    pub beam_width_for_valid: usize,
    pub seed: u64,

    pub beam_width: usize,
    pub constrained: bool,
    /// Splits whose answers are blocked during decoding; empty means none.
    pub block_splits: Vec<Split>,
    pub metrics_n: Vec<usize>,
    pub eval_split: Split,
    pub threads: usize,
    pub decoding: Decoding,
    pub temperature: f64,
    pub resume: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let p = TrainPlan::default();
        RunConfig {
            data_dir: PathBuf::new(),
            out_dir: PathBuf::new(),
            meta_kind: MetaKind::None,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_enc_layers: m.n_enc_layers,
            n_dec_layers: m.n_dec_layers,
            d_ff: m.d_ff,
            max_len: m.max_len,
            batch_size: p.batch_size,
            lr: p.lr,
            desc_len: p.desc_len,
            seq2seq_dropout_p: p.seq2seq_dropout_p,
            max_epochs: p.max_epochs,
            eval_every: p.eval_every,
            beam_width_for_valid: p.beam_width_for_valid,
            seed: p.seed,
            beam_width: 40,
            constrained: true,
            block_splits: Split::ALL.to_vec(),
            metrics_n: vec![1, 3, 10],
            eval_split: Split::Test,
            threads: 1,
            decoding: Decoding::Beam,
            temperature: 1.0,
            resume: false,
        }
    }
}

const REQUIRED: [&str; 2] = ["data_dir", "out_dir"];

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("bad list element {s:?}")))
        .collect()
}

fn parse_splits(v: &str) -> std::result::Result<Vec<Split>, String> {
    if v == "none" {
        return Ok(Vec::new());
    }
    let splits: Vec<Split> = parse_list(v)?;
    if splits.is_empty() {
        return Err("empty split list (use none)".into());
    }
    Ok(splits)
}

fn typed<T: FromStr>(v: &str, what: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("expected {what}, got {v:?}"))
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str, base: &Path) -> std::result::Result<(), String> {
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        match key {
            "data_dir" => self.data_dir = path(v),
            "out_dir" => self.out_dir = path(v),
            "meta_kind" => self.meta_kind = v.parse()?,
            "d_model" => self.d_model = typed(v, "an integer")?,
            "n_heads" => self.n_heads = typed(v, "an integer")?,
            "n_enc_layers" => self.n_enc_layers = typed(v, "an integer")?,
            "n_dec_layers" => self.n_dec_layers = typed(v, "an integer")?,
            "d_ff" => self.d_ff = typed(v, "an integer")?,
            "max_len" => self.max_len = typed(v, "an integer")?,
            "batch_size" => self.batch_size = typed(v, "an integer")?,
            "lr" => self.lr = typed(v, "a number")?,
            "desc_len" => self.desc_len = typed(v, "an integer")?,
            "seq2seq_dropout_p" => self.seq2seq_dropout_p = typed(v, "a number")?,
            "max_epochs" => self.max_epochs = typed(v, "an integer")?,
            "eval_every" => self.eval_every = typed(v, "an integer")?,
            "beam_width_for_valid" => self.beam_width_for_valid = typed(v, "an integer")?,
            "seed" => self.seed = typed(v, "an integer")?,
            "beam_width" => self.beam_width = typed(v, "an integer")?,
            "constrained" => self.constrained = parse_bool(v)?,
            "block_splits" => self.block_splits = parse_splits(v)?,
            "metrics_n" => self.metrics_n = parse_list(v)?,
            "eval_split" => self.eval_split = v.parse()?,
            "threads" => self.threads = typed(v, "an integer")?,
            "decoding" => self.decoding = v.parse()?,
            "temperature" => self.temperature = typed(v, "a number")?,
            "resume" => self.resume = parse_bool(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parse config text. Relative paths are resolved against `base`.
    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Config {
            path: origin.to_string(),
            line,
            message,
        };
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(i + 1, format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            cfg.set(k, v, base).map_err(|m| err(i + 1, format!("{k}: {m}")))?;
            seen.insert(k.to_string());
        }
        for key in REQUIRED {
            if !seen.contains(key) {
                return Err(err(0, format!("missing required key {key}")));
            }
        }
        cfg.check().map_err(|m| err(0, m))?;
        Ok(cfg)
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.beam_width == 0 {
            return Err("beam_width must be positive".into());
        }
        if self.metrics_n.is_empty() || self.metrics_n.contains(&0) {
            return Err("metrics_n must list positive cutoffs".into());
        }
        if self.threads == 0 {
            return Err("threads must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return Err("temperature must be positive".into());
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize, n_relations: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            d_ff: self.d_ff,
            max_len: self.max_len,
            vocab_size,
            n_relations,
            seq2seq_dropout_p: self.seq2seq_dropout_p,
            seed: self.seed,
        }
    }

    pub fn train_plan(&self) -> TrainPlan {
        TrainPlan {
            batch_size: self.batch_size,
            lr: self.lr,
            desc_len: self.desc_len,
            seq2seq_dropout_p: self.seq2seq_dropout_p,
            max_epochs: self.max_epochs,
            eval_every: self.eval_every,
            beam_width_for_valid: self.beam_width_for_valid,
            seed: self.seed,
        }
    }

    /// Evaluation protocol at beam width `k`.
    pub fn protocol(&self, k: usize) -> Protocol {
        Protocol {
            decode: DecodeOptions {
                beam_width: k,
                constrained: self.constrained,
                strategy: match self.decoding {
                    Decoding::Beam => Strategy::Beam,
                    Decoding::Sample => Strategy::Sample {
                        temperature: self.temperature,
                        seed: self.seed,
                    },
                },
            },
            block_splits: self.block_splits.clone(),
            hits_at: self.metrics_n.clone(),
            seed: self.seed,
            threads: self.threads,
        }
    }

    /// Protocol used for valid-set model selection.
    pub fn valid_protocol(&self) -> Protocol {
        Protocol {
            decode: DecodeOptions {
                beam_width: self.beam_width_for_valid,
                constrained: true,
                strategy: Strategy::Beam,
            },
            ..self.protocol(self.beam_width_for_valid)
        }
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    RunConfig::parse(&text, &path.display().to_string(), base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(&format!("data_dir = d\nout_dir = /o\n{text}"), "c.cfg", Path::new("/base"))
    }

    fn message(e: Error) -> (usize, String) {
        match e {
            Error::Config { line, message, .. } => (line, message),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn values_and_defaults() {
        let c = parse("beam_width = 40\nseq2seq_dropout_p = 0.3  # grid value\n").unwrap();
        assert_eq!(c.beam_width, 40);
        assert_eq!(c.seq2seq_dropout_p, 0.3);
        assert_eq!(c.data_dir, PathBuf::from("/base/d"));
        assert_eq!(c.out_dir, PathBuf::from("/o"));
        assert_eq!(c.metrics_n, vec![1, 3, 10]);
        assert_eq!(c.threads, 1);
        assert_eq!(c.block_splits, Split::ALL.to_vec());
    }

    #[test]
    fn later_keys_win() {
        let c = parse("seed = 1\nseed = 7\nblock_splits = train\nmetrics_n = 1,5,10\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.block_splits, vec![Split::Train]);
        assert_eq!(c.metrics_n, vec![1, 5, 10]);
        assert!(parse("block_splits = none").unwrap().block_splits.is_empty());
    }

    #[test]
    fn errors() {
        let (line, m) = message(parse("beam_width = forty").unwrap_err());
        assert_eq!(line, 3);
        assert!(m.contains("beam_width"), "{m}");
        let (_, m) = message(parse("beam_widht = 4").unwrap_err());
        assert!(m.contains("unknown key"), "{m}");
        let (line, m) = message(RunConfig::parse("out_dir = o\n", "c", Path::new(".")).unwrap_err());
        assert_eq!(line, 0);
        assert!(m.contains("data_dir"), "{m}");
        let (_, m) = message(parse("constrained = yes").unwrap_err());
        assert!(m.contains("true or false"), "{m}");
        assert!(parse("eval_split = dev").is_err());
        assert!(parse("just text").is_err());
    }
}
