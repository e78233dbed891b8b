//! Experiment configuration: plain-text `key = value` lines grouped under
//! `[section]` headers, `#` comments. Unknown sections or keys are errors.
//!
//! ```text
//! seed = 1234
//!
//! [data]
//! num_speakers = 200
//! ...
//! [schedule]
//! dims = 4,8,16,32,64
//! weights = 1,1,1,1,1
//! ```
//!
//! [`ExperimentConfig::to_text`] writes every key in a fixed order, and
//! parsing that text yields the same config.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::CorpusSpec;
use crate::error::{MvecError, Result};
use crate::losses::{MarginConfig, MarginSign, PrefixSchedule};
use crate::model::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub targets_per_speaker: usize,
    pub nontargets_per_speaker: usize,
    /// Empty means "every schedule dim".
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSection {
    pub dims: Vec<usize>,
    pub k: usize,
    pub queries: usize,
    pub warmup_rounds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: CorpusSpec,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub bench: BenchSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let seed = 1234;
        Self {
            seed,
            data: CorpusSpec {
                seed,
                ..CorpusSpec::default()
            },
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            eval: EvalSection {
                targets_per_speaker: 15,
                nontargets_per_speaker: 40,
                dims: Vec::new(),
            },
            bench: BenchSection {
                dims: vec![64, 32, 16, 8, 4],
                k: 10,
                queries: 200,
                warmup_rounds: 1,
            },
        }
    }
}

fn parse_num<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| MvecError::Config(format!("[{section}] {key}: cannot parse '{value}'")))
}

fn parse_list<T: FromStr>(section: &str, key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| parse_num(section, key, v.trim()))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        let mut seen: HashSet<(String, String)> = HashSet::new();
        let mut dims: Option<Vec<usize>> = None;
        let mut weights: Option<Vec<f64>> = None;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !matches!(
                    name,
                    "data" | "model" | "train" | "schedule" | "margin" | "eval" | "bench"
                ) {
                    return Err(MvecError::Config(format!(
                        "line {}: unknown section [{name}]",
                        lineno + 1
                    )));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| {
                    MvecError::Config(format!("line {}: expected key = value", lineno + 1))
                })?;
            if !seen.insert((section.clone(), key.to_string())) {
                return Err(MvecError::Config(format!(
                    "line {}: duplicate key '{key}'",
                    lineno + 1
                )));
            }
            let s = section.as_str();
            let d = &mut cfg.data;
            let t = &mut cfg.train;
            match (s, key) {
                ("", "seed") => cfg.seed = parse_num(s, key, value)?,
                ("data", "num_speakers") => d.num_speakers = parse_num(s, key, value)?,
                ("data", "utts_per_speaker") => d.utts_per_speaker = parse_num(s, key, value)?,
                ("data", "eval_utts_per_speaker") => {
                    d.eval_utts_per_speaker = parse_num(s, key, value)?
                }
                ("data", "frames_per_utt") => d.frames_per_utt = parse_num(s, key, value)?,
                ("data", "feat_dim") => d.feat_dim = parse_num(s, key, value)?,
                ("data", "intra_spread") => d.intra_spread = parse_num(s, key, value)?,
                ("data", "channel_spread") => d.channel_spread = parse_num(s, key, value)?,
                ("model", "hidden_dim") => t.hidden_dim = parse_num(s, key, value)?,
                ("model", "embed_dim") => t.embed_dim = parse_num(s, key, value)?,
                ("train", "epochs") => t.epochs = parse_num(s, key, value)?,
                ("train", "batch_size") => t.batch_size = parse_num(s, key, value)?,
                ("train", "learn_rate") => t.learn_rate = parse_num(s, key, value)?,
                ("train", "momentum") => t.momentum = parse_num(s, key, value)?,
                ("schedule", "dims") => dims = Some(parse_list(s, key, value)?),
                ("schedule", "weights") => weights = Some(parse_list(s, key, value)?),
                ("margin", "scale") => t.margin.scale = parse_num(s, key, value)?,
                ("margin", "margin") => t.margin.margin = parse_num(s, key, value)?,
                ("margin", "sign") => t.margin.sign = MarginSign::parse(value)?,
                ("eval", "targets_per_speaker") => {
                    cfg.eval.targets_per_speaker = parse_num(s, key, value)?
                }
                ("eval", "nontargets_per_speaker") => {
                    cfg.eval.nontargets_per_speaker = parse_num(s, key, value)?
                }
                ("eval", "dims") => cfg.eval.dims = parse_list(s, key, value)?,
                ("bench", "dims") => cfg.bench.dims = parse_list(s, key, value)?,
                ("bench", "k") => cfg.bench.k = parse_num(s, key, value)?,
                ("bench", "queries") => cfg.bench.queries = parse_num(s, key, value)?,
                ("bench", "warmup_rounds") => cfg.bench.warmup_rounds = parse_num(s, key, value)?,
                _ => {
                    let where_ = if s.is_empty() {
                        String::new()
                    } else {
                        format!("[{s}] ")
                    };
                    return Err(MvecError::Config(format!(
                        "line {}: unknown key {where_}'{key}'",
                        lineno + 1
                    )));
                }
            }
        }

        let dims = dims.unwrap_or_else(|| cfg.train.schedule.dims().to_vec());
        let weights = match weights {
            Some(w) => w,
            None if dims.as_slice() == cfg.train.schedule.dims() => {
                cfg.train.schedule.weights().to_vec()
            }
            None => vec![1.0; dims.len()],
        };
        cfg.train.schedule = PrefixSchedule::new(dims, weights)?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Propagates one seed to every consumer.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        let full = self.train.embed_dim;
        let bad_dim = |m: &usize| *m == 0 || *m > full;
        if self.eval.dims.iter().any(bad_dim) || self.bench.dims.iter().any(bad_dim) {
            return Err(MvecError::Config(format!(
                "eval/bench dims must lie in 1..={full}"
            )));
        }
        if self.bench.k == 0 || self.bench.queries == 0 {
            return Err(MvecError::Config("bench k and queries must be >= 1".into()));
        }
        Ok(())
    }

    /// Dims swept by `eval-eer`.
    pub fn eval_dims(&self) -> Vec<usize> {
        if self.eval.dims.is_empty() {
            self.train.schedule.dims().to_vec()
        } else {
            self.eval.dims.clone()
        }
    }

    /// Normalized text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let t = &self.train;
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "num_speakers = {}", d.num_speakers);
        let _ = writeln!(s, "utts_per_speaker = {}", d.utts_per_speaker);
        let _ = writeln!(s, "eval_utts_per_speaker = {}", d.eval_utts_per_speaker);
        let _ = writeln!(s, "frames_per_utt = {}", d.frames_per_utt);
        let _ = writeln!(s, "feat_dim = {}", d.feat_dim);
        let _ = writeln!(s, "intra_spread = {}", d.intra_spread);
        let _ = writeln!(s, "channel_spread = {}", d.channel_spread);
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "hidden_dim = {}", t.hidden_dim);
        let _ = writeln!(s, "embed_dim = {}", t.embed_dim);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "learn_rate = {}", t.learn_rate);
        let _ = writeln!(s, "momentum = {}", t.momentum);
        let _ = writeln!(s, "\n[schedule]");
        let _ = writeln!(s, "dims = {}", join(t.schedule.dims()));
        let _ = writeln!(s, "weights = {}", join(t.schedule.weights()));
        let _ = writeln!(s, "\n[margin]");
        let _ = writeln!(s, "scale = {}", t.margin.scale);
        let _ = writeln!(s, "margin = {}", t.margin.margin);
        let _ = writeln!(s, "sign = {}", t.margin.sign.as_str());
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(s, "targets_per_speaker = {}", self.eval.targets_per_speaker);
        let _ = writeln!(
            s,
            "nontargets_per_speaker = {}",
            self.eval.nontargets_per_speaker
        );
        let _ = writeln!(s, "dims = {}", join(&self.eval.dims));
        let _ = writeln!(s, "\n[bench]");
        let _ = writeln!(s, "dims = {}", join(&self.bench.dims));
        let _ = writeln!(s, "k = {}", self.bench.k);
        let _ = writeln!(s, "queries = {}", self.bench.queries);
        let _ = writeln!(s, "warmup_rounds = {}", self.bench.warmup_rounds);
        s
    }

    pub fn margin(&self) -> MarginConfig {
        self.train.margin
    }
}
