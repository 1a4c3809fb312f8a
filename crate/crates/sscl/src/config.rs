//! Plain-text experiment configuration.
//!
//! One `key = value` per line, dotted keys for sections, `#` starts a
//! comment. Unknown keys are errors. A `preset` line, if present, must come
//! first and preloads a dataset profile that later lines override.
//!
//! ```text
//! preset = bodmas-like
//! name = full
//! seeds = 0,1,2
//! memory.bma = 0.8
//! gpm.enabled = false
//! ```

use std::path::PathBuf;
use std::str::FromStr;

use crate::active::{DistanceStrategy, OracleKind, Ranking};
use crate::data::StreamConfig;
use crate::error::{Error, Result};
use crate::trainer::{fmt_f64, ExperimentConfig, StreamSource};

pub const PRESETS: [&str; 3] = ["bodmas-like", "androzoo-like", "apigraph-like"];

/// The default configuration with a dataset profile's hyperparameters.
pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let (b_m, bma, lr, wd, tau_max, gpm_energy) = match name {
        "bodmas-like" => (0.5, 0.8, 1e-1, 1e-9, 0.09, 0.99),
        "androzoo-like" => (0.3, 0.4, 1e-2, 1e-1, 0.05, 0.10),
        "apigraph-like" => (0.6, 0.7, 1e-1, 1e-4, 0.05, 0.10),
        _ => return None,
    };
    cfg.memory.b_m_frac = b_m;
    cfg.memory.bma = bma;
    cfg.optimizer.learning_rate = lr;
    cfg.optimizer.weight_decay = wd;
    cfg.threshold.tau_max = tau_max;
    cfg.gpm.energy = gpm_energy;
    Some(cfg)
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn parse_num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("not a valid number: {v:?}"))
}

fn parse_fraction(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse_num(v)?;
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err(format!("{x} is outside [0, 1]"))
    }
}

fn parse_positive(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse_num(v)?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{x} must be a positive number"))
    }
}

fn parse_non_negative(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse_num(v)?;
    if x >= 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{x} must be >= 0"))
    }
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|p| parse_num(p.trim())).collect()
}

fn parse_optional_f64(v: &str) -> std::result::Result<Option<f64>, String> {
    if v == "auto" {
        Ok(None)
    } else {
        parse_positive(v).map(Some)
    }
}

fn parse_oracle(v: &str) -> std::result::Result<OracleKind, String> {
    match v {
        "ground_truth" => Ok(OracleKind::GroundTruth),
        "self_label" => Ok(OracleKind::SelfLabel),
        _ => match v.strip_prefix("noisy:") {
            Some(p) => parse_fraction(p).map(OracleKind::Noisy),
            None => Err(format!(
                "expected ground_truth, self_label or noisy:<p>, got {v:?}"
            )),
        },
    }
}

fn stream_mut(cfg: &mut ExperimentConfig) -> std::result::Result<&mut StreamConfig, String> {
    match &mut cfg.stream {
        StreamSource::Synthetic(s) => Ok(s),
        StreamSource::Csv(_) => Err("only applies to a synthetic stream".into()),
    }
}

fn set(cfg: &mut ExperimentConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    match key {
        "name" => cfg.name = v.to_string(),
        "seeds" => {
            cfg.seeds = parse_list(v)?;
        }
        "seen_tasks" => {
            let n: usize = parse_num(v)?;
            if n == 0 {
                return Err("must be >= 1".into());
            }
            cfg.seen_tasks = n;
            if let StreamSource::Synthetic(s) = &mut cfg.stream {
                s.seen_tasks = n;
            }
        }
        "label_ratio" => {
            cfg.label_ratio = parse_fraction(v)?;
            if let StreamSource::Synthetic(s) = &mut cfg.stream {
                s.label_ratio = cfg.label_ratio;
            }
        }
        "budget" => cfg.budget = parse_num(v)?,
        "oracle" => cfg.oracle = parse_oracle(v)?,
        "noise.ratio" => {
            cfg.noise.ratio = parse_fraction(v)?;
            if let StreamSource::Synthetic(s) = &mut cfg.stream {
                s.noise_ratio = cfg.noise.ratio;
            }
        }
        "noise.seen" => cfg.noise.seen = parse_bool(v)?,
        "delay.seen" => cfg.delay.seen = parse_num(v)?,
        "delay.unseen" => cfg.delay.unseen = parse_num(v)?,
        "delay.pending_as_unlabeled" => cfg.delay.pending_as_unlabeled = parse_bool(v)?,
        "model.hidden" => {
            let h: Vec<usize> = parse_list(v)?;
            if h.is_empty() || h.contains(&0) {
                return Err("widths must be positive".into());
            }
            cfg.hidden = h;
        }
        "model.dropout" => {
            let p = parse_fraction(v)?;
            if p >= 1.0 {
                return Err("must be below 1".into());
            }
            cfg.dropout = p;
        }
        "model.batchnorm" => cfg.batchnorm = parse_bool(v)?,
        "optimizer.learning_rate" => cfg.optimizer.learning_rate = parse_positive(v)?,
        "optimizer.weight_decay" => cfg.optimizer.weight_decay = parse_non_negative(v)?,
        "optimizer.batch_size" => {
            cfg.optimizer.batch_size = parse_num(v)?;
            if cfg.optimizer.batch_size == 0 {
                return Err("must be >= 1".into());
            }
        }
        "optimizer.epochs_per_task" => {
            cfg.optimizer.epochs_per_task = parse_num(v)?;
            if cfg.optimizer.epochs_per_task == 0 {
                return Err("must be >= 1".into());
            }
        }
        "optimizer.patience" => cfg.optimizer.patience = parse_num(v)?,
        "threshold.tau_max" => cfg.threshold.tau_max = parse_positive(v)?,
        "threshold.beta" => cfg.threshold.beta = parse_non_negative(v)?,
        "threshold.tau_init" => cfg.threshold.tau_init = parse_optional_f64(v)?,
        "threshold.step" => cfg.threshold.step = parse_optional_f64(v)?,
        "gpm.enabled" => cfg.gpm.enabled = parse_bool(v)?,
        "gpm.energy" => {
            let e = parse_fraction(v)?;
            if e == 0.0 {
                return Err("must be > 0".into());
            }
            cfg.gpm.energy = e;
        }
        "gpm.layerwise" => cfg.gpm.layerwise = parse_bool(v)?,
        "gpm.max_rank" => {
            cfg.gpm.max_rank = if v == "none" { None } else { Some(parse_num(v)?) }
        }
        "gpm.scope" => cfg.gpm.scope = v.parse()?,
        "memory.replay" => cfg.memory.replay = parse_bool(v)?,
        "memory.b_m_frac" => cfg.memory.b_m_frac = parse_fraction(v)?,
        "memory.bma" => cfg.memory.bma = parse_fraction(v)?,
        "repspace.energy" => {
            let e = parse_fraction(v)?;
            if e == 0.0 {
                return Err("must be > 0".into());
            }
            cfg.repspace_energy = e;
        }
        "repspace.svd" => cfg.svd_enabled = parse_bool(v)?,
        "active.distance" => {
            cfg.distance = match v {
                "all_samples" => DistanceStrategy::AllSamples,
                "centroid" => DistanceStrategy::Centroid,
                _ => return Err(format!("expected all_samples or centroid, got {v:?}")),
            }
        }
        "active.ranking" => {
            cfg.ranking = match v {
                "closest" => Ranking::Closest,
                "farthest" => Ranking::Farthest,
                _ => return Err(format!("expected closest or farthest, got {v:?}")),
            }
        }
        "pairing.stop_grad_exemplar" => cfg.stop_grad_exemplar = parse_bool(v)?,
        "eval.pre_adaptation" => cfg.eval.pre_adaptation = parse_bool(v)?,
        "eval.retrospective" => cfg.eval.retrospective = parse_bool(v)?,
        "eval.fpr_target" => cfg.eval.fpr_target = parse_fraction(v)?,
        "checkpoint.every_task" => cfg.checkpoint.every_task = parse_bool(v)?,
        "checkpoint.gpm" => cfg.checkpoint.gpm = parse_bool(v)?,
        "stream.source" => match v {
            "synthetic" => {
                if !matches!(cfg.stream, StreamSource::Synthetic(_)) {
                    cfg.stream = StreamSource::Synthetic(StreamConfig {
                        seen_tasks: cfg.seen_tasks,
                        label_ratio: cfg.label_ratio,
                        noise_ratio: cfg.noise.ratio,
                        ..StreamConfig::default()
                    });
                }
            }
            "csv" => {
                if !matches!(cfg.stream, StreamSource::Csv(_)) {
                    cfg.stream = StreamSource::Csv(PathBuf::new());
                }
            }
            _ => return Err(format!("expected synthetic or csv, got {v:?}")),
        },
        "stream.path" => match &mut cfg.stream {
            StreamSource::Csv(p) => *p = PathBuf::from(v),
            StreamSource::Synthetic(_) => return Err("needs stream.source = csv first".into()),
        },
        "stream.n_tasks" => {
            let n: usize = parse_num(v)?;
            if n == 0 {
                return Err("must be >= 1".into());
            }
            stream_mut(cfg)?.n_tasks = n;
        }
        "stream.samples_per_task" => {
            let n: usize = parse_num(v)?;
            if n < 2 {
                return Err("must be >= 2".into());
            }
            stream_mut(cfg)?.samples_per_task = n;
        }
        "stream.class_imbalance" => {
            let (b, m) = v
                .split_once(':')
                .ok_or_else(|| format!("expected benign:malware, got {v:?}"))?;
            let pair = (parse_num(b.trim())?, parse_num(m.trim())?);
            if pair == (0, 0) {
                return Err("needs a positive part".into());
            }
            stream_mut(cfg)?.class_imbalance = pair;
        }
        "stream.feature_dim" => {
            let n: usize = parse_num(v)?;
            if n == 0 {
                return Err("must be >= 1".into());
            }
            stream_mut(cfg)?.feature_dim = n;
        }
        "stream.shift" => stream_mut(cfg)?.shift = parse_non_negative(v)?,
        "stream.spread" => stream_mut(cfg)?.spread = parse_positive(v)?,
        "stream.separation" => stream_mut(cfg)?.separation = parse_non_negative(v)?,
        "stream.malware_drift_alignment" => {
            let a: f64 = parse_num(v)?;
            if !(-1.0..=1.0).contains(&a) {
                return Err(format!("{a} is outside [-1, 1]"));
            }
            stream_mut(cfg)?.malware_drift_alignment = a;
        }
        "stream.drift_coupling" => {
            let c: f64 = parse_num(v)?;
            if !(-1.0..=1.0).contains(&c) {
                return Err(format!("{c} is outside [-1, 1]"));
            }
            stream_mut(cfg)?.drift_coupling = c;
        }
        "stream.seed" => stream_mut(cfg)?.seed = parse_num(v)?,
        _ => return Err("unknown key".into()),
    }
    Ok(())
}

/// Applies `key = value` lines on top of `base`.
pub fn apply(base: ExperimentConfig, text: &str) -> Result<ExperimentConfig> {
    let mut cfg = base;
    let mut first_key = true;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |field: &str, reason: String| Error::ConfigParse {
            line: line_no,
            field: field.to_string(),
            reason,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err("", "expected key = value".into()))?;
        let (key, value) = (key.trim(), value.trim());
        if key == "preset" {
            if !first_key {
                return Err(err(key, "preset must be the first setting".into()));
            }
            cfg = preset(value).ok_or_else(|| {
                err(key, format!("unknown preset {value:?}; expected one of {}", PRESETS.join(", ")))
            })?;
        } else {
            set(&mut cfg, key, value).map_err(|reason| err(key, reason))?;
        }
        first_key = false;
    }
    Ok(cfg)
}

/// Parses a config file's text on top of the defaults and validates it.
pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let cfg = apply(ExperimentConfig::default(), text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt_f64(v: Option<f64>) -> String {
    v.map_or("auto".into(), fmt_f64)
}

/// Every field as `key = value`, in a form [`parse`] reads back to an equal
/// config.
pub fn to_snapshot(cfg: &ExperimentConfig) -> String {
    let mut lines: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: String| lines.push((k.to_string(), v));
    put("name", cfg.name.clone());
    match &cfg.stream {
        StreamSource::Synthetic(s) => {
            put("stream.source", "synthetic".into());
            put("stream.n_tasks", s.n_tasks.to_string());
            put("stream.samples_per_task", s.samples_per_task.to_string());
            put(
                "stream.class_imbalance",
                format!("{}:{}", s.class_imbalance.0, s.class_imbalance.1),
            );
            put("stream.feature_dim", s.feature_dim.to_string());
            put("stream.shift", fmt_f64(s.shift));
            put("stream.spread", fmt_f64(s.spread));
            put("stream.separation", fmt_f64(s.separation));
            put("stream.malware_drift_alignment", fmt_f64(s.malware_drift_alignment));
            put("stream.drift_coupling", fmt_f64(s.drift_coupling));
            put("stream.seed", s.seed.to_string());
        }
        StreamSource::Csv(p) => {
            put("stream.source", "csv".into());
            put("stream.path", p.display().to_string());
        }
    }
    put("seen_tasks", cfg.seen_tasks.to_string());
    put("label_ratio", fmt_f64(cfg.label_ratio));
    put("budget", cfg.budget.to_string());
    put(
        "oracle",
        match cfg.oracle {
            OracleKind::GroundTruth => "ground_truth".into(),
            OracleKind::SelfLabel => "self_label".into(),
            OracleKind::Noisy(p) => format!("noisy:{}", fmt_f64(p)),
        },
    );
    put("noise.ratio", fmt_f64(cfg.noise.ratio));
    put("noise.seen", cfg.noise.seen.to_string());
    put("delay.seen", cfg.delay.seen.to_string());
    put("delay.unseen", cfg.delay.unseen.to_string());
    put("delay.pending_as_unlabeled", cfg.delay.pending_as_unlabeled.to_string());
    put("model.hidden", join(&cfg.hidden));
    put("model.dropout", fmt_f64(cfg.dropout));
    put("model.batchnorm", cfg.batchnorm.to_string());
    let o = &cfg.optimizer;
    put("optimizer.learning_rate", fmt_f64(o.learning_rate));
    put("optimizer.weight_decay", fmt_f64(o.weight_decay));
    put("optimizer.batch_size", o.batch_size.to_string());
    put("optimizer.epochs_per_task", o.epochs_per_task.to_string());
    put("optimizer.patience", o.patience.to_string());
    put("threshold.tau_max", fmt_f64(cfg.threshold.tau_max));
    put("threshold.beta", fmt_f64(cfg.threshold.beta));
    put("threshold.tau_init", opt_f64(cfg.threshold.tau_init));
    put("threshold.step", opt_f64(cfg.threshold.step));
    put("gpm.enabled", cfg.gpm.enabled.to_string());
    put("gpm.energy", fmt_f64(cfg.gpm.energy));
    put("gpm.layerwise", cfg.gpm.layerwise.to_string());
    put(
        "gpm.max_rank",
        cfg.gpm.max_rank.map_or("none".into(), |r| r.to_string()),
    );
    put("gpm.scope", cfg.gpm.scope.name().to_string());
    put("memory.replay", cfg.memory.replay.to_string());
    put("memory.b_m_frac", fmt_f64(cfg.memory.b_m_frac));
    put("memory.bma", fmt_f64(cfg.memory.bma));
    put("repspace.energy", fmt_f64(cfg.repspace_energy));
    put("repspace.svd", cfg.svd_enabled.to_string());
    put(
        "active.distance",
        match cfg.distance {
            DistanceStrategy::AllSamples => "all_samples",
            DistanceStrategy::Centroid => "centroid",
        }
        .into(),
    );
    put(
        "active.ranking",
        match cfg.ranking {
            Ranking::Closest => "closest",
            Ranking::Farthest => "farthest",
        }
        .into(),
    );
    put("pairing.stop_grad_exemplar", cfg.stop_grad_exemplar.to_string());
    put("seeds", join(&cfg.seeds));
    put("eval.pre_adaptation", cfg.eval.pre_adaptation.to_string());
    put("eval.retrospective", cfg.eval.retrospective.to_string());
    put("eval.fpr_target", fmt_f64(cfg.eval.fpr_target));
    put("checkpoint.every_task", cfg.checkpoint.every_task.to_string());
    put("checkpoint.gpm", cfg.checkpoint.gpm.to_string());
    let mut out = String::new();
    for (k, v) in lines {
        out.push_str(&k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    }
    out
}
