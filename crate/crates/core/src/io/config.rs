//! `key = value` run configuration files.
//!
//! Blank lines and `#` comments are ignored; omitted keys keep their defaults;
//! unknown or repeated keys are errors. Reals accept a fraction such as `1/3`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::graph::ActivationKind;
use crate::peft::PeftKind;
use crate::pipeline::TrainConfig;

pub fn load_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::ConfigParse { line: line_no, msg };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if value.is_empty() {
            return Err(parse_err(format!("`{key}` has no value")));
        }
        if !seen.insert(key.to_string()) {
            return Err(parse_err(format!("`{key}` is set twice")));
        }
        set(&mut cfg, key, value).map_err(parse_err)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set(cfg: &mut TrainConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    match key {
        "layers" => cfg.model.layers = int(key, v)?,
        "hidden" => cfg.model.hidden = int(key, v)?,
        "heads" => cfg.model.heads = int(key, v)?,
        "ffn_dim" => cfg.model.ffn_dim = int(key, v)?,
        "vocab_size" => {
            cfg.model.vocab_size = int(key, v)?;
            cfg.task.vocab_size = cfg.model.vocab_size;
        }
        "max_seq" => cfg.model.max_seq = int(key, v)?,
        "num_classes" => {
            cfg.model.num_classes = int(key, v)?;
            cfg.task.num_classes = cfg.model.num_classes;
        }
        "activation" => {
            cfg.model.activation =
                ActivationKind::parse(v).ok_or_else(|| format!("`activation` must be relu or gelu, got `{v}`"))?
        }
        "causal" => cfg.model.causal = boolean(key, v)?,
        "ln_eps" => cfg.model.ln_eps = real(key, v)?,
        "task" => {
            cfg.task.kind = TaskKind::parse(v)
                .ok_or_else(|| format!("`task` must be parity, majority or pattern-match, got `{v}`"))?
        }
        "seq_len" => cfg.task.seq_len = int(key, v)?,
        "train_size" => cfg.task.train_size = int(key, v)?,
        "eval_size" => cfg.task.eval_size = int(key, v)?,
        "data_seed" => cfg.task.seed = int(key, v)?,
        "peft" => {
            cfg.peft.kind = PeftKind::parse(v).ok_or_else(|| format!("`peft` must be lora or adapter, got `{v}`"))?
        }
        "rank" => cfg.peft.rank = int(key, v)?,
        "lora_scale" => cfg.peft.scale = real(key, v)?,
        "total_steps" => cfg.total_steps = int(key, v)?,
        "estimation_steps" => cfg.estimation_steps = int(key, v)?,
        "batch_size" => cfg.batch_size = int(key, v)?,
        "lr_estimation" => cfg.lr_estimation = real(key, v)?,
        "lr_finetune" => cfg.lr_finetune = real(key, v)?,
        "beta1" => cfg.adam.beta1 = real(key, v)?,
        "beta2" => cfg.adam.beta2 = real(key, v)?,
        "adam_eps" => cfg.adam.eps = real(key, v)?,
        "weight_decay" => cfg.adam.weight_decay = real(key, v)?,
        "warmup_frac" => cfg.warmup_frac = real(key, v)?,
        "rho_a" => cfg.rho_a = real(key, v)?,
        "rho_f" => cfg.rho_f = real(key, v)?,
        "rho_m" => cfg.rho_m = real(key, v)?,
        "rho_r" => cfg.rho_r = real(key, v)?,
        "lambda_a" => cfg.penalty.lambda_a = real(key, v)?,
        "lambda_f" => cfg.penalty.lambda_f = real(key, v)?,
        "seed" => cfg.seed = int(key, v)?,
        "foundation_seed" => cfg.foundation_seed = int(key, v)?,
        _ => return Err(format!("unknown key `{key}`")),
    }
    Ok(())
}

fn int<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("`{key}` expects a non-negative integer, got `{v}`"))
}

fn real(key: &str, v: &str) -> std::result::Result<f64, String> {
    let bad = || format!("`{key}` expects a number, got `{v}`");
    let x = match v.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| bad())?;
            let d: f64 = d.trim().parse().map_err(|_| bad())?;
            n / d
        }
        None => v.parse().map_err(|_| bad())?,
    };
    if x.is_finite() {
        Ok(x)
    } else {
        Err(bad())
    }
}

fn boolean(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{key}` expects true or false, got `{v}`")),
    }
}

/// Every key with its resolved value, in the file format; parsing it back gives the same config.
pub fn render_config(cfg: &TrainConfig) -> String {
    let m = &cfg.model;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("layers", m.layers.to_string());
    kv("hidden", m.hidden.to_string());
    kv("heads", m.heads.to_string());
    kv("ffn_dim", m.ffn_dim.to_string());
    kv("vocab_size", m.vocab_size.to_string());
    kv("max_seq", m.max_seq.to_string());
    kv("num_classes", m.num_classes.to_string());
    kv("activation", m.activation.name().to_string());
    kv("causal", m.causal.to_string());
    kv("ln_eps", format!("{:?}", m.ln_eps));
    kv("task", cfg.task.kind.name().to_string());
    kv("seq_len", cfg.task.seq_len.to_string());
    kv("train_size", cfg.task.train_size.to_string());
    kv("eval_size", cfg.task.eval_size.to_string());
    kv("data_seed", cfg.task.seed.to_string());
    kv("peft", cfg.peft.kind.name().to_string());
    kv("rank", cfg.peft.rank.to_string());
    kv("lora_scale", format!("{:?}", cfg.peft.scale));
    kv("total_steps", cfg.total_steps.to_string());
    kv("estimation_steps", cfg.estimation_steps.to_string());
    kv("batch_size", cfg.batch_size.to_string());
    kv("lr_estimation", format!("{:?}", cfg.lr_estimation));
    kv("lr_finetune", format!("{:?}", cfg.lr_finetune));
    kv("beta1", format!("{:?}", cfg.adam.beta1));
    kv("beta2", format!("{:?}", cfg.adam.beta2));
    kv("adam_eps", format!("{:?}", cfg.adam.eps));
    kv("weight_decay", format!("{:?}", cfg.adam.weight_decay));
    kv("warmup_frac", format!("{:?}", cfg.warmup_frac));
    kv("rho_a", format!("{:?}", cfg.rho_a));
    kv("rho_f", format!("{:?}", cfg.rho_f));
    kv("rho_m", format!("{:?}", cfg.rho_m));
    kv("rho_r", format!("{:?}", cfg.rho_r));
    kv("lambda_a", format!("{:?}", cfg.penalty.lambda_a));
    kv("lambda_f", format!("{:?}", cfg.penalty.lambda_f));
    kv("seed", cfg.seed.to_string());
    kv("foundation_seed", cfg.foundation_seed.to_string());
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(parse_config("").unwrap(), TrainConfig::default());
        assert_eq!(parse_config("# nothing\n\n").unwrap(), TrainConfig::default());
    }

    #[test]
    fn reads_rates_and_fractions() {
        let cfg = parse_config("rho_m = 0.75\nrho_f = 1/3 # global\n").unwrap();
        assert_eq!(cfg.rho_m, 0.75);
        assert_eq!(cfg.rho_f, 1.0 / 3.0);
    }

    #[test]
    fn out_of_range_rate_names_the_field() {
        match parse_config("rho_m = 1.5") {
            Err(Error::InvalidValue { field, .. }) => assert_eq!(field, "rho_m"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        assert!(matches!(
            parse_config("seed = 1\nrho_x = 2"),
            Err(Error::ConfigParse { line: 2, .. })
        ));
        assert!(matches!(
            parse_config("\n\nseed 1"),
            Err(Error::ConfigParse { line: 3, .. })
        ));
        assert!(matches!(
            parse_config("seed = one"),
            Err(Error::ConfigParse { line: 1, .. })
        ));
        assert!(matches!(
            parse_config("seed = 1\nseed = 2"),
            Err(Error::ConfigParse { line: 2, .. })
        ));
    }

    #[test]
    #[allow(clippy::field_reassign_with_default)]
    fn render_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.rho_f = 1.0 / 3.0;
        cfg.task.kind = TaskKind::PatternMatch;
        cfg.peft.kind = PeftKind::Adapter;
        cfg.seed = 99;
        assert_eq!(parse_config(&render_config(&cfg)).unwrap(), cfg);
    }
}
