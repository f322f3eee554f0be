//! Plain-text and tab-separated renderings of run, bench and sweep results.
//!
//! Reports are `key value` records, one per line. Wall-clock values live under
//! keys starting with `time.`, so two runs of the same config differ only there.

use std::fmt::Write as _;

use crate::bench::BenchResult;
use crate::io::render_config;
use crate::model::ParamCounts;
use crate::pipeline::{RunReport, SweepAxis, SweepRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Text,
    Tsv,
}

impl Format {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "text" => Some(Format::Text),
            "tsv" => Some(Format::Tsv),
            _ => None,
        }
    }
}

/// Accumulates `key value` records.
pub struct Records {
    format: Format,
    out: String,
}

impl Records {
    pub fn new(format: Format) -> Self {
        Records {
            format,
            out: String::new(),
        }
    }

    pub fn put(&mut self, key: &str, value: impl std::fmt::Display) {
        let _ = match self.format {
            Format::Text => writeln!(self.out, "{key} = {value}"),
            Format::Tsv => writeln!(self.out, "{key}\t{value}"),
        };
    }

    /// Tab-separated header followed by rows, for tables in either format.
    pub fn table(&mut self, header: &[&str], rows: &[Vec<String>]) {
        let _ = writeln!(self.out, "{}", header.join("\t"));
        for r in rows {
            let _ = writeln!(self.out, "{}", r.join("\t"));
        }
    }

    pub fn finish(self) -> String {
        self.out
    }
}

/// Every resolved config key under `config.`.
pub fn put_config(r: &mut Records, cfg: &crate::pipeline::TrainConfig) {
    for line in render_config(cfg).lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            r.put(&format!("config.{k}"), v);
        }
    }
}

fn put_counts(r: &mut Records, prefix: &str, c: &ParamCounts) {
    r.put(&format!("{prefix}.foundation"), c.foundation);
    r.put(&format!("{prefix}.classifier"), c.classifier);
    r.put(&format!("{prefix}.peft"), c.peft);
    r.put(&format!("{prefix}.masks"), c.masks);
    r.put(&format!("{prefix}.trainable"), c.trainable);
}

fn list<T: ToString>(xs: &[T]) -> String {
    if xs.is_empty() {
        "-".into()
    } else {
        xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
    }
}

fn mean_tail(xs: &[f64], n: usize) -> f64 {
    let tail = &xs[xs.len().saturating_sub(n)..];
    if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

pub fn run_report(rep: &RunReport, format: Format) -> String {
    let mut r = Records::new(format);
    put_config(&mut r, &rep.config);
    r.put("estimation.steps", rep.estimation_losses.len());
    r.put("estimation.skipped", rep.estimation_skipped);
    r.put(
        "estimation.loss_first",
        rep.estimation_losses.first().copied().unwrap_or(f64::NAN),
    );
    r.put(
        "estimation.loss_last",
        rep.estimation_losses.last().copied().unwrap_or(f64::NAN),
    );
    let lens = |sets: &[Vec<usize>]| sets.iter().map(Vec::len).collect::<Vec<_>>();
    r.put("plan.heads_per_layer", list(&lens(&rep.plan.heads)));
    r.put("plan.ffn_per_layer", list(&lens(&rep.plan.ffn)));
    r.put("plan.modules", list(&rep.plan.modules));
    r.put("plan.ranks_per_module", list(&lens(&rep.plan.ranks)));
    r.put("plan.forced_ffn_layers", list(&rep.forced_ffn_layers));
    r.put("plan.forced_rank_modules", list(&rep.forced_rank_modules));
    put_counts(&mut r, "params.before", &rep.before);
    put_counts(&mut r, "params.after", &rep.after);
    r.put(
        "params.foundation_retention",
        format!("{:.6}", rep.foundation_retention),
    );
    r.put("finetune.steps", rep.finetune_losses.len());
    r.put(
        "finetune.loss_last10",
        format!("{:.6}", mean_tail(&rep.finetune_losses, 10)),
    );
    r.put("eval.accuracy", format!("{:.6}", rep.accuracy));
    let t = &rep.timings;
    r.put("time.estimate_s", format!("{:.3}", t.estimate.as_secs_f64()));
    r.put("time.prune_s", format!("{:.3}", t.prune.as_secs_f64()));
    r.put("time.finetune_s", format!("{:.3}", t.finetune.as_secs_f64()));
    r.put("time.evaluate_s", format!("{:.3}", t.evaluate.as_secs_f64()));
    r.finish()
}

pub fn bench_table(results: &[BenchResult], format: Format) -> String {
    let mut r = Records::new(format);
    let header = [
        "arm",
        "fwd_s",
        "fwd_var",
        "bwd_s",
        "bwd_var",
        "fwd_speedup",
        "fwd_speedup_var",
        "bwd_speedup",
        "bwd_speedup_var",
        "live_bytes",
        "weights",
        "grads",
        "optimizer",
        "activations",
        "foundation_params",
        "trainable_params",
    ];
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|b| {
            vec![
                b.label.clone(),
                format!("{:.6}", b.forward.mean),
                format!("{:.3e}", b.forward.var),
                format!("{:.6}", b.backward.mean),
                format!("{:.3e}", b.backward.var),
                format!("{:.4}", b.forward_speedup.mean),
                format!("{:.3e}", b.forward_speedup.var),
                format!("{:.4}", b.backward_speedup.mean),
                format!("{:.3e}", b.backward_speedup.var),
                b.memory.total().to_string(),
                b.memory.weights.to_string(),
                b.memory.grads.to_string(),
                b.memory.optimizer.to_string(),
                b.memory.activations.to_string(),
                b.params.foundation.to_string(),
                b.params.trainable.to_string(),
            ]
        })
        .collect();
    r.table(&header, &rows);
    r.finish()
}

pub fn sweep_table(axis: SweepAxis, rows: &[SweepRow], format: Format) -> String {
    let mut r = Records::new(format);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|s| {
            vec![
                format!("{}", s.value),
                format!("{:.6}", s.accuracy),
                format!("{:.6}", s.foundation_retention),
                s.foundation_params.to_string(),
                s.trainable_params.to_string(),
                format!("{:.3}", s.seconds),
            ]
        })
        .collect();
    r.table(
        &[
            axis.name(),
            "accuracy",
            "retention",
            "foundation_params",
            "trainable_params",
            "time_s",
        ],
        &body,
    );
    r.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats_differ_only_in_separator() {
        let mut a = Records::new(Format::Text);
        let mut b = Records::new(Format::Tsv);
        a.put("eval.accuracy", 0.5);
        b.put("eval.accuracy", 0.5);
        assert_eq!(a.finish(), "eval.accuracy = 0.5\n");
        assert_eq!(b.finish(), "eval.accuracy\t0.5\n");
    }

    #[test]
    fn empty_lists_render_as_dash() {
        assert_eq!(list::<usize>(&[]), "-");
        assert_eq!(list(&[1, 2]), "1,2");
    }
}
