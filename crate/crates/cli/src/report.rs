use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;

use stapo_core::analysis::{all_passed, run_suite, CheckResult, SuiteConfig};
use stapo_core::domain::read_jsonl;
use stapo_core::s2t::{cell_statistics, classify_phase, CellStats, PhaseCell};
use stapo_core::trainer::{StepMetrics, TraceRecord};

use crate::{CmdResult, Failure, VERIFY_FAILED};

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// JSON report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run every check with a hundredth of the cases.
    #[arg(long)]
    quick: bool,
}

#[derive(serde::Serialize)]
struct VerifyReport<'a> {
    passed: bool,
    checks: &'a [CheckResult],
}

pub fn verify(a: VerifyArgs) -> CmdResult {
    let mut cfg = SuiteConfig { seed: a.seed, ..Default::default() };
    if a.quick {
        cfg.bound_cases /= 100;
        cfg.gradient_batches = 10;
        cfg.entropy_change_cases = 10;
        cfg.mask_triples /= 100;
        cfg.ordering_pairs = 10;
    }
    let checks = run_suite(&cfg);
    let passed = all_passed(&checks);
    for c in &checks {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        eprintln!("{status} {:<28} cases={:<8} failures={:<6} worst_margin={:e}", c.check_name, c.cases, c.failures, c.worst_margin);
    }
    let report = VerifyReport { passed, checks: &checks };
    let json = serde_json::to_string_pretty(&report).map_err(Failure::runtime)?;
    match &a.out {
        Some(path) => fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display())),
        None => writeln!(io::stdout(), "{json}").map_err(Into::into),
    }
    .map_err(Failure::runtime)?;
    Ok(if passed { 0 } else { VERIFY_FAILED })
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    /// trace.jsonl written by `train --trace`.
    #[arg(long)]
    trace: PathBuf,
    /// CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn classify(a: ClassifyArgs) -> CmdResult {
    let file = File::open(&a.trace).with_context(|| format!("opening {}", a.trace.display())).map_err(Failure::usage)?;
    let records: Vec<TraceRecord> = read_jsonl(BufReader::new(file)).map_err(Failure::usage)?;
    let stats = cell_statistics(records.iter().map(|r| {
        (classify_phase(r.cur_prob, r.entropy, r.advantage, &r.thresholds()), r.grad_norm, r.entropy)
    }));
    let masked = records.iter().filter(|r| r.mask == 0).count();
    let spurious = stats.get(&PhaseCell::SPURIOUS).map_or(0, |s| s.count);
    if masked != spurious {
        log::warn!("trace has {masked} masked tokens but {spurious} in the spurious cell");
    }
    let write = |w: &mut dyn Write| -> io::Result<()> {
        writeln!(w, "cell,count,mean_grad_norm,mean_entropy")?;
        for cell in PhaseCell::all() {
            let s = stats.get(&cell).copied().unwrap_or(CellStats { count: 0, mean_grad_norm: 0.0, mean_entropy: 0.0 });
            writeln!(w, "{},{},{},{}", cell.label(), s.count, s.mean_grad_norm, s.mean_entropy)?;
        }
        writeln!(w, "total,{},,", records.len())?;
        w.flush()
    };
    match &a.out {
        Some(path) => {
            let f = File::create(path).with_context(|| format!("creating {}", path.display())).map_err(Failure::runtime)?;
            write(&mut BufWriter::new(f))
        }
        None => write(&mut io::stdout().lock()),
    }
    .map_err(Failure::runtime)?;
    Ok(0)
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// metrics.jsonl written by `train`.
    #[arg(long)]
    metrics: PathBuf,
    /// Directory for the per-quantity CSV files.
    #[arg(long)]
    out: PathBuf,
}

type Column = (&'static str, fn(&StepMetrics) -> String);

const COLUMNS: [Column; 9] = [
    ("mean_reward", |m| m.mean_reward.to_string()),
    ("mean_entropy", |m| m.mean_entropy.to_string()),
    ("spurious_ratio", |m| m.spurious_ratio.to_string()),
    ("masked_count", |m| m.masked_count.to_string()),
    ("total_tokens", |m| m.total_tokens.to_string()),
    ("surrogate_value", |m| m.surrogate_value.to_string()),
    ("grad_norm", |m| m.grad_norm.to_string()),
    ("learning_rate", |m| m.learning_rate.to_string()),
    ("skipped_updates", |m| m.skipped_updates.to_string()),
];

pub fn analyze(a: AnalyzeArgs) -> CmdResult {
    let file =
        File::open(&a.metrics).with_context(|| format!("opening {}", a.metrics.display())).map_err(Failure::usage)?;
    let metrics: Vec<StepMetrics> = read_jsonl(BufReader::new(file)).map_err(Failure::usage)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display())).map_err(Failure::runtime)?;
    for (name, value) in COLUMNS {
        let mut text = String::from("step,value\n");
        for m in &metrics {
            text.push_str(&format!("{},{}\n", m.step, value(m)));
        }
        let path = a.out.join(format!("{name}.csv"));
        fs::write(&path, text).with_context(|| format!("writing {}", path.display())).map_err(Failure::runtime)?;
    }
    Ok(0)
}
