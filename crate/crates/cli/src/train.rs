use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::Args;

use stapo_core::domain::TokenId;
use stapo_core::policy::{checkpoint, restore};
use stapo_core::tasks::{load_prompts, ArithmeticTask};
use stapo_core::trainer::{merge_frequencies, write_token_frequencies, TrainConfig, TrainError, Trainer};

use crate::{CmdResult, Failure};

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Flat key=value file; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    tau_p: Option<f64>,
    #[arg(long)]
    entropy_quantile: Option<f64>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    batch_prompts: Option<usize>,
    #[arg(long)]
    mini_batches: Option<usize>,
    #[arg(long)]
    clip_low: Option<f64>,
    #[arg(long)]
    clip_high: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    context_order: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Task as mod:M:L or mod:M:L:OPS; default mod:7:2.
    #[arg(long)]
    task: Option<String>,
    /// Prompt JSONL; generated from the task when omitted.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Number of prompts generated when no prompt file is given; defaults to
    /// the batch size.
    #[arg(long)]
    pool: Option<usize>,
    /// Continue from a checkpoint written by a previous run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write trace.jsonl with one record per trained token.
    #[arg(long)]
    trace: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Settings that are not part of the trainer config.
#[derive(Debug, Default)]
struct RunSettings {
    task: Option<String>,
    prompts: Option<PathBuf>,
    pool: Option<usize>,
    out: Option<PathBuf>,
    trace: bool,
}

pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, anyhow::Error> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("config line {}: expected key=value", i + 1))?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

fn apply(cfg: &mut TrainConfig, run: &mut RunSettings, key: &str, value: &str) -> Result<(), anyhow::Error> {
    match key {
        "task" => run.task = Some(value.to_string()),
        "prompts" => run.prompts = Some(value.into()),
        "pool" => run.pool = Some(value.parse().map_err(|_| anyhow!("pool: cannot parse {value:?}"))?),
        "out" => run.out = Some(value.into()),
        "trace" => run.trace = value.parse().map_err(|_| anyhow!("trace: expected true or false"))?,
        _ => cfg.set(key, value)?,
    }
    Ok(())
}

fn flag_pairs(a: &TrainArgs) -> Vec<(&'static str, String)> {
    let mut v = Vec::new();
    macro_rules! push {
        ($($key:literal => $field:ident),* $(,)?) => {
            $(if let Some(x) = &a.$field { v.push(($key, x.to_string())); })*
        };
    }
    push!(
        "objective" => objective,
        "tau-p" => tau_p,
        "entropy-quantile" => entropy_quantile,
        "group-size" => group_size,
        "batch-prompts" => batch_prompts,
        "mini-batches" => mini_batches,
        "clip-low" => clip_low,
        "clip-high" => clip_high,
        "lr" => lr,
        "warmup-steps" => warmup_steps,
        "max-len" => max_len,
        "grad-clip" => grad_clip,
        "context-order" => context_order,
        "temperature" => temperature,
        "steps" => steps,
        "seed" => seed,
        "task" => task,
        "pool" => pool,
    );
    if let Some(p) = &a.prompts {
        v.push(("prompts", p.display().to_string()));
    }
    if let Some(p) = &a.out {
        v.push(("out", p.display().to_string()));
    }
    v
}

fn resolve(a: &TrainArgs) -> Result<(TrainConfig, RunSettings), anyhow::Error> {
    let mut cfg = TrainConfig::default();
    let mut run = RunSettings::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (k, v) in parse_config_text(&text)? {
            apply(&mut cfg, &mut run, &k, &v).with_context(|| format!("in {}", path.display()))?;
        }
    }
    for (k, v) in flag_pairs(a) {
        apply(&mut cfg, &mut run, k, &v)?;
    }
    run.trace |= a.trace;
    cfg.validate()?;
    Ok((cfg, run))
}

struct Sink {
    metrics: BufWriter<File>,
    trace: Option<BufWriter<File>>,
    masked: BTreeMap<TokenId, u64>,
    kept: BTreeMap<TokenId, u64>,
}

pub fn run(a: TrainArgs) -> CmdResult {
    let (cfg, settings) = resolve(&a).map_err(Failure::usage)?;
    let out = settings.out.clone().ok_or_else(|| Failure::usage(anyhow!("--out DIR is required")))?;
    let task: ArithmeticTask =
        settings.task.as_deref().unwrap_or("mod:7:2").parse().map_err(Failure::usage)?;
    let vocab = task.vocabulary();
    let prompts = match &settings.prompts {
        Some(p) => load_prompts(p).map_err(Failure::usage)?,
        None => task.generate_prompts(settings.pool.unwrap_or(cfg.batch_prompts), cfg.seed),
    };

    let trainer = match &a.resume {
        Some(path) => {
            let (policy, step) = restore(path).map_err(Failure::usage)?;
            Trainer::resume(cfg, prompts, &vocab, policy, step)
        }
        None => Trainer::new(cfg, prompts, &vocab),
    }
    .map_err(Failure::usage)?;
    let mut trainer = trainer.with_trace(settings.trace);

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display())).map_err(Failure::runtime)?;
    write_effective_config(&out.join("config.txt"), &cfg, &task).map_err(Failure::runtime)?;
    let create = |name: &str| -> Result<BufWriter<File>, Failure> {
        let path = out.join(name);
        File::create(&path)
            .map(BufWriter::new)
            .with_context(|| format!("creating {}", path.display()))
            .map_err(Failure::runtime)
    };
    let mut sink = Sink {
        metrics: create("metrics.jsonl")?,
        trace: if settings.trace { Some(create("trace.jsonl")?) } else { None },
        masked: BTreeMap::new(),
        kept: BTreeMap::new(),
    };

    log::info!("training {cfg}");
    let mut write_error: Option<anyhow::Error> = None;
    let result = trainer.run(|o| {
        if write_error.is_some() {
            return;
        }
        let mut write = || -> Result<(), anyhow::Error> {
            serde_json::to_writer(&mut sink.metrics, &o.metrics)?;
            sink.metrics.write_all(b"\n")?;
            if let Some(t) = sink.trace.as_mut() {
                for r in &o.trace {
                    serde_json::to_writer(&mut *t, r)?;
                    t.write_all(b"\n")?;
                }
            }
            Ok(())
        };
        if let Err(e) = write() {
            write_error = Some(e);
        }
        merge_frequencies(&mut sink.masked, &o.masked_tokens);
        merge_frequencies(&mut sink.kept, &o.kept_tokens);
    });
    if let Some(e) = write_error {
        return Err(Failure::runtime(e));
    }
    if let Err(e) = result {
        if let TrainError::NonFinite { step, policy, .. } = &e {
            let path = out.join("diagnostic_checkpoint.json");
            if checkpoint(policy, step - 1, &path).is_ok() {
                eprintln!("wrote diagnostic checkpoint to {}", path.display());
            }
        }
        return Err(Failure::runtime(e));
    }

    let mut finish = || -> Result<(), anyhow::Error> {
        sink.metrics.flush()?;
        if let Some(t) = sink.trace.as_mut() {
            t.flush()?;
        }
        checkpoint(trainer.policy(), trainer.completed_steps(), &out.join("checkpoint.json"))?;
        write_token_frequencies(create("masked_tokens.csv").map_err(|f| f.error)?, &sink.masked)?;
        write_token_frequencies(create("kept_tokens.csv").map_err(|f| f.error)?, &sink.kept)?;
        Ok(())
    };
    finish().map_err(Failure::runtime)?;
    Ok(0)
}

fn write_effective_config(path: &Path, cfg: &TrainConfig, task: &ArithmeticTask) -> Result<(), anyhow::Error> {
    let mut f = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(f, "task={task}")?;
    writeln!(f, "objective={}", cfg.objective)?;
    writeln!(f, "group-size={}", cfg.group_size)?;
    writeln!(f, "batch-prompts={}", cfg.batch_prompts)?;
    writeln!(f, "mini-batches={}", cfg.mini_batches_per_step)?;
    writeln!(f, "lr={}", cfg.learning_rate)?;
    writeln!(f, "warmup-steps={}", cfg.warmup_steps)?;
    writeln!(f, "max-len={}", cfg.max_response_len)?;
    writeln!(f, "clip-low={}", cfg.clip.eps_low)?;
    writeln!(f, "clip-high={}", cfg.clip.eps_high)?;
    writeln!(f, "tau-p={}", cfg.s2t.tau_p)?;
    writeln!(f, "entropy-quantile={}", cfg.s2t.entropy_quantile)?;
    writeln!(f, "seed={}", cfg.seed)?;
    writeln!(f, "steps={}", cfg.total_steps)?;
    writeln!(f, "grad-clip={}", cfg.grad_clip_norm)?;
    writeln!(f, "sigma-min={}", cfg.sigma_min)?;
    writeln!(f, "temperature={}", cfg.temperature)?;
    writeln!(f, "context-order={}", cfg.context_order)?;
    writeln!(f, "prob-floor={}", cfg.prob_floor)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_ignores_comments_and_blanks() {
        let pairs = parse_config_text("# run\nlr = 5\n\ntau_p=0.01 # tighter\n").unwrap();
        assert_eq!(pairs, vec![("lr".into(), "5".into()), ("tau-p".into(), "0.01".into())]);
        assert!(parse_config_text("lr 5").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "lr=5\nseed=3\nobjective=dapo\ntask=mod:5:2\n").unwrap();
        let args = TrainArgs { config: Some(path), seed: Some(9), ..Default::default() };
        let (cfg, run) = resolve(&args).unwrap();
        assert_eq!(cfg.learning_rate, 5.0);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.objective, stapo_core::objectives::Objective::Dapo);
        assert_eq!(run.task.as_deref(), Some("mod:5:2"));
    }

    #[test]
    fn effective_config_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.txt");
        let mut cfg = TrainConfig::default();
        cfg.s2t.tau_p = 0.125;
        cfg.learning_rate = 0.1 + 0.2;
        write_effective_config(&path, &cfg, &"mod:7:2".parse().unwrap()).unwrap();
        let args = TrainArgs { config: Some(path), ..Default::default() };
        let (back, run) = resolve(&args).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(run.task.as_deref(), Some("mod:7:2:+"));
    }
}
