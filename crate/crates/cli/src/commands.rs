use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use efn_core::bank::{ExperienceBank, Outcome};
use efn_core::embedding::{dequantize, TokenMatrix};
use efn_core::retrieval::{filter_by_instruction, shortlist, RetrievalConfig};
use efn_core::runner::{self, evaluate, run_experiment, seed_eval_bank, Agent, Metrics, Plan, RunConfig};
use efn_core::sac::checkpoint;
use efn_core::sinkhorn::{sinkhorn_similarity, SinkhornConfig};
use efn_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{BankAction, Command, ConfigArgs};

/// Marks an error as a usage problem (exit 1) rather than bad data (exit 2).
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if let Some(Error::InvalidConfig(_)) = cause.downcast_ref::<Error>() {
            return 1;
        }
    }
    2
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::from_toml_str(&text).with_context(|| format!("in config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    cfg.apply_env();
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(s) = &args.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(d) = &args.output_dir {
        cfg.output_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { cfg, episodes } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(n) = episodes {
                cfg.episodes_train = n;
            }
            let out = run_experiment(&cfg, Plan { eval: false, base: false, sweep: false })?;
            print_table(&[("train", &out.train)]);
            check_frozen(out.base_checksum_before, out.base_checksum_after)?;
            print_files(&out.files);
            Ok(())
        }
        Command::Eval { cfg, checkpoint: ckpt, bank, volume, episodes, zero_residual } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(n) = episodes {
                cfg.episodes_eval = n;
            }
            eval(&cfg, &ckpt, &bank, volume.unwrap_or(cfg.eval_volume), zero_residual)
        }
        Command::Sweep { cfg, volumes } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(v) = volumes {
                cfg.bank_volume_sweep = v;
                cfg.validate()?;
            }
            let out = run_experiment(&cfg, Plan { eval: false, base: true, sweep: true })?;
            println!("{:>8} {:>9} {:>12} {:>14} {:>9}", "volume", "success", "avg_steps", "residual_norm", "episodes");
            if let Some(b) = &out.base {
                println!(
                    "{:>8} {:>9.3} {:>12} {:>14.4} {:>9}",
                    "base",
                    b.success_rate,
                    fmt_steps(b.avg_steps_on_success),
                    b.mean_residual_norm,
                    b.episodes
                );
            }
            for row in &out.sweep {
                let m = &row.metrics;
                println!(
                    "{:>8} {:>9.3} {:>12} {:>14.4} {:>9}",
                    row.volume,
                    m.success_rate,
                    fmt_steps(m.avg_steps_on_success),
                    m.mean_residual_norm,
                    m.episodes
                );
            }
            check_frozen(out.base_checksum_before, out.base_checksum_after)?;
            print_files(&out.files);
            Ok(())
        }
        Command::Bank { action: BankAction::Inspect { path } } => inspect(&path),
        Command::Bank { action: BankAction::Export { path, out } } => export(&path, out.as_deref()),
        Command::Sinkhorn { files, random, rng_seed, epsilon, iters } => {
            let (x, y) = match (random, files.as_slice()) {
                (Some(shape), []) => random_pair(&shape, rng_seed)?,
                (None, [a, b]) => (read_matrix(a)?, read_matrix(b)?),
                _ => return Err(usage("sinkhorn needs two matrix files or --random TxD")),
            };
            let cfg = SinkhornConfig::default().with_epsilon(epsilon).with_iters(iters);
            let plan = sinkhorn_similarity(&x, &y, &cfg)?;
            println!("score01 {:.6}", plan.score01);
            println!("score_raw {:.6}", plan.score_raw);
            println!("row_violation {:.3e}", plan.row_violation());
            println!("col_violation {:.3e}", plan.col_violation());
            println!("iterations {}", plan.iterations);
            Ok(())
        }
        Command::Retrieve { bank, query_step, top_n, top_k, lambda, beta } => {
            let cfg = RetrievalConfig {
                top_n_rollouts: top_n,
                top_k_steps: top_k,
                lambda_mix: lambda,
                beta_len: beta,
                ..RetrievalConfig::default()
            };
            retrieve(&bank, &query_step, &cfg)
        }
    }
}

fn fmt_steps(s: Option<f64>) -> String {
    s.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into())
}

fn print_table(rows: &[(&str, &Metrics)]) {
    println!("{:>6} {:>9} {:>9} {:>12} {:>14}", "phase", "episodes", "success", "avg_steps", "residual_norm");
    for (name, m) in rows {
        println!(
            "{:>6} {:>9} {:>9.3} {:>12} {:>14.4}",
            name,
            m.episodes,
            m.success_rate,
            fmt_steps(m.avg_steps_on_success),
            m.mean_residual_norm
        );
        for s in &m.per_seed {
            println!("{:>6} seed {} success {:.3} avg_steps {}", "", s.seed, s.success_rate, fmt_steps(s.avg_steps_on_success));
        }
    }
}

fn print_files(files: &[std::path::PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn check_frozen(before: u64, after: u64) -> Result<()> {
    if before != after {
        bail!("base policy checksum changed: {before:016x} -> {after:016x}");
    }
    println!("base policy checksum {before:016x}");
    Ok(())
}

fn eval(cfg: &RunConfig, ckpt: &Path, bank: &Path, volume: usize, zero_residual: bool) -> Result<()> {
    let sac = checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let source = ExperienceBank::load(bank).with_context(|| format!("loading bank {}", bank.display()))?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let mut agent = Agent::from_sac(cfg, sac.clone(), seed)?;
        let live = seed_eval_bank(&source, volume)?;
        records.extend(evaluate(cfg, &mut agent, live, seed, Some(volume), zero_residual)?.records);
    }
    let path = cfg.output_dir.join("eval-metrics.jsonl");
    runner::write_metrics(&path, &records)?;
    let name = if zero_residual { "base" } else { "eval" };
    print_table(&[(name, &Metrics::from_records(&records))]);
    println!("wrote {}", path.display());
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let bank = ExperienceBank::load(path).with_context(|| format!("loading bank {}", path.display()))?;
    let lens: Vec<usize> = bank.rollouts().iter().map(|r| r.len()).collect();
    println!("rollouts {}", bank.len());
    println!("steps {}", bank.total_steps());
    if let (Some(min), Some(max)) = (lens.iter().min(), lens.iter().max()) {
        println!("length min {min} mean {:.2} max {max}", bank.total_steps() as f64 / lens.len() as f64);
    }
    let count = |o: Outcome| bank.rollouts().iter().filter(|r| r.outcome() == o).count();
    println!("outcome success {}", count(Outcome::Success));
    println!("outcome failure {}", count(Outcome::Failure));
    println!("outcome unknown {}", count(Outcome::Unknown));
    if let Some(r) = bank.rollouts().first() {
        println!("key_dim {}", r.key_dim());
        println!("instruction_dim {}", r.instruction().dim());
    }
    Ok(())
}

fn outcome_name(o: Outcome) -> &'static str {
    match o {
        Outcome::Success => "success",
        Outcome::Failure => "failure",
        Outcome::Unknown => "unknown",
    }
}

fn export(path: &Path, out: Option<&Path>) -> Result<()> {
    let bank = ExperienceBank::load(path).with_context(|| format!("loading bank {}", path.display()))?;
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = BufWriter::new(sink);
    for r in bank.rollouts() {
        let steps: Vec<_> = r
            .steps()
            .iter()
            .map(|s| {
                serde_json::json!({
                    "step": s.step_index(),
                    "action": s.base_action(),
                    "key_scale": s.key().scale(),
                    "key_codes": s.key().codes(),
                })
            })
            .collect();
        let line = serde_json::json!({
            "id": r.id(),
            "outcome": outcome_name(r.outcome()),
            "length": r.len(),
            "instruction": r.instruction().as_slice(),
            "steps": steps,
        });
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn read_matrix(path: &Path) -> Result<TokenMatrix> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rows: Vec<Vec<f64>> =
        serde_json::from_str(&text).with_context(|| format!("{} is not a JSON array of rows", path.display()))?;
    Ok(TokenMatrix::from_rows(&rows)?)
}

fn random_pair(shape: &str, seed: u64) -> Result<(TokenMatrix, TokenMatrix)> {
    let (t, d) = shape
        .split_once(['x', 'X'])
        .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
        .ok_or_else(|| usage(format!("--random expects TxD, got `{shape}`")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || TokenMatrix::new(t, d, (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect());
    Ok((draw()?, draw()?))
}

fn retrieve(path: &Path, query: &str, cfg: &RetrievalConfig) -> Result<()> {
    let (r, s) = query
        .split_once(':')
        .and_then(|(a, b)| Some((a.parse::<u32>().ok()?, b.parse::<usize>().ok()?)))
        .ok_or_else(|| usage(format!("--query-step expects ROLLOUT:STEP, got `{query}`")))?;
    let bank = ExperienceBank::load(path).with_context(|| format!("loading bank {}", path.display()))?;
    let rollout = bank.get(r).ok_or(Error::UnknownRollout(r))?;
    let step = rollout.step(s).ok_or_else(|| anyhow!("rollout {r} has no step {s}"))?;
    let key = dequantize(step.key());
    let cands = filter_by_instruction(&bank, rollout.instruction().as_slice(), cfg.top_n_rollouts)?;
    let list = shortlist(&key, &cands, cfg)?;
    let mean_len = cands.iter().map(|c| c.len() as f64).sum::<f64>() / cands.len() as f64;
    println!("query rollout {r} step {s}; {} candidate rollouts, mean length {mean_len:.2}", cands.len());
    println!("{:>4} {:>8} {:>6} {:>9} {:>9} {:>9}", "rank", "rollout", "step", "cosine", "prior", "score");
    for (i, st) in list.iter().enumerate() {
        println!(
            "{:>4} {:>8} {:>6} {:>9.5} {:>9.5} {:>9.5}",
            i + 1,
            st.rollout.id(),
            st.step_index,
            st.cosine,
            st.prior,
            st.score
        );
    }
    Ok(())
}
