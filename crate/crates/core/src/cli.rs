//! Command-line front end.
//!
//! Exit codes: 0 ok, 1 usage or config, 2 data, 3 numeric failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checks::{run_gradient_checks, GRADCHECK_TOL};
use crate::config::RunConfig;
use crate::encoder::EncoderParams;
use crate::episodes::{derive_seed, dump_episodes, episode_stream};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::eval::{
    ablation_sweep, evaluate, mean_and_half_width, per_class_accuracy, reference_grid, sign_test,
    train_and_evaluate, write_ablation_rows, write_per_class_csv, write_protocol_csv, RunReport,
};
use crate::text::{generate, load_fewrel, save_fewrel, SyntheticSpec};
use crate::trainer::{write_train_log, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "fewshot", version, about = "Few-shot relation classification experiments")]
struct Cli {
    /// Worker threads for evaluation (1 runs everything serially).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set train.loss.beta=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (beats the environment variable and the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Meta-train one encoder per seed; writes checkpoints and logs.
    Train(RunArgs),
    /// Evaluate a checkpoint, or train then evaluate per seed.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the evaluation episodes as JSON lines.
        #[arg(long)]
        dump_episodes: bool,
    },
    /// Train and evaluate every loss-weight cell with paired seeds.
    Sweep(RunArgs),
    /// Finite-difference checks of the losses and a small encoder.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = GRADCHECK_TOL)]
        tol: f64,
    },
    /// Write a synthetic dataset in FewRel JSON format.
    MakeSynthetic {
        #[arg(long, default_value_t = 10)]
        relations: usize,
        #[arg(long, default_value_t = 100)]
        per_relation: usize,
        #[arg(long, default_value_t = 110)]
        vocab_size: usize,
        #[arg(long, default_value_t = 0.0)]
        overlap: f64,
        /// Per-relation overlaps, comma separated.
        #[arg(long, value_delimiter = ',')]
        overlaps: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        min_tokens: usize,
        #[arg(long, default_value_t = 12)]
        max_tokens: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print relation, example and vocabulary counts of a FewRel file.
    InspectData { path: PathBuf },
}

pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Data(_) | Error::Sampling(_) | Error::Io { .. } | Error::Csv(_) => 2,
        Error::Diverged { .. } | Error::NonFinite { .. } | Error::Domain { .. } => 3,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 1;
        }
        // Only the first call in a process can size the global pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval { run, checkpoint, dump_episodes } => cmd_eval(&run, checkpoint.as_deref(), dump_episodes),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Gradcheck { trials, seed, tol } => cmd_gradcheck(trials, seed, tol),
        Command::MakeSynthetic {
            relations,
            per_relation,
            vocab_size,
            overlap,
            overlaps,
            seed,
            min_tokens,
            max_tokens,
            out,
        } => {
            let spec = SyntheticSpec {
                n_relations: relations,
                per_relation,
                vocab_size,
                overlap,
                overlaps,
                seed,
                min_tokens,
                max_tokens,
            };
            cmd_make_synthetic(&spec, &out)
        }
        Command::InspectData { path } => cmd_inspect(&path),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

struct Run {
    config: RunConfig,
    fingerprint: String,
    out: PathBuf,
}

fn prepare(args: &RunArgs, command: &str) -> Result<Run> {
    let config = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    let out = args.out.clone().unwrap_or_else(|| config.resolved_output_dir());
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let fingerprint = config.fingerprint()?;
    write_file(&out.join("config.json"), &serde_json::to_string_pretty(&config)?)?;
    write_metadata(&out, command, &fingerprint)?;
    Ok(Run { config, fingerprint, out })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    config_fingerprint: &'a str,
    started_unix_seconds: u64,
    version: &'a str,
}

/// Timestamps live here so every other artifact is reproducible byte for byte.
fn write_metadata(out: &Path, command: &str, fingerprint: &str) -> Result<()> {
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = Metadata {
        command,
        config_fingerprint: fingerprint,
        started_unix_seconds: started,
        version: env!("CARGO_PKG_VERSION"),
    };
    write_file(&out.join("metadata.json"), &serde_json::to_string_pretty(&meta)?)
}

fn cmd_train(args: &RunArgs) -> Result<i32> {
    let run = prepare(args, "train")?;
    let (train, eval) = run.config.load_data()?;
    write_file(&run.out.join("vocab.txt"), &train.vocab.to_text())?;
    for &seed in &run.config.seeds {
        let setup = run.config.setup(seed, &train, &eval);
        let init = crate::eval::initial_encoder(&setup, train.vocab.len())?;
        let (encoder, log) = crate::trainer::meta_train(&init, &train, &setup.protocol, &setup.train)?;
        encoder.save(run.out.join(format!("checkpoint-seed{seed}.json")))?;
        write_train_log(run.out.join(format!("train_log-seed{seed}.jsonl")), &log)?;
        let tail = &log[log.len().saturating_sub(20)..];
        let acc = if tail.is_empty() {
            f64::NAN
        } else {
            tail.iter().map(|r| r.query_acc).sum::<f64>() / tail.len() as f64
        };
        println!("seed {seed}: {} episodes, recent query accuracy {acc:.4}", log.len());
    }
    println!("wrote {}", run.out.display());
    Ok(0)
}

fn cmd_eval(args: &RunArgs, checkpoint: Option<&Path>, dump: bool) -> Result<i32> {
    if RunConfig::load(args.config.as_deref(), &args.overrides)?.n_episodes == 0 {
        return Err(Error::Config("protocol requires ≥1 episode".into()));
    }
    let run = prepare(args, "eval")?;
    let (train, eval) = run.config.load_data()?;
    // (training seed, report)
    let mut reports: Vec<(u64, RunReport)> = Vec::new();
    match checkpoint {
        Some(path) => {
            let encoder = EncoderParams::load(path)?;
            if encoder.config.vocab_size != eval.vocab.len() {
                return Err(Error::Data(format!(
                    "checkpoint vocabulary has {} entries but the data has {}",
                    encoder.config.vocab_size,
                    eval.vocab.len()
                )));
            }
            let seed = run.config.seeds[0];
            let cfg = TrainConfig { seed, ..run.config.train.clone() };
            let mut r = evaluate(
                &encoder,
                &eval,
                &run.config.protocol,
                run.config.n_episodes,
                derive_seed(seed, "evaluation episodes"),
                &cfg,
            )?;
            r.preset = encoder.config.preset_name.clone();
            r.config_fingerprint = run.fingerprint.clone();
            reports.push((seed, r));
        }
        None => {
            for &seed in &run.config.seeds {
                let setup = run.config.setup(seed, &train, &eval);
                let mut r = train_and_evaluate(&train, &eval, &setup)?.report;
                r.config_fingerprint = run.fingerprint.clone();
                reports.push((seed, r));
            }
        }
    }
    for (seed, r) in &reports {
        write_file(&run.out.join(format!("report-seed{seed}.json")), &r.to_json()?)?;
        println!(
            "{} {}-way {}-shot: accuracy {:.4} ± {:.4} over {} episodes",
            r.preset, r.protocol.way, r.protocol.shot, r.mean_accuracy, r.ci_half_width, r.n_episodes
        );
    }
    let reports: Vec<RunReport> = reports.into_iter().map(|(_, r)| r).collect();
    write_protocol_csv(run.out.join("protocol_results.csv"), &reports)?;
    let pooled: Vec<_> = reports.iter().flat_map(|r| r.results.iter().cloned()).collect();
    write_per_class_csv(run.out.join("per_class.csv"), &per_class_accuracy(&pooled))?;
    if dump {
        let episodes = episode_stream(
            &eval,
            &run.config.protocol,
            run.config.n_episodes,
            derive_seed(run.config.seeds[0], "evaluation episodes"),
        )?;
        dump_episodes(run.out.join("episodes.jsonl"), &episodes)?;
    }
    Ok(0)
}

fn cmd_sweep(args: &RunArgs) -> Result<i32> {
    let run = prepare(args, "sweep")?;
    let (train, eval) = run.config.load_data()?;
    let grid = run
        .config
        .sweep
        .grid
        .clone()
        .unwrap_or_else(|| reference_grid(run.config.train.loss.tau));

    // accuracies[cell][seed]
    let mut accuracies: Vec<Vec<Option<f64>>> = vec![Vec::new(); grid.len()];
    let mut single_ci: Vec<Option<f64>> = vec![None; grid.len()];
    let mut per_seed = Vec::new();
    let mut first_error: Option<Error> = None;
    for &seed in &run.config.seeds {
        let setup = run.config.setup(seed, &train, &eval);
        for (i, cell) in ablation_sweep(&train, &eval, &setup, &grid)?.into_iter().enumerate() {
            match cell.outcome {
                Ok(r) => {
                    accuracies[i].push(Some(r.mean_accuracy));
                    single_ci[i] = Some(r.ci_half_width);
                    per_seed.push((seed, cell.weights, Some((r.mean_accuracy, r.ci_half_width))));
                }
                Err(e) => {
                    eprintln!(
                        "cell lambda={} beta={} seed {seed}: {e}",
                        cell.weights.lambda_reg, cell.weights.beta
                    );
                    accuracies[i].push(None);
                    per_seed.push((seed, cell.weights, None));
                    first_error.get_or_insert(e);
                }
            }
        }
    }

    let rows: Vec<_> = grid
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let ok: Option<Vec<f64>> = accuracies[i].iter().copied().collect();
            let summary = ok.map(|accs| {
                if accs.len() == 1 {
                    (accs[0], single_ci[i].unwrap_or(0.0))
                } else {
                    mean_and_half_width(&accs)
                }
            });
            (*w, summary)
        })
        .collect();
    write_ablation_rows(run.out.join("ablation.csv"), &rows)?;
    write_per_seed_csv(&run.out.join("ablation_seeds.csv"), &per_seed)?;
    for (w, s) in &rows {
        match s {
            Some((m, ci)) => println!("lambda={} beta={} tau={}: {m:.4} ± {ci:.4}", w.lambda_reg, w.beta, w.tau),
            None => println!("lambda={} beta={} tau={}: failed", w.lambda_reg, w.beta, w.tau),
        }
    }
    if let (Some(base), true) = (grid.iter().position(|w| w.beta == 0.0), run.config.seeds.len() > 1) {
        for (i, w) in grid.iter().enumerate().filter(|(_, w)| w.beta > 0.0 && w.lambda_reg == grid[base].lambda_reg) {
            let (mut wins, mut losses) = (0, 0);
            for (a, b) in accuracies[i].iter().zip(&accuracies[base]) {
                if let (Some(a), Some(b)) = (a, b) {
                    if a > b {
                        wins += 1;
                    } else if a < b {
                        losses += 1;
                    }
                }
            }
            println!(
                "beta={} vs beta=0: {wins} wins, {losses} losses, sign test p = {:.4}",
                w.beta,
                sign_test(wins, losses)
            );
        }
    }
    match first_error {
        Some(e) => {
            eprintln!("error: at least one sweep cell failed; first failure: {e}");
            Ok(exit_code(&e))
        }
        None => Ok(0),
    }
}

/// (training seed, weights, mean accuracy and CI half-width if the cell ran)
type SeedRow = (u64, LossWeights, Option<(f64, f64)>);

fn write_per_seed_csv(path: &Path, rows: &[SeedRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["seed", "lambda", "beta", "tau", "mean_acc", "ci"])?;
    for (seed, wt, s) in rows {
        let (acc, ci) = s.map_or((String::new(), String::new()), |(a, c)| (a.to_string(), c.to_string()));
        w.write_record([
            seed.to_string(),
            wt.lambda_reg.to_string(),
            wt.beta.to_string(),
            wt.tau.to_string(),
            acc,
            ci,
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn cmd_gradcheck(trials: usize, seed: u64, tol: f64) -> Result<i32> {
    if trials == 0 {
        return Err(Error::Config("--trials must be at least 1".into()));
    }
    let rows = run_gradient_checks(trials, seed, tol)?;
    println!("{:<24} {:>7} {:>14} {:>8}  result", "check", "trials", "max rel err", "skipped");
    for r in &rows {
        println!(
            "{:<24} {:>7} {:>14.3e} {:>8}  {}",
            r.name,
            r.trials,
            r.max_rel_error,
            r.skipped_entries,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    Ok(if rows.iter().all(|r| r.pass) { 0 } else { 3 })
}

fn cmd_make_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<i32> {
    let ds = generate(spec)?;
    save_fewrel(&ds, out)?;
    println!(
        "wrote {} relations, {} examples to {}",
        ds.n_relations(),
        ds.n_examples(),
        out.display()
    );
    Ok(0)
}

fn cmd_inspect(path: &Path) -> Result<i32> {
    let ds = load_fewrel(path, None)?;
    println!("relations: {}", ds.n_relations());
    println!("examples: {}", ds.n_examples());
    println!("vocabulary: {}", ds.vocab.len());
    println!("longest marked sequence: {}", ds.max_marked_len());
    for (rel, exs) in &ds.relations {
        println!("  {rel}: {}", exs.len());
    }
    Ok(0)
}
