use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dbf_base::envs::generate;
use dbf_harness::config::{preset, ExperimentConfig, FilterSpec, PRESETS};
use dbf_harness::error::{exit, HarnessError, Result};
use dbf_harness::experiment::{obtain_models, run_experiment, sweep, train_summary, ExperimentOutput};
use dbf_harness::runner::{derive_seed, TAG_TEST};

/// Deep Bayesian filter workbench.
#[derive(Parser, Debug)]
#[command(name = "dbf", version)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config; see `dbf presets`.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the test trajectories to `<out>/<stem>.{bin,json}`.
    Generate {
        #[arg(long, default_value = "test")]
        stem: String,
        /// Number of trajectories (default: the config's test count).
        #[arg(long)]
        count: Option<usize>,
        /// Trajectory length (default: the config's steps).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the DBF models only.
    Train,
    /// Run the main filter alone, with metrics.
    Filter,
    /// Run the main filter and all comparison filters, with metrics.
    Eval,
    /// Like `eval`, and print a filter × metric table.
    Compare,
    /// Run the latent-dimension sweep.
    Sweep,
    /// List the built-in configs.
    Presets,
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => return Err(HarnessError::Config("pass --config FILE or --preset NAME".into())),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_rows(o: &ExperimentOutput) {
    println!("config_hash {}  seed {}", o.report.config_hash, o.report.seed);
    for r in &o.report.rows {
        let seed = r.model_seed.map(|s| format!("[seed {s}]")).unwrap_or_default();
        println!("{:<24} {:<18} mean {:>12.6}  std {:>12.6}  n {}", format!("{}{seed}", r.filter), r.metric, r.mean, r.std, r.per_trajectory.len());
    }
    for t in &o.report.training {
        if let Some(a) = &t.aborted {
            println!("dbf[seed {}] training aborted: {a}", t.model_seed);
        }
    }
}

/// Divergence exit code when any training seed aborted.
fn training_status(o: &ExperimentOutput) -> u8 {
    if o.report.training.iter().any(|t| t.aborted.is_some()) {
        exit::DIVERGENCE as u8
    } else {
        exit::SUCCESS as u8
    }
}

fn run(cli: &Cli) -> Result<u8> {
    if let Command::Presets = cli.command {
        for p in PRESETS {
            println!("{p}");
        }
        return Ok(exit::SUCCESS as u8);
    }
    let cfg = load(cli)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    match &cli.command {
        Command::Presets => unreachable!(),
        Command::Generate { stem, count, steps } => {
            let b = generate(&cfg.env, steps.unwrap_or(cfg.steps), count.unwrap_or(cfg.test.count), derive_seed(cfg.seed, TAG_TEST))?;
            b.write(&cfg.output_dir, stem)?;
            println!("wrote {} trajectories of T = {} to {}", b.count(), b.steps(), cfg.output_dir.join(stem).display());
            Ok(exit::SUCCESS as u8)
        }
        Command::Train => {
            let spec = cfg
                .filters()
                .into_iter()
                .find_map(|f| match f {
                    FilterSpec::Dbf(d) => Some(d.clone()),
                    _ => None,
                })
                .ok_or_else(|| HarnessError::Config("config has no dbf filter to train".into()))?;
            let models = obtain_models(&cfg, &spec, Some(&cfg.output_dir))?;
            let window = cfg.training.as_ref().map_or(50, |t| t.ma_window);
            let summaries: Vec<_> = models.iter().map(|m| train_summary(m, window)).collect();
            std::fs::write(cfg.output_dir.join("training.json"), serde_json::to_string_pretty(&summaries)?)?;
            let mut code = exit::SUCCESS as u8;
            for s in &summaries {
                println!(
                    "seed {}: {} steps, loss MA {:.4} → {:.4}, max |eig| {}{}",
                    s.model_seed,
                    s.steps,
                    s.loss_ma_first,
                    s.loss_ma_last,
                    s.max_abs_eigenvalue.map_or("-".into(), |e| format!("{e:.4}")),
                    s.aborted.as_ref().map_or(String::new(), |a| format!(", aborted: {a}")),
                );
                if s.aborted.is_some() {
                    code = exit::DIVERGENCE as u8;
                }
            }
            Ok(code)
        }
        Command::Filter => {
            let mut c = cfg.clone();
            c.compare.clear();
            let o = run_experiment(&c)?;
            print_rows(&o);
            Ok(training_status(&o))
        }
        Command::Eval => {
            let o = run_experiment(&cfg)?;
            print_rows(&o);
            Ok(training_status(&o))
        }
        Command::Compare => {
            if cfg.compare.is_empty() {
                return Err(HarnessError::Config("compare needs at least one comparison filter".into()));
            }
            let o = run_experiment(&cfg)?;
            print_rows(&o);
            let mut metrics: Vec<&str> = Vec::new();
            for r in &o.report.rows {
                if !metrics.contains(&r.metric.as_str()) {
                    metrics.push(&r.metric);
                }
            }
            println!();
            print!("{:<24}", "filter");
            for m in &metrics {
                print!(" {m:>16}");
            }
            println!();
            let mut seen: Vec<(String, Option<u64>)> = Vec::new();
            for r in &o.report.rows {
                let key = (r.filter.clone(), r.model_seed);
                if seen.contains(&key) {
                    continue;
                }
                seen.push(key);
                let seed = r.model_seed.map(|s| format!("[seed {s}]")).unwrap_or_default();
                print!("{:<24}", format!("{}{seed}", r.filter));
                for m in &metrics {
                    match o.report.row(&r.filter, m, r.model_seed) {
                        Some(x) => print!(" {:>16.6}", x.mean),
                        None => print!(" {:>16}", "-"),
                    }
                }
                println!();
            }
            Ok(training_status(&o))
        }
        Command::Sweep => {
            let rep = sweep(&cfg)?;
            let mut code = exit::SUCCESS as u8;
            for c in &rep.cells {
                match (&c.report, &c.error) {
                    (Some(r), _) => {
                        println!("d_h {:>4}: train {:.1}s, inference {:.2}s", c.latent_dim, c.train_secs, c.inference_secs);
                        for row in &r.rows {
                            println!("    {:<24} {:<18} {:.6}", row.filter, row.metric, row.mean);
                        }
                    }
                    (None, Some(e)) => {
                        println!("d_h {:>4}: failed: {e}", c.latent_dim);
                        code = exit::OTHER as u8;
                    }
                    (None, None) => {}
                }
            }
            Ok(code)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error[config]: {e}");
            return ExitCode::from(exit::CONFIG as u8);
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
