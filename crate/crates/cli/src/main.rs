use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, CommandFactory, Parser, Subcommand};
use manipulab::harness::{self, Variant};
use manipulab::{checkpoint, gridsim, output, reward, selftest, Primitive, PrevActionContext, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "manipulab", version, about = "Grid manipulation Q-learning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key override, e.g. reward.sigma_y=2.0. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the Q-network; writes run.log, curves.csv, checkpoint.bin/.meta and config.echo.
    Train(RunArgs),
    /// Greedy evaluation of a checkpoint; writes metrics.csv.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to <out>/checkpoint.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate the baseline, tpgr and full variants over ablation.seeds.
    Ablate(RunArgs),
    /// Print a checkpoint header, or a reward map or Q-map as CSV.
    Inspect {
        #[command(subcommand)]
        what: Inspect,
    },
    /// Gradient-check and convolution-oracle suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand, Debug)]
enum Inspect {
    /// Checkpoint header as TOML.
    Header { checkpoint: PathBuf },
    /// Reward map for one action, as x,y,reward,supervised rows.
    RewardMap {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        reward: f64,
        #[arg(long)]
        x: usize,
        #[arg(long)]
        y: usize,
        /// Rotation index.
        #[arg(long, default_value_t = 0)]
        theta: usize,
    },
    /// Q-map of one primitive and rotation at the reset state of run.seed.
    QMap {
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        primitive: String,
        #[arg(long, default_value_t = 0)]
        theta: usize,
    },
}

/// Distinguishes configuration problems (exit 1) from runtime failures (exit 2).
struct ConfigError(anyhow::Error);

fn load_config(args: &RunArgs) -> Result<RunConfig, ConfigError> {
    let Some(path) = &args.config else {
        let usage = Cli::command().render_usage();
        return Err(ConfigError(anyhow::anyhow!("--config is required\n\n{usage}")));
    };
    let mut cfg = RunConfig::load(path, &args.overrides).map_err(|e| ConfigError(e.into()))?;
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    Ok(cfg)
}

fn write_echo(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join(output::CONFIG_ECHO), cfg.to_toml())?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "n/a".into())
}

fn run(cli: Cli) -> Result<(), (u8, anyhow::Error)> {
    let config = |r: Result<RunConfig, ConfigError>| r.map_err(|ConfigError(e)| (1u8, e));
    let runtime = |e: anyhow::Error| (2u8, e);
    let classify = |e: manipulab::Error| if e.is_config() { (1u8, e.into()) } else { (2u8, e.into()) };

    match cli.command {
        Command::Train(args) => {
            let cfg = config(load_config(&args))?;
            eprintln!("training {} steps, seed {}", cfg.run.train_steps, cfg.run.seed);
            let report = output::train_to_dir(&cfg, &args.out).map_err(classify)?;
            let (first, last) = report.success_rate_span(cfg.run.curve_window);
            println!(
                "episodes {}  success rate {first:.3} -> {last:.3}  final epsilon {:.4}  -> {}",
                report.episodes,
                report.final_epsilon,
                args.out.display()
            );
        }
        Command::Eval { run, checkpoint } => {
            let cfg = config(load_config(&run))?;
            let path = checkpoint.unwrap_or_else(|| run.out.join(output::CHECKPOINT));
            let (net, _) = checkpoint::load(&path)
                .with_context(|| format!("loading {}", path.display()))
                .map_err(runtime)?;
            write_echo(&cfg, &run.out).map_err(runtime)?;
            let m = output::eval_to_dir(&net, &cfg, &run.out).map_err(classify)?;
            println!(
                "completion {:.3}  pick success {}  efficiency {}  ({} runs)",
                m.completion_rate,
                fmt_opt(m.pick_success),
                fmt_opt(m.action_efficiency),
                m.runs.len()
            );
        }
        Command::Ablate(args) => {
            let cfg = config(load_config(&args))?;
            let seeds = match args.seed {
                Some(s) => vec![s],
                None => cfg.ablation.seeds.clone(),
            };
            eprintln!("ablation over seeds {seeds:?}");
            let results = harness::run_ablation_seeds(&cfg, &seeds).map_err(classify)?;
            write_echo(&cfg, &args.out).map_err(runtime)?;
            let files = [
                (output::METRICS_CSV, output::ablation_metrics_csv(&results)),
                (output::CURVES_CSV, output::ablation_curves_csv(&results)),
                ("median.csv", output::ablation_median_csv(&results)),
            ];
            for (name, text) in files {
                std::fs::write(args.out.join(name), text).map_err(|e| runtime(e.into()))?;
            }
            for v in Variant::ALL {
                let (c, e) = harness::median_metrics(&results, v);
                println!("{:<9} median completion {c:.3}  efficiency {e:.3}", v.name());
            }
        }
        Command::Inspect { what } => inspect(what)?,
        Command::Selftest { seed } => {
            let g = selftest::gradient_check(100, 20, seed);
            let smooth = selftest::smoothing_oracle(200, seed);
            let conv = selftest::conv_oracle(200, seed);
            let checks = [
                (
                    "gradient check",
                    g.max_relative_error < 1e-4 && g.compared > 0,
                    format!(
                        "max rel err {:.2e} over {} params ({} kinks skipped)",
                        g.max_relative_error, g.compared, g.kinks_skipped
                    ),
                ),
                ("reward smoothing oracle", smooth < 1e-12, format!("max abs err {smooth:.2e}")),
                ("conv layer oracle", conv < 1e-12, format!("max abs err {conv:.2e}")),
            ];
            let mut ok = true;
            for (name, pass, detail) in checks {
                println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
                ok &= pass;
            }
            if !ok {
                return Err((2, anyhow::anyhow!("selftest failed")));
            }
        }
    }
    Ok(())
}

fn inspect(what: Inspect) -> Result<(), (u8, anyhow::Error)> {
    let runtime = |e: anyhow::Error| (2u8, e);
    match what {
        Inspect::Header { checkpoint } => {
            let bytes = std::fs::read(&checkpoint)
                .with_context(|| format!("reading {}", checkpoint.display()))
                .map_err(runtime)?;
            let (header, _) = checkpoint::decode_header(&bytes).map_err(|e| runtime(e.into()))?;
            print!("{}", toml::to_string(&header).map_err(|e| runtime(e.into()))?);
            println!("# {} parameters", header.param_count());
        }
        Inspect::RewardMap { run, reward: r, x, y, theta } => {
            let cfg = load_config(&run).map_err(|ConfigError(e)| (1, e))?;
            let t = &cfg.task;
            if x >= t.width || y >= t.height || theta >= t.rotations {
                return Err((1, anyhow::anyhow!("pose ({x},{y},{theta}) outside the configured grid")));
            }
            let angle = gridsim::theta_radians(theta, t.rotations);
            let map = reward::reward_map(r, x, y, angle, t.height, t.width, &cfg.reward);
            print!("{}", map.to_csv());
        }
        Inspect::QMap { checkpoint, run, primitive, theta } => {
            let cfg = load_config(&run).map_err(|ConfigError(e)| (1, e))?;
            let Some(p) = Primitive::parse(&primitive) else {
                return Err((1, anyhow::anyhow!("unknown primitive {primitive:?}")));
            };
            let (net, _) = checkpoint::load(&checkpoint).map_err(|e| runtime(e.into()))?;
            if theta >= net.rotations {
                return Err((1, anyhow::anyhow!("rotation {theta} >= {}", net.rotations)));
            }
            let (_, obs) = gridsim::reset(&cfg.task, cfg.run.seed).map_err(|e| runtime(e.into()))?;
            let ctx = PrevActionContext::zeros(net.height, net.width);
            let q = net.forward(&obs, &ctx, p).map_err(|e| runtime(e.into()))?;
            let plane = net.height * net.width;
            println!("x,y,q");
            for (i, v) in q[theta * plane..(theta + 1) * plane].iter().enumerate() {
                println!("{},{},{v}", i % net.width, i / net.width);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn set_is_repeatable() {
        let cli = Cli::try_parse_from([
            "manipulab", "train", "--config", "c.toml", "--set", "a.b=1", "--set", "c.d=2", "--seed", "7",
        ])
        .unwrap();
        let Command::Train(args) = cli.command else { panic!("expected train") };
        assert_eq!(args.overrides, vec!["a.b=1", "c.d=2"]);
        assert_eq!(args.seed, Some(7));
    }
}
