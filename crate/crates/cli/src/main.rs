use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rppo::config::{self, KEYS};
use rppo::gmm_model::GmmParams;
use rppo::ot_distance::{gmm_tv_bound, gmm_w2};
use rppo::prox_suite::quadratic_suite;
use rppo::riemannian_prox::{optimize, ProxConfig};
use rppo::selftest::{self, SelftestOptions};
use rppo::trainer::{self, TrainConfig, CHECKPOINT_FILE, METRICS_FILE};
use rppo::{checkpoint, Error};

const DEFAULT_OUT: &str = "rppo-out";

fn keys_help() -> String {
    let mut s = String::from(
        "Configuration keys (file `key = value`, `#` comments). Precedence, lowest first: \
         built-in defaults, --config file, trailing key=value overrides, then --seed/--out.\n\n",
    );
    for (key, default, desc) in KEYS {
        s.push_str(&format!("  {key:<18} {desc} [default: {default}]\n"));
    }
    s.push_str("\nExit codes: 0 success, 1 runtime failure, 2 usage or config error.");
    s
}

#[derive(Parser)]
#[command(name = "rppo", version, about = "Proximal policy optimization over Gaussian-mixture policies")]
#[command(after_help = keys_help())]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy; writes metrics.csv and policy.gmm to the output directory
    /// (default `rppo-out`) and prints the final mean reward.
    Train {
        /// `key=value` overrides applied after the config file.
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Roll out a checkpoint in the configured environment; prints mean and std of episode reward.
    Eval {
        /// Policy checkpoint to evaluate.
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Mixture W2², total-variation bound and optimal plan between two checkpoints, as CSV.
    Distance { first: PathBuf, second: PathBuf },
    /// Run the convex quadratic suite. Prints the trace of one instance as CSV
    /// (k,f,step_dist,alpha), or with --out writes one trace file per instance.
    Optimize {
        /// Number of suite instances.
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Instance whose trace goes to standard output.
        #[arg(long, default_value_t = 0)]
        instance: usize,
    },
    /// Run the built-in numerical checks and print a pass/fail table.
    Selftest {
        /// Random instances per check.
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, hide = true)]
        inject_gradient_fault: bool,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Checkpoint { .. } | Error::DimensionMismatch { .. } => 2,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure {
            code: 1,
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        msg: msg.into(),
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn load_config(cli: &Cli, overrides: &[String]) -> std::result::Result<TrainConfig, Failure> {
    let text = match &cli.config {
        Some(p) => Some(
            fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let mut pairs = overrides
        .iter()
        .map(|o| config::parse_override(o))
        .collect::<rppo::Result<Vec<_>>>()?;
    if let Some(seed) = cli.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &cli.out {
        pairs.push(("out".into(), out.display().to_string()));
    }
    Ok(config::load(text.as_deref(), &pairs)?)
}

fn read_checkpoint(path: &Path) -> std::result::Result<GmmParams, Failure> {
    checkpoint::read(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn cmd_train(cli: &Cli, overrides: &[String]) -> CmdResult {
    let mut cfg = load_config(cli, overrides)?;
    let dir = cfg.out_dir.get_or_insert_with(|| PathBuf::from(DEFAULT_OUT)).clone();
    let outcome = trainer::train(&cfg)?;
    let last = outcome.metrics.mean_rewards().last().copied().unwrap_or(f64::NAN);
    println!("final mean reward: {last:.6}");
    log::info!(
        "wrote {} and {}",
        dir.join(METRICS_FILE).display(),
        dir.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn cmd_eval(cli: &Cli, path: &Path, episodes: usize, overrides: &[String]) -> CmdResult {
    let cfg = load_config(cli, overrides)?;
    let env = cfg.env_spec()?;
    let policy = read_checkpoint(path)?;
    if policy.state_dim() != env.state_dim || policy.action_dim() != env.action_dim {
        return Err(usage(format!(
            "checkpoint is ({}, {}) but {} needs ({}, {})",
            policy.state_dim(),
            policy.action_dim(),
            cfg.env.name(),
            env.state_dim,
            env.action_dim
        )));
    }
    let (mean, std) = trainer::evaluate(&policy, &env, episodes, cfg.seed)?;
    println!("episodes,mean_reward,std_reward");
    println!("{episodes},{mean},{std}");
    Ok(())
}

fn cmd_distance(first: &Path, second: &Path) -> CmdResult {
    let a = read_checkpoint(first)?;
    let b = read_checkpoint(second)?;
    if a.state_dim() != b.state_dim() || a.action_dim() != b.action_dim() {
        return Err(usage(format!(
            "dimension mismatch: ({}, {}) vs ({}, {})",
            a.state_dim(),
            a.action_dim(),
            b.state_dim(),
            b.action_dim()
        )));
    }
    let plan = gmm_w2(&a, &b)?;
    let tv = gmm_tv_bound(&a, &b)?;
    let mut out = io::stdout().lock();
    writeln!(out, "w2_sq,tv_bound")?;
    writeln!(out, "{},{}", plan.objective, tv)?;
    let header: Vec<String> = (0..b.k()).map(|j| format!("to_{j}")).collect();
    writeln!(out, "from,{}", header.join(","))?;
    for i in 0..a.k() {
        let row: Vec<String> = plan.plan.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{i},{}", row.join(","))?;
    }
    Ok(())
}

fn cmd_optimize(cli: &Cli, count: usize, instance: usize) -> CmdResult {
    if instance >= count {
        return Err(usage(format!("--instance {instance} out of range for --count {count}")));
    }
    let suite = quadratic_suite(count, cli.seed.unwrap_or(0));
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir)?;
    }
    for (i, inst) in suite.iter().enumerate() {
        let (_, trace) = optimize(inst.start.clone(), inst.objective.as_ref(), &ProxConfig::default())?;
        if let Some(dir) = &cli.out {
            trace.write_csv(fs::File::create(dir.join(format!("{}.csv", inst.name)))?)?;
            println!(
                "{}: {} steps, f {} -> {}, f* {}",
                inst.name,
                trace.records.len(),
                trace.initial_value().unwrap_or(f64::NAN),
                trace.final_value().unwrap_or(f64::NAN),
                inst.f_star
            );
        } else if i == instance {
            trace.write_csv(io::stdout().lock())?;
        }
    }
    Ok(())
}

fn cmd_selftest(cli: &Cli, instances: usize, fault: bool) -> CmdResult {
    let opts = SelftestOptions {
        instances,
        seed: cli.seed.unwrap_or(0),
        corrupt_gradient: fault,
    };
    let rows = selftest::run(&opts)?;
    for row in &rows {
        println!("{row}");
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", rows.len());
    if failed > 0 {
        return Err(Failure {
            code: 1,
            msg: format!("{failed} self-test check(s) failed"),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { overrides } => cmd_train(&cli, overrides),
        Command::Eval {
            checkpoint,
            episodes,
            overrides,
        } => cmd_eval(&cli, checkpoint, *episodes, overrides),
        Command::Distance { first, second } => cmd_distance(first, second),
        Command::Optimize { count, instance } => cmd_optimize(&cli, *count, *instance),
        Command::Selftest {
            instances,
            inject_gradient_fault,
        } => cmd_selftest(&cli, *instances, *inject_gradient_fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
