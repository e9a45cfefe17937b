//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 on usage or configuration errors, 3 on
//! runtime failures. `REGRET_FORGE_THREADS` caps the worker pool.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::envs::make_random_hypothesis_set;
use crate::expert::{episodes_for_ratio, generate_offline, Competence};
use crate::harness::{
    run_experiment, BetaSource, EnvSpec, ExperimentConfig, ExperimentFile,
};
use crate::ipsrl::{
    beta_threshold, epsilon_bound, estimate_epsilon_mc, EpsilonReport, HypothesisSet,
};
use crate::mdp::{compute_margin, compute_p_underbar};
use crate::rlsvi::AgentKind;
use crate::rng::{stream, substream};

#[derive(Parser)]
#[command(
    name = "regret-forge",
    about = "Tabular episodic RL experiments: demonstration-bootstrapped agents and regret benchmarks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an expert demonstration dataset and write it as JSON lines.
    GenOffline(GenOfflineArgs),
    /// Run one experiment grid point over several seeds and write CSVs.
    Run(RunArgs),
    /// Run a full grid sweep from an experiment file.
    Sweep(SweepArgs),
    /// Print the closed-form error bound and deliberateness threshold.
    Bound(BoundArgs),
    /// Monte-Carlo estimate of first-episode policy error probabilities.
    EstimateEps(EstimateEpsArgs),
}

#[derive(Args)]
struct EnvArgs {
    /// Environment family: deep_sea or random.
    #[arg(long, default_value = "deep_sea")]
    env: String,
    /// Deep sea size.
    #[arg(long = "M", default_value_t = 10)]
    m: usize,
    /// Random-environment state count.
    #[arg(long = "S")]
    s: Option<usize>,
    /// Random-environment action count.
    #[arg(long = "A", default_value_t = 2)]
    a: usize,
    /// Random-environment horizon.
    #[arg(long = "H")]
    h: Option<usize>,
    /// Random-environment action-gap certification level.
    #[arg(long, default_value_t = 0.1)]
    margin: f64,
    /// Random-environment generation seed.
    #[arg(long, default_value_t = 0)]
    env_seed: u64,
}

impl EnvArgs {
    fn to_spec(&self) -> Result<EnvSpec, String> {
        match self.env.as_str() {
            "deep_sea" => Ok(EnvSpec::DeepSea { size: self.m }),
            "random" => Ok(EnvSpec::Random {
                num_states: self.s.ok_or("random env needs --S")?,
                num_actions: self.a,
                horizon: self.h.ok_or("random env needs --H")?,
                min_margin: self.margin,
                seed: self.env_seed,
            }),
            other => Err(format!("unknown env '{other}'")),
        }
    }
}

#[derive(Args)]
struct GenOfflineArgs {
    #[command(flatten)]
    env: EnvArgs,
    /// Expert deliberateness.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Expert knowledgeability; omit for exact knowledge.
    #[arg(long)]
    lambda: Option<f64>,
    /// Data ratio; episode count is round(kappa * A * S / H).
    #[arg(long)]
    kappa: Option<f64>,
    /// Explicit episode count (overrides --kappa).
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path for the JSON-lines dataset.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    env: EnvArgs,
    /// Comma-separated agent list: urlsvi, pirlsvi, irlsvi.
    #[arg(long = "agent", default_value = "urlsvi,pirlsvi,irlsvi")]
    agents: String,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    kappa: f64,
    /// Deliberateness handed to the informed agent when it differs from the
    /// generation value.
    #[arg(long)]
    beta_tilde: Option<f64>,
    /// Episodes per run.
    #[arg(long = "T", default_value_t = 300)]
    episodes: usize,
    #[arg(long = "seeds", default_value_t = 50)]
    n_seeds: usize,
    #[arg(long, default_value_t = 0)]
    master_seed: u64,
    /// Use the entropy estimator for the informed agent's deliberateness.
    #[arg(long)]
    entropy_beta: bool,
    /// Entropy estimator hyperparameter.
    #[arg(long, default_value_t = 1.0)]
    c0: f64,
    #[arg(long, default_value = "regret-forge-out")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment file (flat TOML keys).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the output directory from the file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the episode count from the file.
    #[arg(long = "T")]
    episodes: Option<usize>,
    /// Overrides the seed count from the file.
    #[arg(long = "seeds")]
    n_seeds: Option<usize>,
    /// Overrides the master seed from the file.
    #[arg(long)]
    master_seed: Option<u64>,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long = "S")]
    s: usize,
    #[arg(long = "H")]
    h: usize,
    /// Reachability floor.
    #[arg(long = "p")]
    p: f64,
    /// Offline episode count.
    #[arg(long = "L")]
    l: usize,
    /// Action gap; when present the deliberateness threshold is printed too.
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long = "A", default_value_t = 2)]
    a: usize,
}

#[derive(Args)]
struct EstimateEpsArgs {
    #[arg(long = "S", default_value_t = 3)]
    s: usize,
    #[arg(long = "A", default_value_t = 2)]
    a: usize,
    #[arg(long = "H", default_value_t = 3)]
    h: usize,
    /// Hypothesis count in the generated model class.
    #[arg(long, default_value_t = 4)]
    hypotheses: usize,
    /// Action-gap certification level for every hypothesis.
    #[arg(long, default_value_t = 0.3)]
    margin: f64,
    /// Expert deliberateness; overrides --beta-mult.
    #[arg(long)]
    beta: Option<f64>,
    /// Deliberateness as a multiple of the threshold value.
    #[arg(long, default_value_t = 2.0)]
    beta_mult: f64,
    /// Comma-separated offline episode grid.
    #[arg(long = "L", default_value = "0,25,50,100,200")]
    l_grid: String,
    #[arg(long, default_value_t = 2000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional CSV output path; rows also print to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Entry point used by the binary and by tests. Returns the process exit
/// code instead of exiting.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = err.print();
            return code;
        }
    };
    let pool = match build_pool() {
        Ok(pool) => pool,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 2;
        }
    };
    let run = || match cli.command {
        Command::GenOffline(args) => gen_offline(args),
        Command::Run(args) => run_single(args),
        Command::Sweep(args) => sweep(args),
        Command::Bound(args) => bound(args),
        Command::EstimateEps(args) => estimate_eps(args),
    };
    let outcome = match pool {
        Some(pool) => pool.install(run),
        None => run(),
    };
    match outcome {
        Ok(()) => 0,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            3
        }
    }
}

enum CliError {
    Config(String),
    Runtime(String),
}

fn config_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn build_pool() -> Result<Option<rayon::ThreadPool>, String> {
    let Ok(raw) = std::env::var("REGRET_FORGE_THREADS") else {
        return Ok(None);
    };
    let threads: usize = raw
        .parse()
        .map_err(|_| format!("REGRET_FORGE_THREADS must be a positive integer, got '{raw}'"))?;
    if threads == 0 {
        return Err("REGRET_FORGE_THREADS must be positive".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| e.to_string())
}

fn parse_agents(text: &str) -> Result<Vec<AgentKind>, CliError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            AgentKind::parse(s).ok_or_else(|| CliError::Config(format!("unknown agent '{s}'")))
        })
        .collect()
}

fn gen_offline(args: GenOfflineArgs) -> Result<(), CliError> {
    let spec = args.env.to_spec().map_err(CliError::Config)?;
    let env = spec.build().map_err(runtime_err)?;
    let episodes = match (args.episodes, args.kappa) {
        (Some(n), _) => n,
        (None, Some(kappa)) => {
            episodes_for_ratio(kappa, env.num_states(), env.num_actions(), env.horizon())
        }
        (None, None) => {
            return Err(CliError::Config(
                "provide --episodes or --kappa".into(),
            ));
        }
    };
    let competence = Competence::new(args.beta, args.lambda.unwrap_or(f64::INFINITY));
    let mut rng = stream(args.seed);
    let mut data = generate_offline(&env, &competence, episodes, &mut rng);
    data.meta.env = spec.label();
    data.meta.kappa = args.kappa;
    data.meta.seed = args.seed;
    data.save_jsonl(&args.out).map_err(runtime_err)?;
    println!(
        "wrote {} transitions ({} episodes) to {}",
        data.len(),
        data.num_episodes,
        args.out.display()
    );
    Ok(())
}

fn run_single(args: RunArgs) -> Result<(), CliError> {
    let spec = args.env.to_spec().map_err(CliError::Config)?;
    let mut config = ExperimentConfig::new(spec);
    config.agents = parse_agents(&args.agents)?;
    config.episodes = args.episodes;
    config.n_seeds = args.n_seeds;
    config.kappa_grid = vec![args.kappa];
    config.beta_grid = vec![args.beta];
    config.beta_tilde_grid = args.beta_tilde.map(|b| vec![b]);
    config.beta_source = if args.entropy_beta {
        BetaSource::Entropy { c0: args.c0 }
    } else {
        BetaSource::Known
    };
    config.master_seed = args.master_seed;
    config.out_dir = Some(args.out.clone());
    let table = run_experiment(&config).map_err(runtime_err)?;
    print!("{}", table.to_csv());
    report_failures(&table.failures)
}

fn sweep(args: SweepArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.config).map_err(config_err)?;
    let mut config = ExperimentFile::parse(&text)
        .and_then(|f| f.into_config())
        .map_err(config_err)?;
    if let Some(out) = args.out {
        config.out_dir = Some(out);
    }
    if let Some(t) = args.episodes {
        config.episodes = t;
    }
    if let Some(n) = args.n_seeds {
        config.n_seeds = n;
    }
    if let Some(seed) = args.master_seed {
        config.master_seed = seed;
    }
    let table = run_experiment(&config).map_err(runtime_err)?;
    print!("{}", table.to_csv());
    report_failures(&table.failures)
}

fn report_failures(failures: &[String]) -> Result<(), CliError> {
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "{} run(s) failed; first: {}",
            failures.len(),
            failures[0]
        )))
    }
}

fn bound(args: BoundArgs) -> Result<(), CliError> {
    if args.p <= 0.0 || args.p > 1.0 {
        return Err(CliError::Config("--p must lie in (0, 1]".into()));
    }
    let eps = epsilon_bound(args.s, args.h, args.l, args.p);
    println!("eps_L = {eps:.4}");
    if let Some(margin) = args.margin {
        let thr = beta_threshold(margin, args.p, args.h, args.a).map_err(config_err)?;
        println!("beta_lower = {thr:.4}");
    }
    Ok(())
}

fn estimate_eps(args: EstimateEpsArgs) -> Result<(), CliError> {
    let l_grid: Vec<usize> = args
        .l_grid
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| {
            CliError::Config(format!("bad episode count '{s}' in --L"))
        }))
        .collect::<Result<_, _>>()?;
    if l_grid.is_empty() {
        return Err(CliError::Config("--L grid is empty".into()));
    }
    let mut gen_rng = substream(args.seed, &[0]);
    let hypotheses =
        make_random_hypothesis_set(args.s, args.a, args.h, args.hypotheses, args.margin, &mut gen_rng)
            .map_err(runtime_err)?;
    let margin = hypotheses
        .iter()
        .map(|m| compute_margin(m).expect("generator certifies the margin"))
        .fold(f64::INFINITY, f64::min);
    let p_underbar = compute_p_underbar(&hypotheses);
    let beta = match args.beta {
        Some(b) => b,
        None => {
            args.beta_mult
                * beta_threshold(margin, p_underbar, args.h, args.a).map_err(config_err)?
        }
    };
    let set = HypothesisSet::uniform(hypotheses).map_err(runtime_err)?;
    println!(
        "# margin={margin:.4} p_underbar={p_underbar:.4} beta={beta:.4} trials={}",
        args.trials
    );
    let mut rows = vec![EpsilonReport::csv_header().to_string()];
    for (ix, &episodes) in l_grid.iter().enumerate() {
        let mut rng = substream(args.seed, &[1 + ix as u64]);
        let report = estimate_epsilon_mc(&set, beta, episodes, args.trials, &mut rng);
        rows.push(report.csv_row());
    }
    let body = rows.join("\n") + "\n";
    print!("{body}");
    if let Some(path) = args.out {
        std::fs::write(&path, body).map_err(runtime_err)?;
    }
    Ok(())
}
