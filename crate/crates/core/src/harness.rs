//! Experiment orchestration: configuration, seed-parallel execution, regret
//! aggregation, and CSV emission.
//!
//! Every unit of work (one grid point, one seed) derives its random streams
//! statelessly from the master seed, so a sweep produces byte-identical
//! output regardless of the worker pool size.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::envs::{make_deep_sea, make_random_margin_mdp, DeepSeaSpec};
use crate::expert::{episodes_for_ratio, generate_offline, Competence};
use crate::mdp::{backward_induction, TabularMDP};
use crate::rlsvi::{run_agent, AgentKind, BetaMode, RlsviConfig};
use crate::rng::substream;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("bad experiment configuration: {0}")]
    Config(String),
    #[error("environment generation failed: {0}")]
    Environment(#[from] crate::envs::GenerationError),
    #[error("output i/o failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-episode and cumulative regret of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretCurve {
    pub per_episode: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub seed: u64,
    pub agent: String,
    pub config: String,
}

impl RegretCurve {
    pub fn final_cumulative(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }
}

/// Turns realized episode returns into a regret curve against the exact
/// optimal value of `env` (terminal reward included).
pub fn compute_regret(env: &TabularMDP, returns: &[f64]) -> RegretCurve {
    let q = backward_induction(env);
    let v_star: f64 = (0..env.num_states())
        .map(|s| env.initial_dist()[s] * q.state_value(0, s))
        .sum();
    let per_episode: Vec<f64> = returns.iter().map(|r| v_star - r).collect();
    let cumulative = per_episode
        .iter()
        .scan(0.0, |acc, r| {
            *acc += r;
            Some(*acc)
        })
        .collect();
    RegretCurve {
        per_episode,
        cumulative,
        seed: 0,
        agent: String::new(),
        config: String::new(),
    }
}

/// Environment selector for experiments.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvSpec {
    DeepSea { size: usize },
    Random {
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        min_margin: f64,
        seed: u64,
    },
}

impl EnvSpec {
    pub fn build(&self) -> Result<TabularMDP, HarnessError> {
        match self {
            EnvSpec::DeepSea { size } => Ok(make_deep_sea(&DeepSeaSpec::new(*size))),
            EnvSpec::Random {
                num_states,
                num_actions,
                horizon,
                min_margin,
                seed,
            } => Ok(make_random_margin_mdp(
                *num_states,
                *num_actions,
                *horizon,
                *min_margin,
                &mut crate::rng::stream(*seed),
            )?),
        }
    }

    pub fn label(&self) -> String {
        match self {
            EnvSpec::DeepSea { size } => format!("deep_sea:M={size}"),
            EnvSpec::Random {
                num_states,
                num_actions,
                horizon,
                min_margin,
                seed,
            } => format!(
                "random:S={num_states},A={num_actions},H={horizon},margin={min_margin},seed={seed}"
            ),
        }
    }
}

/// How the informed agent's deliberateness is supplied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaSource {
    /// The grid value (or the misspecification value, when a separate
    /// `beta_tilde` grid is present).
    Known,
    /// Estimated from the offline action entropy with hyperparameter `c0`.
    Entropy { c0: f64 },
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub agents: Vec<AgentKind>,
    pub episodes: usize,
    pub n_seeds: usize,
    pub kappa_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    /// Deliberateness values handed to the informed agent; `None` means the
    /// generation value is used.
    pub beta_tilde_grid: Option<Vec<f64>>,
    pub beta_source: BetaSource,
    pub master_seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Template for agent hyperparameters; kind and deliberateness are
    /// overridden per run.
    pub base: RlsviConfig,
}

impl ExperimentConfig {
    pub fn new(env: EnvSpec) -> Self {
        Self {
            env,
            agents: vec![
                AgentKind::Uninformed,
                AgentKind::PartiallyInformed,
                AgentKind::Informed,
            ],
            episodes: 300,
            n_seeds: 50,
            kappa_grid: vec![1.0],
            beta_grid: vec![1.0],
            beta_tilde_grid: None,
            beta_source: BetaSource::Known,
            master_seed: 0,
            out_dir: None,
            base: RlsviConfig::new(AgentKind::Uninformed, BetaMode::Known(0.0)),
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if self.episodes == 0 || self.n_seeds == 0 {
            return Err(HarnessError::Config(
                "episodes and n_seeds must be positive".into(),
            ));
        }
        if self.agents.is_empty() || self.kappa_grid.is_empty() || self.beta_grid.is_empty() {
            return Err(HarnessError::Config(
                "agent list and parameter grids must be nonempty".into(),
            ));
        }
        if matches!(&self.beta_tilde_grid, Some(g) if g.is_empty()) {
            return Err(HarnessError::Config("beta_tilde grid is empty".into()));
        }
        Ok(())
    }
}

/// One aggregated summary cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub agent: String,
    pub beta: f64,
    pub kappa: f64,
    pub beta_tilde: f64,
    pub mean_cumreg: f64,
    pub stderr: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
    /// Diagnostics of failed runs; execution continues past failures.
    pub failures: Vec<String>,
}

impl SummaryTable {
    pub fn find(&self, agent: &str, beta: f64, kappa: f64, beta_tilde: f64) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| {
            r.agent == agent && r.beta == beta && r.kappa == kappa && r.beta_tilde == beta_tilde
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("agent,beta,kappa,beta_tilde,mean_cumreg_T,stderr,n_seeds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.agent, r.beta, r.kappa, r.beta_tilde, r.mean_cumreg, r.stderr, r.n_seeds
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct GridPoint {
    kappa: f64,
    beta: f64,
    beta_tilde: f64,
}

struct TaskResult {
    grid_ix: usize,
    seed_ix: usize,
    curves: Vec<Result<RegretCurve, String>>,
}

/// Runs the full grid: for every `(kappa, beta, beta_tilde)` point and seed,
/// a fresh demonstration set is generated and every agent consumes that same
/// dataset. Tasks run on the current rayon pool; results are aggregated and
/// written in deterministic order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<SummaryTable, HarnessError> {
    config.validate()?;
    let env = config.env.build()?;
    let (s_n, a_n, h_n) = (env.num_states(), env.num_actions(), env.horizon());

    let mut grid = Vec::new();
    for &kappa in &config.kappa_grid {
        for &beta in &config.beta_grid {
            match &config.beta_tilde_grid {
                Some(tildes) => {
                    for &bt in tildes {
                        grid.push(GridPoint {
                            kappa,
                            beta,
                            beta_tilde: bt,
                        });
                    }
                }
                None => grid.push(GridPoint {
                    kappa,
                    beta,
                    beta_tilde: beta,
                }),
            }
        }
    }

    let tasks: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..config.n_seeds).map(move |s| (g, s)))
        .collect();

    let results: Vec<TaskResult> = tasks
        .par_iter()
        .map(|&(grid_ix, seed_ix)| {
            let point = grid[grid_ix];
            let mut data_rng =
                substream(config.master_seed, &[grid_ix as u64, seed_ix as u64, 0]);
            let episodes_offline = episodes_for_ratio(point.kappa, s_n, a_n, h_n);
            let mut data = generate_offline(
                &env,
                &Competence::exact(point.beta),
                episodes_offline,
                &mut data_rng,
            );
            data.meta.env = config.env.label();
            data.meta.kappa = Some(point.kappa);
            data.meta.seed = seed_ix as u64;
            let curves = config
                .agents
                .iter()
                .enumerate()
                .map(|(agent_ix, &agent)| {
                    let mut cfg = config.base;
                    cfg.agent = agent;
                    cfg.beta_mode = match agent {
                        AgentKind::Informed => match config.beta_source {
                            BetaSource::Entropy { c0 } => BetaMode::Entropy { c0 },
                            BetaSource::Known => {
                                if point.beta_tilde == point.beta {
                                    BetaMode::Known(point.beta)
                                } else {
                                    BetaMode::Misspecified(point.beta_tilde)
                                }
                            }
                        },
                        _ => BetaMode::Known(point.beta),
                    };
                    let mut agent_rng = substream(
                        config.master_seed,
                        &[grid_ix as u64, seed_ix as u64, 1 + agent_ix as u64],
                    );
                    run_agent(&env, &data, &cfg, config.episodes, &mut agent_rng)
                        .map(|mut curve| {
                            curve.seed = seed_ix as u64;
                            curve.config = format!(
                                "env={};beta={};kappa={};beta_tilde={}",
                                config.env.label(),
                                point.beta,
                                point.kappa,
                                point.beta_tilde
                            );
                            curve
                        })
                        .map_err(|e| {
                            format!(
                                "agent={} grid={} seed={}: {e}",
                                agent.label(),
                                grid_ix,
                                seed_ix
                            )
                        })
                })
                .collect();
            TaskResult {
                grid_ix,
                seed_ix,
                curves,
            }
        })
        .collect();

    let mut table = SummaryTable::default();
    for (grid_ix, point) in grid.iter().enumerate() {
        for (agent_ix, &agent) in config.agents.iter().enumerate() {
            let finals: Vec<f64> = results
                .iter()
                .filter(|r| r.grid_ix == grid_ix)
                .filter_map(|r| r.curves[agent_ix].as_ref().ok())
                .map(|c| c.final_cumulative())
                .collect();
            let n = finals.len();
            let mean = if n > 0 {
                finals.iter().sum::<f64>() / n as f64
            } else {
                f64::NAN
            };
            let stderr = if n > 1 {
                let var = finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                    / (n - 1) as f64;
                (var / n as f64).sqrt()
            } else {
                0.0
            };
            if n == 1 {
                eprintln!(
                    "warning: single seed for agent={} grid point {}; standard error reported as 0",
                    agent.label(),
                    grid_ix
                );
            }
            table.rows.push(SummaryRow {
                agent: agent.label().to_string(),
                beta: point.beta,
                kappa: point.kappa,
                beta_tilde: point.beta_tilde,
                mean_cumreg: mean,
                stderr,
                n_seeds: n,
            });
        }
    }
    for r in &results {
        for c in &r.curves {
            if let Err(msg) = c {
                table.failures.push(msg.clone());
            }
        }
    }

    if let Some(dir) = &config.out_dir {
        write_outputs(dir, config, &grid, &results, &table)?;
    }
    Ok(table)
}

fn curve_file_name(agent: &str, point: &GridPoint, seed: usize) -> String {
    format!(
        "{agent}_beta{}_kappa{}_bt{}_seed{seed}.csv",
        point.beta, point.kappa, point.beta_tilde, seed = seed
    )
}

fn write_outputs(
    dir: &Path,
    config: &ExperimentConfig,
    grid: &[GridPoint],
    results: &[TaskResult],
    table: &SummaryTable,
) -> Result<(), HarnessError> {
    let curves_dir = dir.join("curves");
    std::fs::create_dir_all(&curves_dir)?;
    std::fs::write(dir.join("summary.csv"), table.to_csv())?;
    for r in results {
        let point = &grid[r.grid_ix];
        for (agent_ix, curve) in r.curves.iter().enumerate() {
            let Ok(curve) = curve else { continue };
            let mut body = String::from(
                "agent,beta,kappa,beta_tilde,seed,episode,per_episode_regret,cumulative_regret\n",
            );
            for (ep, (p, c)) in curve
                .per_episode
                .iter()
                .zip(&curve.cumulative)
                .enumerate()
            {
                body.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    config.agents[agent_ix].label(),
                    point.beta,
                    point.kappa,
                    point.beta_tilde,
                    r.seed_ix,
                    ep,
                    p,
                    c
                ));
            }
            let name = curve_file_name(config.agents[agent_ix].label(), point, r.seed_ix);
            std::fs::write(curves_dir.join(name), body)?;
        }
    }
    if !table.failures.is_empty() {
        std::fs::write(dir.join("failures.log"), table.failures.join("\n"))?;
    }
    Ok(())
}

/// Flat key-value experiment file, TOML syntax. Unknown keys are rejected.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub env: String,
    #[serde(rename = "M")]
    pub deep_sea_size: Option<usize>,
    #[serde(rename = "S")]
    pub num_states: Option<usize>,
    #[serde(rename = "A")]
    pub num_actions: Option<usize>,
    #[serde(rename = "H")]
    pub horizon: Option<usize>,
    pub margin: Option<f64>,
    pub env_seed: Option<u64>,
    pub agents: Option<Vec<String>>,
    #[serde(rename = "T")]
    pub episodes: Option<usize>,
    pub n_seeds: Option<usize>,
    pub kappa_grid: Option<Vec<f64>>,
    pub beta_grid: Option<Vec<f64>>,
    pub beta_tilde_grid: Option<Vec<f64>>,
    pub beta_mode: Option<String>,
    pub c0: Option<f64>,
    pub master_seed: Option<u64>,
    pub out: Option<String>,
    pub sigma0_sq: Option<f64>,
    pub sigma_sq: Option<f64>,
    pub buffer_b: Option<usize>,
    pub alpha: Option<f64>,
    pub use_full_map_loss: Option<bool>,
    pub lambda2: Option<f64>,
}

impl ExperimentFile {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn into_config(self) -> Result<ExperimentConfig, HarnessError> {
        let env = match self.env.as_str() {
            "deep_sea" => EnvSpec::DeepSea {
                size: self
                    .deep_sea_size
                    .ok_or_else(|| HarnessError::Config("deep_sea needs M".into()))?,
            },
            "random" => EnvSpec::Random {
                num_states: self
                    .num_states
                    .ok_or_else(|| HarnessError::Config("random env needs S".into()))?,
                num_actions: self.num_actions.unwrap_or(2),
                horizon: self
                    .horizon
                    .ok_or_else(|| HarnessError::Config("random env needs H".into()))?,
                min_margin: self.margin.unwrap_or(0.1),
                seed: self.env_seed.unwrap_or(0),
            },
            other => {
                return Err(HarnessError::Config(format!("unknown env '{other}'")));
            }
        };
        let mut config = ExperimentConfig::new(env);
        if let Some(agents) = self.agents {
            config.agents = agents
                .iter()
                .map(|a| {
                    AgentKind::parse(a)
                        .ok_or_else(|| HarnessError::Config(format!("unknown agent '{a}'")))
                })
                .collect::<Result<_, _>>()?;
        }
        if let Some(t) = self.episodes {
            config.episodes = t;
        }
        if let Some(n) = self.n_seeds {
            config.n_seeds = n;
        }
        if let Some(g) = self.kappa_grid {
            config.kappa_grid = g;
        }
        if let Some(g) = self.beta_grid {
            config.beta_grid = g;
        }
        config.beta_tilde_grid = self.beta_tilde_grid;
        config.beta_source = match self.beta_mode.as_deref() {
            None | Some("known") => BetaSource::Known,
            Some("entropy") => BetaSource::Entropy {
                c0: self.c0.unwrap_or(1.0),
            },
            Some(other) => {
                return Err(HarnessError::Config(format!("unknown beta_mode '{other}'")));
            }
        };
        if let Some(seed) = self.master_seed {
            config.master_seed = seed;
        }
        config.out_dir = self.out.map(PathBuf::from);
        if let Some(v) = self.sigma0_sq {
            config.base.sigma0_sq = v;
        }
        if let Some(v) = self.sigma_sq {
            config.base.sigma_sq = v;
        }
        if let Some(v) = self.buffer_b {
            config.base.buffer_b = v;
        }
        if let Some(v) = self.alpha {
            config.base.alpha = v;
        }
        if let Some(v) = self.use_full_map_loss {
            config.base.use_full_map_loss = v;
        }
        if let Some(v) = self.lambda2 {
            config.base.lambda2 = v;
        }
        Ok(config)
    }
}
