//! The bootstrapped randomized value-iteration agent family.
//!
//! All three agents resample a value table every episode by minimizing a
//! perturbed regression loss backward over periods: squared temporal
//! difference terms with fresh Gaussian target noise, a Gaussian prior draw
//! acting as a ridge center, and (for the informed agent) a log-loss term
//! tying the row softmax to sampled expert actions. They differ only in
//! which data feeds the quadratic term and whether the imitation term is
//! present:
//!
//! | agent    | demonstrations in the TD loss | imitation term |
//! |----------|-------------------------------|----------------|
//! | urlsvi   | no                            | no             |
//! | pirlsvi  | yes                           | no             |
//! | irlsvi   | yes                           | yes            |

use ndarray::Array3;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp1, StandardNormal};
use thiserror::Error;

use crate::expert::{estimate_beta_entropy, OfflineDataset};
use crate::harness::RegretCurve;
use crate::mdp::{backward_induction, sample_index, QTable, TabularMDP};
use crate::rng::{stream, RandomStream};

#[derive(Debug, Error)]
pub enum RlsviError {
    #[error("row solve stalled after {max_iters} iterations at (h={period}, s={state})")]
    SolverDiverged {
        period: usize,
        state: usize,
        max_iters: usize,
    },
    #[error("episode {episode}: {source}")]
    EpisodeFailed {
        episode: usize,
        #[source]
        source: Box<RlsviError>,
    },
    #[error("invalid agent configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Uninformed,
    PartiallyInformed,
    Informed,
}

impl AgentKind {
    pub fn label(&self) -> &'static str {
        match self {
            AgentKind::Uninformed => "urlsvi",
            AgentKind::PartiallyInformed => "pirlsvi",
            AgentKind::Informed => "irlsvi",
        }
    }

    pub fn parse(text: &str) -> Option<AgentKind> {
        match text.trim().to_ascii_lowercase().as_str() {
            "urlsvi" | "uninformed" => Some(AgentKind::Uninformed),
            "pirlsvi" | "partially_informed" => Some(AgentKind::PartiallyInformed),
            "irlsvi" | "informed" => Some(AgentKind::Informed),
            _ => None,
        }
    }
}

/// How the informed agent obtains its deliberateness parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaMode {
    /// The generation value is known exactly.
    Known(f64),
    /// Estimated once from the offline action entropy at startup.
    Entropy { c0: f64 },
    /// Deliberately wrong value, for robustness studies.
    Misspecified(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlsviConfig {
    /// Prior variance of the value table entries.
    pub sigma0_sq: f64,
    /// Variance of the fresh noise added to every regression target.
    pub sigma_sq: f64,
    /// Demonstration tuples drawn per period for the imitation term.
    pub buffer_b: usize,
    pub agent: AgentKind,
    pub beta_mode: BetaMode,
    /// Interpolation between the value-regression loss (with its prior term)
    /// at `alpha` and the imitation loss at `1 - alpha`. `0.5` weighs them
    /// equally; `1` disables imitation. At exactly `0` the prior term is
    /// kept at unit weight so the row problem stays well posed.
    pub alpha: f64,
    /// Enables exponential weights on imitation entries and alternating
    /// 1-D deliberateness optimization with rate `lambda2`.
    pub use_full_map_loss: bool,
    pub lambda2: f64,
    pub solver_tol: f64,
    pub solver_max_iters: usize,
}

impl RlsviConfig {
    pub fn new(agent: AgentKind, beta_mode: BetaMode) -> Self {
        Self {
            sigma0_sq: 1.0,
            sigma_sq: 0.1,
            buffer_b: 20,
            agent,
            beta_mode,
            alpha: 0.5,
            use_full_map_loss: false,
            lambda2: 1.0,
            solver_tol: 1e-8,
            solver_max_iters: 100,
        }
    }

    fn validate(&self) -> Result<(), RlsviError> {
        if !(self.sigma0_sq > 0.0 && self.sigma_sq > 0.0) {
            return Err(RlsviError::InvalidConfig(
                "variances must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(RlsviError::InvalidConfig("alpha must lie in [0, 1]".into()));
        }
        if self.buffer_b == 0 {
            return Err(RlsviError::InvalidConfig("buffer_b must be positive".into()));
        }
        Ok(())
    }
}

/// One replay tuple `(s, a, h, s', r)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BufferEntry {
    pub state: usize,
    pub action: usize,
    pub period: usize,
    pub next_state: usize,
    pub reward: f64,
}

/// Demonstration records as replay tuples.
pub fn offline_entries(data: &OfflineDataset) -> Vec<BufferEntry> {
    data.transitions
        .iter()
        .map(|t| BufferEntry {
            state: t.state,
            action: t.action,
            period: t.period,
            next_state: t.next_state,
            reward: t.reward,
        })
        .collect()
}

/// The randomness of one value-table resample: fresh target noise per replay
/// tuple, a fresh prior draw per `(h, s, a)` cell, and the per-period
/// demonstration subsamples (with unit or exponential weights) feeding the
/// imitation term. Drawn once per resample and never reused.
pub struct PerturbedBatch {
    /// Target noise aligned with the replay tuples fed to the solve.
    pub noise: Vec<f64>,
    /// Ridge centers for periods `0..H`.
    pub prior: Array3<f64>,
    /// Per period: sampled demonstration indices with weights.
    pub il_draws: Vec<Vec<(usize, f64)>>,
}

#[allow(clippy::too_many_arguments)]
fn draw_batch(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    quad_len: usize,
    offline: &[BufferEntry],
    config: &RlsviConfig,
    beta: f64,
    noise_rng: &mut RandomStream,
    buffer_rng: &mut RandomStream,
) -> PerturbedBatch {
    let sigma0 = config.sigma0_sq.sqrt();
    let sigma = config.sigma_sq.sqrt();
    let mut prior = Array3::zeros((horizon, num_states, num_actions));
    for v in prior.iter_mut() {
        let g: f64 = StandardNormal.sample(noise_rng);
        *v = sigma0 * g;
    }
    let mut noise = Vec::with_capacity(quad_len);
    for _ in 0..quad_len {
        let g: f64 = StandardNormal.sample(noise_rng);
        noise.push(sigma * g);
    }
    let mut il_draws = vec![Vec::new(); horizon];
    let imitation_on = config.agent == AgentKind::Informed
        && beta > 0.0
        && config.alpha < 1.0
        && !offline.is_empty();
    if imitation_on {
        let n = offline.len();
        let take = config.buffer_b.min(n);
        let mut pool: Vec<usize> = (0..n).collect();
        for h in (0..horizon).rev() {
            // Partial Fisher-Yates; restricted to this period afterwards.
            for i in 0..take {
                let j = i + buffer_rng.random_range(0..n - i);
                pool.swap(i, j);
            }
            for &ix in &pool[..take] {
                if offline[ix].period == h {
                    let w = if config.use_full_map_loss {
                        Exp1.sample(buffer_rng)
                    } else {
                        1.0
                    };
                    il_draws[h].push((ix, w));
                }
            }
        }
    }
    PerturbedBatch {
        noise,
        prior,
        il_draws,
    }
}

/// Ridge regression for a single cell:
/// `(sum targets + prior / sigma0_sq) / (n + 1 / sigma0_sq)`.
pub fn rlsvi_row_solve(targets: &[f64], prior: f64, sigma0_sq: f64) -> f64 {
    let n = targets.len() as f64;
    (targets.iter().sum::<f64>() + prior / sigma0_sq) / (n + 1.0 / sigma0_sq)
}

/// Per-episode solver counters, emitted as JSON lines by
/// [`run_agent_logged`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolverDiagnostics {
    pub episode: usize,
    /// Rows that needed the joint Newton solve.
    pub newton_rows: usize,
    /// Newton iterations summed over those rows.
    pub newton_iterations: usize,
    /// Largest gradient norm left at an accepted solution.
    pub worst_residual: f64,
}

impl SolverDiagnostics {
    pub fn to_json_line(&self) -> String {
        format!(
            "{{\"episode\":{},\"newton_rows\":{},\"newton_iterations\":{},\"worst_residual\":{}}}",
            self.episode, self.newton_rows, self.newton_iterations, self.worst_residual
        )
    }
}

fn log_sum_exp_scaled(q_row: &[f64], beta: f64) -> f64 {
    let max = q_row
        .iter()
        .map(|&q| beta * q)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = q_row.iter().map(|&q| (beta * q - max).exp()).sum();
    max + sum.ln()
}

fn softmax_scaled(q_row: &[f64], beta: f64) -> Vec<f64> {
    let max = q_row
        .iter()
        .map(|&q| beta * q)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = q_row.iter().map(|&q| (beta * q - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Imitation log loss of one row:
/// `sum_a counts[a] * (log sum_b exp(beta q[b]) - beta q[a])`.
pub fn il_loss(q_row: &[f64], counts: &[f64], beta: f64) -> f64 {
    let total: f64 = counts.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let lse = log_sum_exp_scaled(q_row, beta);
    let mut loss = total * lse;
    for (q, c) in q_row.iter().zip(counts) {
        loss -= c * beta * q;
    }
    loss
}

/// Analytic gradient of [`il_loss`] in the row values.
pub fn il_loss_grad(q_row: &[f64], counts: &[f64], beta: f64) -> Vec<f64> {
    let total: f64 = counts.iter().sum();
    if total == 0.0 {
        return vec![0.0; q_row.len()];
    }
    let soft = softmax_scaled(q_row, beta);
    soft.iter()
        .zip(counts)
        .map(|(&p, &c)| beta * (total * p - c))
        .collect()
}

/// Interpolated objective `alpha * online_part + (1 - alpha) * il_part +
/// lambda2 * beta`.
pub fn combined_loss_alpha(
    rlsvi_part: f64,
    il_part: f64,
    alpha: f64,
    lambda2: f64,
    beta: f64,
) -> f64 {
    alpha * rlsvi_part + (1.0 - alpha) * il_part + lambda2 * beta
}

struct RowWeights {
    quad: f64,
    ridge: f64,
    il: f64,
}

fn row_weights(alpha: f64) -> RowWeights {
    RowWeights {
        quad: alpha,
        ridge: if alpha > 0.0 { alpha } else { 1.0 },
        il: 1.0 - alpha,
    }
}

#[allow(clippy::too_many_arguments)]
fn row_objective(
    q: &[f64],
    quad_sums: &[f64],
    quad_counts: &[f64],
    quad_sq: &[f64],
    il_counts: &[f64],
    beta: f64,
    prior_row: &[f64],
    sigma0_sq: f64,
    w: &RowWeights,
) -> f64 {
    let mut value = 0.0;
    for a in 0..q.len() {
        let quad =
            0.5 * (quad_counts[a] * q[a] * q[a] - 2.0 * q[a] * quad_sums[a] + quad_sq[a]);
        let ridge = (q[a] - prior_row[a]).powi(2) / (2.0 * sigma0_sq);
        value += w.quad * quad + w.ridge * ridge;
    }
    value + w.il * il_loss(q, il_counts, beta)
}

/// Solves an A×A symmetric positive-definite system in place.
fn solve_linear(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if m[row][col].abs() > m[pivot][col].abs() {
                pivot = row;
            }
        }
        m.swap(col, pivot);
        b.swap(col, pivot);
        let diag = m[col][col];
        for row in col + 1..n {
            let f = m[row][col] / diag;
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    x
}

/// Joint minimizer of one state's row under quadratic target terms, the
/// ridge prior, and the imitation log loss. Damped Newton on the convex
/// objective; the quadratic-only closed form is the starting point.
pub fn irlsvi_row_solve(
    quad_targets: &[Vec<f64>],
    il_counts: &[f64],
    beta: f64,
    prior_row: &[f64],
    config: &RlsviConfig,
) -> Result<Vec<f64>, RlsviError> {
    newton_row_solve(quad_targets, il_counts, beta, prior_row, config).map(|(row, _, _)| row)
}

/// As [`irlsvi_row_solve`], also reporting iterations spent and the gradient
/// norm at the accepted point.
fn newton_row_solve(
    quad_targets: &[Vec<f64>],
    il_counts: &[f64],
    beta: f64,
    prior_row: &[f64],
    config: &RlsviConfig,
) -> Result<(Vec<f64>, usize, f64), RlsviError> {
    let a_n = prior_row.len();
    let w = row_weights(config.alpha);
    let quad_counts: Vec<f64> = quad_targets.iter().map(|t| t.len() as f64).collect();
    let quad_sums: Vec<f64> = quad_targets.iter().map(|t| t.iter().sum()).collect();
    let quad_sq: Vec<f64> = quad_targets
        .iter()
        .map(|t| t.iter().map(|x| x * x).sum())
        .collect();
    let mut q: Vec<f64> = (0..a_n)
        .map(|a| {
            (w.quad * quad_sums[a] + w.ridge * prior_row[a] / config.sigma0_sq)
                / (w.quad * quad_counts[a] + w.ridge / config.sigma0_sq)
        })
        .collect();
    let total_il: f64 = il_counts.iter().sum();
    if total_il == 0.0 || beta == 0.0 || w.il == 0.0 {
        return Ok((q, 0, 0.0));
    }
    let objective = |q: &[f64]| {
        row_objective(
            q,
            &quad_sums,
            &quad_counts,
            &quad_sq,
            il_counts,
            beta,
            prior_row,
            config.sigma0_sq,
            &w,
        )
    };
    let mut value = objective(&q);
    for iteration in 0..config.solver_max_iters {
        let soft = softmax_scaled(&q, beta);
        let mut grad = vec![0.0; a_n];
        let mut hess = vec![vec![0.0; a_n]; a_n];
        for a in 0..a_n {
            grad[a] = w.quad * (quad_counts[a] * q[a] - quad_sums[a])
                + w.ridge * (q[a] - prior_row[a]) / config.sigma0_sq
                + w.il * beta * (total_il * soft[a] - il_counts[a]);
            for b in 0..a_n {
                let curv = if a == b {
                    soft[a] * (1.0 - soft[a])
                } else {
                    -soft[a] * soft[b]
                };
                hess[a][b] = w.il * beta * beta * total_il * curv;
            }
            hess[a][a] += w.quad * quad_counts[a] + w.ridge / config.sigma0_sq;
        }
        let grad_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_norm <= config.solver_tol {
            return Ok((q, iteration, grad_norm));
        }
        let step = solve_linear(hess, grad.iter().map(|g| -g).collect());
        let mut t = 1.0;
        let mut advanced = false;
        for _ in 0..30 {
            let candidate: Vec<f64> =
                q.iter().zip(&step).map(|(qi, si)| qi + t * si).collect();
            let cand_value = objective(&candidate);
            if cand_value <= value {
                q = candidate;
                value = cand_value;
                advanced = true;
                break;
            }
            t *= 0.5;
        }
        if !advanced {
            // The step cannot decrease a convex objective only at the
            // numerical floor; accept the current point if the gradient is
            // merely slightly above tolerance.
            if grad_norm <= config.solver_tol * 1e3 {
                return Ok((q, iteration, grad_norm));
            }
            return Err(RlsviError::SolverDiverged {
                period: 0,
                state: 0,
                max_iters: config.solver_max_iters,
            });
        }
    }
    let soft = softmax_scaled(&q, beta);
    let grad_norm = (0..a_n)
        .map(|a| {
            (w.quad * (quad_counts[a] * q[a] - quad_sums[a])
                + w.ridge * (q[a] - prior_row[a]) / config.sigma0_sq
                + w.il * beta * (total_il * soft[a] - il_counts[a]))
                .abs()
        })
        .fold(0.0f64, f64::max);
    if grad_norm <= config.solver_tol * 1e3 {
        Ok((q, config.solver_max_iters, grad_norm))
    } else {
        Err(RlsviError::SolverDiverged {
            period: 0,
            state: 0,
            max_iters: config.solver_max_iters,
        })
    }
}

fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Resamples the agent's value table for one episode.
///
/// Backward pass over periods `H-1..0` against a zero terminal stage
/// (terminal rewards are folded into final-period replay tuples). Cells
/// with quadratic data only use the ridge closed form; rows touched by the
/// imitation term solve the joint convex problem. The two internal streams
/// (noise, demonstration subsampling) are derived from `rng` so agents with
/// and without the imitation term stay aligned on the noise draws.
#[allow(clippy::too_many_arguments)]
pub fn sample_q_hat(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    online: &[BufferEntry],
    offline: &[BufferEntry],
    config: &RlsviConfig,
    beta: f64,
    rng: &mut RandomStream,
) -> Result<QTable, RlsviError> {
    sample_q_hat_impl(
        num_states,
        num_actions,
        horizon,
        online,
        offline,
        config,
        beta,
        rng,
        None,
    )
}

#[allow(clippy::too_many_arguments)]
fn sample_q_hat_impl(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    online: &[BufferEntry],
    offline: &[BufferEntry],
    config: &RlsviConfig,
    beta: f64,
    rng: &mut RandomStream,
    mut diag: Option<&mut SolverDiagnostics>,
) -> Result<QTable, RlsviError> {
    config.validate()?;
    let mut noise_rng = stream(rng.next_u64());
    let mut buffer_rng = stream(rng.next_u64());
    let use_offline_quad = config.agent != AgentKind::Uninformed;
    let quad_len = online.len() + if use_offline_quad { offline.len() } else { 0 };
    let batch = draw_batch(
        num_states,
        num_actions,
        horizon,
        quad_len,
        offline,
        config,
        beta,
        &mut noise_rng,
        &mut buffer_rng,
    );

    // Replay tuples in noise order, bucketed by period.
    let mut by_period: Vec<Vec<(usize, &BufferEntry)>> = vec![Vec::new(); horizon];
    let mut cursor = 0usize;
    if use_offline_quad {
        for e in offline {
            by_period[e.period].push((cursor, e));
            cursor += 1;
        }
    }
    for e in online {
        by_period[e.period].push((cursor, e));
        cursor += 1;
    }

    let full_map = config.use_full_map_loss
        && config.agent == AgentKind::Informed
        && batch.il_draws.iter().any(|d| !d.is_empty());
    let rounds = if full_map { 3 } else { 1 };
    let mut beta_cur = beta;
    let mut qhat = QTable::zeros(horizon, num_states, num_actions);
    let mut targets: Vec<Vec<f64>> = vec![Vec::new(); num_states * num_actions];
    let mut il_counts = vec![0.0; num_states * num_actions];

    for round in 0..rounds {
        qhat.values.fill(0.0);
        for h in (0..horizon).rev() {
            for t in targets.iter_mut() {
                t.clear();
            }
            il_counts.iter_mut().for_each(|c| *c = 0.0);
            for &(noise_ix, e) in &by_period[h] {
                let mut vnext = f64::NEG_INFINITY;
                for b in 0..num_actions {
                    vnext = vnext.max(qhat.values[[h + 1, e.next_state, b]]);
                }
                targets[e.state * num_actions + e.action]
                    .push(e.reward + batch.noise[noise_ix] + vnext);
            }
            for &(ix, w) in &batch.il_draws[h] {
                let e = &offline[ix];
                il_counts[e.state * num_actions + e.action] += w;
            }
            for s in 0..num_states {
                let base = s * num_actions;
                let has_il = il_counts[base..base + num_actions].iter().any(|&c| c > 0.0);
                if has_il && beta_cur > 0.0 && config.alpha < 1.0 {
                    let (row, iters, residual) = newton_row_solve(
                        &targets[base..base + num_actions],
                        &il_counts[base..base + num_actions],
                        beta_cur,
                        prior_row(&batch.prior, h, s, num_actions).as_slice(),
                        config,
                    )
                    .map_err(|e| match e {
                        RlsviError::SolverDiverged { max_iters, .. } => {
                            RlsviError::SolverDiverged {
                                period: h,
                                state: s,
                                max_iters,
                            }
                        }
                        other => other,
                    })?;
                    if let Some(d) = diag.as_deref_mut() {
                        d.newton_rows += 1;
                        d.newton_iterations += iters;
                        d.worst_residual = d.worst_residual.max(residual);
                    }
                    for a in 0..num_actions {
                        qhat.values[[h, s, a]] = row[a];
                    }
                } else {
                    let w = row_weights(config.alpha);
                    for a in 0..num_actions {
                        let cell = &targets[base + a];
                        let p = batch.prior[[h, s, a]];
                        qhat.values[[h, s, a]] = if w.quad == w.ridge {
                            rlsvi_row_solve(cell, p, config.sigma0_sq)
                        } else {
                            (w.quad * cell.iter().sum::<f64>()
                                + w.ridge * p / config.sigma0_sq)
                                / (w.quad * cell.len() as f64 + w.ridge / config.sigma0_sq)
                        };
                    }
                }
            }
        }
        if full_map && round + 1 < rounds {
            // Hold the table fixed and improve the deliberateness estimate.
            let il_term = |b: f64| {
                let mut loss = config.lambda2 * b;
                for (h, draws) in batch.il_draws.iter().enumerate() {
                    for &(ix, w) in draws {
                        let e = &offline[ix];
                        let row: Vec<f64> = (0..num_actions)
                            .map(|a| qhat.values[[h, e.state, a]])
                            .collect();
                        loss += w * (log_sum_exp_scaled(&row, b) - b * row[e.action]);
                    }
                }
                loss
            };
            beta_cur = golden_min(il_term, 0.0, 100.0, 60);
        }
    }
    Ok(qhat)
}

fn prior_row(prior: &Array3<f64>, h: usize, s: usize, num_actions: usize) -> Vec<f64> {
    (0..num_actions).map(|a| prior[[h, s, a]]).collect()
}

/// Runs one agent for `episodes` episodes and reports its regret curve.
pub fn run_agent(
    env: &TabularMDP,
    offline_data: &OfflineDataset,
    config: &RlsviConfig,
    episodes: usize,
    rng: &mut RandomStream,
) -> Result<RegretCurve, RlsviError> {
    run_agent_impl(env, offline_data, config, episodes, rng, None, None)
}

/// As [`run_agent`], additionally returning the value table sampled at each
/// episode. Used for agent-identity checks.
pub fn run_agent_traced(
    env: &TabularMDP,
    offline_data: &OfflineDataset,
    config: &RlsviConfig,
    episodes: usize,
    rng: &mut RandomStream,
) -> Result<(RegretCurve, Vec<QTable>), RlsviError> {
    let mut trace = Vec::with_capacity(episodes);
    let curve = run_agent_impl(env, offline_data, config, episodes, rng, Some(&mut trace), None)?;
    Ok((curve, trace))
}

/// As [`run_agent`], writing per-episode solver diagnostics to `sink` as
/// JSON lines.
pub fn run_agent_logged(
    env: &TabularMDP,
    offline_data: &OfflineDataset,
    config: &RlsviConfig,
    episodes: usize,
    rng: &mut RandomStream,
    sink: &mut dyn std::io::Write,
) -> Result<RegretCurve, RlsviError> {
    run_agent_impl(env, offline_data, config, episodes, rng, None, Some(sink))
}

fn run_agent_impl(
    env: &TabularMDP,
    offline_data: &OfflineDataset,
    config: &RlsviConfig,
    episodes: usize,
    rng: &mut RandomStream,
    mut trace: Option<&mut Vec<QTable>>,
    mut log: Option<&mut dyn std::io::Write>,
) -> Result<RegretCurve, RlsviError> {
    config.validate()?;
    let (s_n, a_n, h_n) = (env.num_states(), env.num_actions(), env.horizon());
    let beta = match config.beta_mode {
        BetaMode::Known(v) | BetaMode::Misspecified(v) => v,
        BetaMode::Entropy { c0 } => estimate_beta_entropy(offline_data, c0).map_err(|e| {
            RlsviError::InvalidConfig(format!("entropy deliberateness estimate failed: {e}"))
        })?,
    };
    if beta < 0.0 {
        return Err(RlsviError::InvalidConfig("beta must be nonnegative".into()));
    }
    let offline = offline_entries(offline_data);
    let q_star = backward_induction(env);
    let v_star: f64 = (0..s_n)
        .map(|s| env.initial_dist()[s] * q_star.state_value(0, s))
        .sum();

    let mut online: Vec<BufferEntry> = Vec::new();
    let mut per_episode = Vec::with_capacity(episodes);
    for episode in 0..episodes {
        let mut ep_rng = stream(rng.next_u64());
        let mut diag = SolverDiagnostics {
            episode,
            ..SolverDiagnostics::default()
        };
        let qhat = sample_q_hat_impl(
            s_n,
            a_n,
            h_n,
            &online,
            &offline,
            config,
            beta,
            &mut ep_rng,
            log.is_some().then_some(&mut diag),
        )
        .map_err(|e| RlsviError::EpisodeFailed {
            episode,
            source: Box::new(e),
        })?;
        if let Some(sink) = log.as_deref_mut() {
            writeln!(sink, "{}", diag.to_json_line()).map_err(|e| {
                RlsviError::EpisodeFailed {
                    episode,
                    source: Box::new(RlsviError::InvalidConfig(format!(
                        "diagnostics sink failed: {e}"
                    ))),
                }
            })?;
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(qhat.clone());
        }

        let mut state = sample_index(env.initial_dist().iter().copied(), ep_rng.random::<f64>());
        let mut episode_return = 0.0;
        for h in 0..h_n {
            let mut best = f64::NEG_INFINITY;
            for a in 0..a_n {
                best = best.max(qhat.values[[h, state, a]]);
            }
            let ties: Vec<usize> = (0..a_n)
                .filter(|&a| qhat.values[[h, state, a]] == best)
                .collect();
            let action = if ties.len() == 1 {
                ties[0]
            } else {
                ties[ep_rng.random_range(0..ties.len())]
            };
            let next_state = sample_index(
                (0..s_n).map(|n| env.transition(h, state, action, n)),
                ep_rng.random::<f64>(),
            );
            let mut reward = env.reward(h, state, action);
            episode_return += reward;
            if h == h_n - 1 {
                let terminal = env.terminal_reward(next_state);
                episode_return += terminal;
                reward += terminal;
            }
            online.push(BufferEntry {
                state,
                action,
                period: h,
                next_state,
                reward,
            });
            state = next_state;
        }
        per_episode.push(v_star - episode_return);
    }

    let cumulative = per_episode
        .iter()
        .scan(0.0, |acc, r| {
            *acc += r;
            Some(*acc)
        })
        .collect();
    Ok(RegretCurve {
        per_episode,
        cumulative,
        seed: 0,
        agent: config.agent.label().to_string(),
        config: format!(
            "beta={beta},sigma0_sq={},sigma_sq={},B={},alpha={}",
            config.sigma0_sq, config.sigma_sq, config.buffer_b, config.alpha
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn config(agent: AgentKind) -> RlsviConfig {
        RlsviConfig::new(agent, BetaMode::Known(1.0))
    }

    #[test]
    fn ridge_closed_form_examples() {
        assert_eq!(rlsvi_row_solve(&[], 0.7, 1.0), 0.7);
        assert!((rlsvi_row_solve(&[1.0, 0.0], 0.0, 1.0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn il_loss_closed_forms() {
        // Zero deliberateness: every action is equally likely.
        let loss = il_loss(&[0.3, -1.2, 4.0], &[2.0, 1.0, 0.0], 0.0);
        assert!((loss - 3.0 * 3f64.ln()).abs() < 1e-12);
        let loss = il_loss(&[3f64.ln(), 0.0], &[1.0, 0.0], 1.0);
        assert!((loss - (4f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn il_loss_is_shift_invariant() {
        let q = [0.4, -0.9, 2.2];
        let shifted: Vec<f64> = q.iter().map(|v| v + 57.3).collect();
        let c = [3.0, 1.0, 2.0];
        for beta in [0.5, 2.0, 10.0] {
            let a = il_loss(&q, &c, beta);
            let b = il_loss(&shifted, &c, beta);
            assert!((a - b).abs() < 1e-9, "beta={beta}: {a} vs {b}");
        }
    }

    #[test]
    fn il_gradient_matches_finite_differences() {
        let mut rng = stream(3);
        for _ in 0..100 {
            let a_n = 2 + rng.random_range(0..3);
            let q: Vec<f64> = (0..a_n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let c: Vec<f64> = (0..a_n).map(|_| rng.random_range(0..5) as f64).collect();
            let beta = rng.random::<f64>() * 5.0;
            let grad = il_loss_grad(&q, &c, beta);
            for a in 0..a_n {
                let mut hi = q.clone();
                let mut lo = q.clone();
                hi[a] += 1e-5;
                lo[a] -= 1e-5;
                let fd = (il_loss(&hi, &c, beta) - il_loss(&lo, &c, beta)) / 2e-5;
                assert!((grad[a] - fd).abs() < 1e-6, "a={a} grad={} fd={fd}", grad[a]);
            }
        }
    }

    #[test]
    fn combined_loss_endpoints_and_affinity() {
        assert_eq!(combined_loss_alpha(2.0, 4.0, 1.0, 0.1, 1.0), 2.1);
        assert_eq!(combined_loss_alpha(2.0, 4.0, 0.0, 0.1, 1.0), 4.1);
        assert!((combined_loss_alpha(2.0, 4.0, 0.5, 0.1, 1.0) - 3.1).abs() < 1e-15);
        // Affine in alpha: second differences vanish exactly.
        let f = |a: f64| combined_loss_alpha(1.7, -0.9, a, 0.3, 2.0);
        let second = f(0.2) - 2.0 * f(0.3) + f(0.4);
        assert!(second.abs() < 1e-15);
    }

    #[test]
    fn newton_reduces_to_ridge_without_imitation_pressure() {
        let cfg = config(AgentKind::Informed);
        let targets = vec![vec![1.0, 0.0], vec![0.5]];
        let prior = [0.2, -0.3];
        let row = irlsvi_row_solve(&targets, &[0.0, 0.0], 5.0, &prior, &cfg).unwrap();
        assert!((row[0] - rlsvi_row_solve(&targets[0], prior[0], 1.0)).abs() < 1e-12);
        assert!((row[1] - rlsvi_row_solve(&targets[1], prior[1], 1.0)).abs() < 1e-12);
        let row0 = irlsvi_row_solve(&targets, &[3.0, 1.0], 0.0, &prior, &cfg).unwrap();
        assert!((row0[0] - rlsvi_row_solve(&targets[0], prior[0], 1.0)).abs() < 1e-12);
    }

    #[test]
    fn imitation_pushes_the_observed_action_up() {
        let cfg = config(AgentKind::Informed);
        let targets = vec![Vec::new(), Vec::new()];
        let row =
            irlsvi_row_solve(&targets, &[1.0, 0.0], 100.0, &[0.0, 0.0], &cfg).unwrap();
        assert!(row[0] > row[1]);
    }

    #[test]
    fn newton_solution_beats_the_closed_form_point() {
        let cfg = config(AgentKind::Informed);
        let mut rng = stream(9);
        for _ in 0..50 {
            let targets: Vec<Vec<f64>> = (0..2)
                .map(|_| {
                    (0..rng.random_range(0..4))
                        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                        .collect()
                })
                .collect();
            let counts = [rng.random_range(0..3) as f64, rng.random_range(0..3) as f64];
            let prior = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
            let beta = 0.5 + rng.random::<f64>() * 2.5;
            let w = row_weights(cfg.alpha);
            let sums: Vec<f64> = targets.iter().map(|t| t.iter().sum()).collect();
            let ns: Vec<f64> = targets.iter().map(|t| t.len() as f64).collect();
            let sqs: Vec<f64> = targets
                .iter()
                .map(|t| t.iter().map(|x| x * x).sum())
                .collect();
            let obj = |q: &[f64]| {
                row_objective(q, &sums, &ns, &sqs, &counts, beta, &prior, 1.0, &w)
            };
            let ridge_point: Vec<f64> = (0..2)
                .map(|a| rlsvi_row_solve(&targets[a], prior[a], 1.0))
                .collect();
            let solved = irlsvi_row_solve(&targets, &counts, beta, &prior, &cfg).unwrap();
            assert!(obj(&solved) <= obj(&ridge_point) + 1e-12);
        }
    }

    #[test]
    fn prior_only_cells_return_the_prior_draw() {
        let cfg = config(AgentKind::Uninformed);
        let qhat = sample_q_hat(2, 2, 2, &[], &[], &cfg, 0.0, &mut stream(4)).unwrap();
        // No data anywhere: periods 0..H equal the prior draw, which is
        // almost surely nonzero; the terminal stage stays zero.
        assert!(qhat.values.slice(ndarray::s![..2, .., ..]).iter().all(|&v| v != 0.0));
        assert!(qhat.values.slice(ndarray::s![2, .., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_cell_two_targets_gives_one_third() {
        // One replay tuple cell with targets {1, 0} at the final period and
        // noise scaled to zero.
        let mut cfg = config(AgentKind::Uninformed);
        cfg.sigma_sq = 1e-30;
        let online = vec![
            BufferEntry {
                state: 0,
                action: 0,
                period: 1,
                next_state: 1,
                reward: 1.0,
            },
            BufferEntry {
                state: 0,
                action: 0,
                period: 1,
                next_state: 1,
                reward: 0.0,
            },
        ];
        let mut rng = stream(6);
        // The realized prior draw is unknown, but the ridge structure pins
        // it: v = (1 + 0 + prior)/3 for sigma0_sq = 1.
        let qhat = sample_q_hat(2, 2, 2, &online, &[], &cfg, 0.0, &mut rng).unwrap();
        let v = qhat.values[[1, 0, 0]];
        let prior = 3.0 * v - 1.0;
        let expect = rlsvi_row_solve(&[1.0, 0.0], prior, 1.0);
        assert!((v - expect).abs() < 1e-12);
        assert!(prior.abs() < 6.0);
    }

    #[test]
    fn informed_with_zero_beta_matches_partially_informed_bitwise() {
        let spec = crate::envs::DeepSeaSpec::new(3);
        let env = crate::envs::make_deep_sea(&spec);
        let data = crate::expert::generate_offline(
            &env,
            &crate::expert::Competence::exact(3.0),
            6,
            &mut stream(11),
        );
        let offline = offline_entries(&data);
        let cfg_i = RlsviConfig::new(AgentKind::Informed, BetaMode::Known(0.0));
        let cfg_p = RlsviConfig::new(AgentKind::PartiallyInformed, BetaMode::Known(0.0));
        let a = sample_q_hat(16, 2, 3, &[], &offline, &cfg_i, 0.0, &mut stream(21)).unwrap();
        let b = sample_q_hat(16, 2, 3, &[], &offline, &cfg_p, 0.0, &mut stream(21)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fresh_prior_draws_decorrelate_across_resamples() {
        let cfg = config(AgentKind::Uninformed);
        let mut rng = stream(33);
        let mut series = Vec::new();
        for _ in 0..1000 {
            let qhat = sample_q_hat(1, 2, 1, &[], &[], &cfg, 0.0, &mut rng).unwrap();
            series.push(qhat.values[[0, 0, 0]]);
        }
        let n = series.len() - 1;
        let mean: f64 = series.iter().sum::<f64>() / series.len() as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..series.len() {
            den += (series[i] - mean).powi(2);
            if i < n {
                num += (series[i] - mean) * (series[i + 1] - mean);
            }
        }
        assert!((num / den).abs() < 0.1);
    }

    #[test]
    fn run_agent_records_prefix_sums() {
        let spec = crate::envs::DeepSeaSpec::new(3);
        let env = crate::envs::make_deep_sea(&spec);
        let data = crate::expert::generate_offline(
            &env,
            &crate::expert::Competence::exact(5.0),
            5,
            &mut stream(2),
        );
        let cfg = RlsviConfig::new(AgentKind::Informed, BetaMode::Known(5.0));
        let curve = run_agent(&env, &data, &cfg, 30, &mut stream(7)).unwrap();
        assert_eq!(curve.per_episode.len(), 30);
        let mut acc = 0.0;
        for (p, c) in curve.per_episode.iter().zip(&curve.cumulative) {
            acc += p;
            assert!((acc - c).abs() < 1e-9);
        }
    }

    #[test]
    fn entropy_mode_equals_known_mode_at_the_estimated_value() {
        let spec = crate::envs::DeepSeaSpec::new(3);
        let env = crate::envs::make_deep_sea(&spec);
        let data = crate::expert::generate_offline(
            &env,
            &crate::expert::Competence::exact(4.0),
            8,
            &mut stream(14),
        );
        let beta_hat = estimate_beta_entropy(&data, 1.0).unwrap();
        let cfg_e = RlsviConfig::new(AgentKind::Informed, BetaMode::Entropy { c0: 1.0 });
        let cfg_k = RlsviConfig::new(AgentKind::Informed, BetaMode::Known(beta_hat));
        let a = run_agent(&env, &data, &cfg_e, 10, &mut stream(77)).unwrap();
        let b = run_agent(&env, &data, &cfg_k, 10, &mut stream(77)).unwrap();
        assert_eq!(a.per_episode, b.per_episode);
    }

    #[test]
    fn diagnostics_log_emits_one_line_per_episode() {
        let spec = crate::envs::DeepSeaSpec::new(3);
        let env = crate::envs::make_deep_sea(&spec);
        let data = crate::expert::generate_offline(
            &env,
            &crate::expert::Competence::exact(5.0),
            8,
            &mut stream(19),
        );
        let cfg = RlsviConfig::new(AgentKind::Informed, BetaMode::Known(5.0));
        let mut sink = Vec::new();
        run_agent_logged(&env, &data, &cfg, 6, &mut stream(20), &mut sink).unwrap();
        let text = String::from_utf8(sink).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[0].starts_with("{\"episode\":0,\"newton_rows\":"));
        assert!(lines.iter().any(|l| !l.contains("\"newton_rows\":0")));
    }

    #[test]
    fn full_map_loss_runs_and_stays_finite() {
        let spec = crate::envs::DeepSeaSpec::new(3);
        let env = crate::envs::make_deep_sea(&spec);
        let data = crate::expert::generate_offline(
            &env,
            &crate::expert::Competence::exact(5.0),
            10,
            &mut stream(3),
        );
        let mut cfg = RlsviConfig::new(AgentKind::Informed, BetaMode::Known(5.0));
        cfg.use_full_map_loss = true;
        let curve = run_agent(&env, &data, &cfg, 10, &mut stream(8)).unwrap();
        assert!(curve.cumulative.iter().all(|v| v.is_finite()));
    }
}
