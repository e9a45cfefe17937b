//! Exact informed posterior sampling over a finite hypothesis set, the
//! count-based plug-in policy estimator, and closed-form / Monte-Carlo
//! estimates of the first-episode error probability.
//!
//! The posterior is maintained in log space over the hypothesis list, so
//! weights stay normalized for datasets of up to tens of thousands of
//! episodes without underflow.

use rayon::prelude::*;
use thiserror::Error;

use crate::expert::{generate_offline, Competence, OfflineDataset};
use crate::harness::{compute_regret, RegretCurve};
use crate::mdp::{
    argmax_lowest, backward_induction, compute_p_underbar, greedy_policy, sample_index,
    simulate_episode, DeterministicPolicy, TabularMDP, Trajectory,
};
use crate::rng::{split_seed, stream, RandomStream};
use ndarray::Array2;
use rand::{Rng, RngCore};

#[derive(Debug, Error)]
pub enum IpsrlError {
    #[error("every hypothesis assigns zero likelihood to the observed data")]
    ImpossibleData,
    #[error("invalid arguments: {0}")]
    InvalidArgs(String),
    #[error("bad hypothesis set: {0}")]
    BadHypothesisSet(String),
}

/// A finite model class: candidate MDPs sharing `S`, `A`, `H`, rewards and
/// the initial distribution, differing in their transition kernels, plus a
/// prior over them.
#[derive(Debug, Clone)]
pub struct HypothesisSet {
    hypotheses: Vec<TabularMDP>,
    prior: Vec<f64>,
}

impl HypothesisSet {
    pub fn new(hypotheses: Vec<TabularMDP>, prior: Vec<f64>) -> Result<Self, IpsrlError> {
        if hypotheses.is_empty() {
            return Err(IpsrlError::BadHypothesisSet("empty hypothesis list".into()));
        }
        if prior.len() != hypotheses.len() {
            return Err(IpsrlError::BadHypothesisSet(format!(
                "{} prior entries for {} hypotheses",
                prior.len(),
                hypotheses.len()
            )));
        }
        let sum: f64 = prior.iter().sum();
        if (sum - 1.0).abs() > 1e-10 || prior.iter().any(|&p| p < 0.0) {
            return Err(IpsrlError::BadHypothesisSet(format!(
                "prior sums to {sum}"
            )));
        }
        let first = &hypotheses[0];
        for (ix, mdp) in hypotheses.iter().enumerate().skip(1) {
            if mdp.num_states() != first.num_states()
                || mdp.num_actions() != first.num_actions()
                || mdp.horizon() != first.horizon()
            {
                return Err(IpsrlError::BadHypothesisSet(format!(
                    "hypothesis {ix} has different dimensions"
                )));
            }
            if mdp.rewards() != first.rewards() || mdp.initial_dist() != first.initial_dist() {
                return Err(IpsrlError::BadHypothesisSet(format!(
                    "hypothesis {ix} must share rewards and the initial distribution"
                )));
            }
        }
        Ok(Self { hypotheses, prior })
    }

    pub fn uniform(hypotheses: Vec<TabularMDP>) -> Result<Self, IpsrlError> {
        let n = hypotheses.len().max(1);
        Self::new(hypotheses, vec![1.0 / n as f64; n])
    }

    pub fn hypotheses(&self) -> &[TabularMDP] {
        &self.hypotheses
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn num_states(&self) -> usize {
        self.hypotheses[0].num_states()
    }

    pub fn num_actions(&self) -> usize {
        self.hypotheses[0].num_actions()
    }

    pub fn horizon(&self) -> usize {
        self.hypotheses[0].horizon()
    }

    /// Canonical optimal policy of each hypothesis.
    pub fn canonical_policies(&self) -> Vec<DeterministicPolicy> {
        self.hypotheses
            .iter()
            .map(|m| greedy_policy(&backward_induction(m), m))
            .collect()
    }
}

/// Normalized posterior over a hypothesis set, kept as log weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorBelief {
    log_weights: Vec<f64>,
}

impl PosteriorBelief {
    fn normalized(mut log_weights: Vec<f64>) -> Result<Self, IpsrlError> {
        let z = log_sum_exp(&log_weights);
        if !z.is_finite() {
            return Err(IpsrlError::ImpossibleData);
        }
        for w in log_weights.iter_mut() {
            *w -= z;
        }
        Ok(Self { log_weights })
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|&w| w.exp()).collect()
    }

    pub fn sample(&self, rng: &mut RandomStream) -> usize {
        sample_index(
            self.log_weights.iter().map(|&w| w.exp()),
            rng.random::<f64>(),
        )
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

fn log_or_neg_inf(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Posterior over the hypothesis set after observing expert demonstrations.
///
/// Each transition contributes both its transition likelihood and the
/// likelihood of the expert's action under the softmax policy of that
/// hypothesis at deliberateness `beta`. The initial-state factor is shared
/// across hypotheses and cancels in normalization.
pub fn informed_posterior(
    set: &HypothesisSet,
    data: &OfflineDataset,
    beta: f64,
) -> Result<PosteriorBelief, IpsrlError> {
    if beta < 0.0 {
        return Err(IpsrlError::InvalidArgs("beta must be nonnegative".into()));
    }
    let mut log_weights: Vec<f64> = set.prior.iter().map(|&p| log_or_neg_inf(p)).collect();
    for (ix, mdp) in set.hypotheses.iter().enumerate() {
        if log_weights[ix] == f64::NEG_INFINITY {
            continue;
        }
        let q = backward_induction(mdp);
        let policy = crate::expert::softmax_policy(&q, beta);
        let mut acc = 0.0;
        for t in &data.transitions {
            acc += log_or_neg_inf(mdp.transition(t.period, t.state, t.action, t.next_state));
            acc += log_or_neg_inf(policy.probs[[t.period, t.state, t.action]]);
            if acc == f64::NEG_INFINITY {
                break;
            }
        }
        log_weights[ix] += acc;
    }
    PosteriorBelief::normalized(log_weights)
}

/// Bayes update on one self-played episode. Only transition likelihoods
/// enter: the actions are the learner's own, not the expert's.
pub fn online_update(
    belief: &PosteriorBelief,
    set: &HypothesisSet,
    traj: &Trajectory,
) -> Result<PosteriorBelief, IpsrlError> {
    let mut log_weights = belief.log_weights.clone();
    for (ix, mdp) in set.hypotheses.iter().enumerate() {
        if log_weights[ix] == f64::NEG_INFINITY {
            continue;
        }
        for step in &traj.steps {
            log_weights[ix] +=
                log_or_neg_inf(mdp.transition(step.period, step.state, step.action, step.next_state));
            if log_weights[ix] == f64::NEG_INFINITY {
                break;
            }
        }
    }
    PosteriorBelief::normalized(log_weights)
}

/// Posterior-sampling control loop: per episode, sample a hypothesis from
/// the current belief, play its canonical optimal policy on the true MDP,
/// then condition the belief on the observed episode.
pub fn ipsrl_run(
    set: &HypothesisSet,
    data: &OfflineDataset,
    beta: f64,
    true_theta_index: usize,
    episodes: usize,
    rng: &mut RandomStream,
) -> Result<RegretCurve, IpsrlError> {
    if true_theta_index >= set.len() {
        return Err(IpsrlError::InvalidArgs(format!(
            "true hypothesis index {true_theta_index} out of range"
        )));
    }
    let truth = &set.hypotheses[true_theta_index];
    let num_actions = set.num_actions();
    let policies: Vec<_> = set
        .canonical_policies()
        .into_iter()
        .map(|p| p.to_stochastic(num_actions))
        .collect();
    let mut belief = informed_posterior(set, data, beta)?;
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let pick = belief.sample(rng);
        let traj = simulate_episode(truth, &policies[pick], rng);
        returns.push(traj.total_return());
        belief = online_update(&belief, set, &traj)?;
    }
    let mut curve = compute_regret(truth, &returns);
    curve.agent = "ipsrl".into();
    curve.config = format!("episodes_offline={},beta={beta}", data.num_episodes);
    Ok(curve)
}

/// Count-based plug-in estimate of the optimal policy. At `(h, s)` pairs
/// whose visit count reaches `delta * L` the most frequent action wins
/// (lowest index on ties); everywhere else the fallback action `0` is used.
pub fn construct_pi_hat(
    data: &OfflineDataset,
    delta: f64,
    num_states: usize,
    num_actions: usize,
    horizon: usize,
) -> DeterministicPolicy {
    let mut counts = vec![0usize; horizon * num_states * num_actions];
    for t in &data.transitions {
        counts[(t.period * num_states + t.state) * num_actions + t.action] += 1;
    }
    let threshold = delta * data.num_episodes as f64;
    let mut actions = Array2::zeros((horizon, num_states));
    for h in 0..horizon {
        for s in 0..num_states {
            let base = (h * num_states + s) * num_actions;
            let row = &counts[base..base + num_actions];
            let visits: usize = row.iter().sum();
            actions[[h, s]] = if (visits as f64) >= threshold {
                argmax_lowest(row.iter().map(|&c| c as f64))
            } else {
                0
            };
        }
    }
    DeterministicPolicy { actions }
}

/// Deliberateness threshold above which the plug-in estimator analysis
/// applies: `[ln 3 - ln p_underbar + ln(H-1) + ln(A-1)] / margin`.
pub fn beta_threshold(
    delta_margin: f64,
    p_underbar: f64,
    horizon: usize,
    num_actions: usize,
) -> Result<f64, IpsrlError> {
    if horizon < 2 || num_actions < 2 {
        return Err(IpsrlError::InvalidArgs(
            "the threshold needs H >= 2 and A >= 2".into(),
        ));
    }
    if delta_margin <= 0.0 || !(0.0..=1.0).contains(&p_underbar) || p_underbar == 0.0 {
        return Err(IpsrlError::InvalidArgs(
            "need margin > 0 and p_underbar in (0, 1]".into(),
        ));
    }
    Ok(
        (3f64.ln() - p_underbar.ln() + ((horizon - 1) as f64).ln()
            + ((num_actions - 1) as f64).ln())
            / delta_margin,
    )
}

/// Closed-form bound on the probability that the first sampled policy is
/// not optimal: `min(1, 2SH [exp(-L p^2 / 18) + exp(-L p / 36)])`.
pub fn epsilon_bound(num_states: usize, horizon: usize, episodes: usize, p_underbar: f64) -> f64 {
    let l = episodes as f64;
    let tail = (-l * p_underbar * p_underbar / 18.0).exp() + (-l * p_underbar / 36.0).exp();
    (2.0 * num_states as f64 * horizon as f64 * tail).min(1.0)
}

/// Monte-Carlo estimate of first-episode policy error probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonReport {
    /// Offline episodes per trial.
    pub offline_episodes: usize,
    /// Frequency of the posterior-sampled policy differing from the truth.
    pub mc_pi_tilde: f64,
    /// Frequency of the count-based plug-in policy differing from the truth.
    pub mc_pi_hat: f64,
    /// Closed-form upper bound at these parameters.
    pub bound_eps_l: f64,
    pub n_trials: usize,
}

impl EpsilonReport {
    pub fn se_pi_tilde(&self) -> f64 {
        standard_error(self.mc_pi_tilde, self.n_trials)
    }

    pub fn se_pi_hat(&self) -> f64 {
        standard_error(self.mc_pi_hat, self.n_trials)
    }

    pub fn csv_header() -> &'static str {
        "L,mc_pi_tilde,mc_pi_hat,bound,n_trials,se_pi_tilde,se_pi_hat"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.offline_episodes,
            self.mc_pi_tilde,
            self.mc_pi_hat,
            self.bound_eps_l,
            self.n_trials,
            self.se_pi_tilde(),
            self.se_pi_hat()
        )
    }
}

fn standard_error(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Per trial: draw a truth from the prior, generate demonstrations from it,
/// then compare both the posterior-sampled policy and the count-based
/// plug-in policy (visit threshold `delta = p_underbar / 2`) against the
/// truth's canonical optimal policy. Trials run in parallel on independent
/// child streams.
pub fn estimate_epsilon_mc(
    set: &HypothesisSet,
    beta: f64,
    offline_episodes: usize,
    n_trials: usize,
    rng: &mut RandomStream,
) -> EpsilonReport {
    assert!(n_trials >= 1);
    let p_underbar = compute_p_underbar(&set.hypotheses);
    let delta = p_underbar / 2.0;
    let policies = set.canonical_policies();
    let (s_n, a_n, h_n) = (set.num_states(), set.num_actions(), set.horizon());
    let master = rng.next_u64();
    let (tilde_miss, hat_miss) = (0..n_trials)
        .into_par_iter()
        .map(|trial| {
            let mut trial_rng = stream(split_seed(master, &[trial as u64]));
            let truth = sample_index(set.prior.iter().copied(), trial_rng.random::<f64>());
            let data = generate_offline(
                &set.hypotheses[truth],
                &Competence::exact(beta),
                offline_episodes,
                &mut trial_rng,
            );
            let belief = informed_posterior(set, &data, beta)
                .expect("data generated inside the model class has positive likelihood");
            let pick = belief.sample(&mut trial_rng);
            let tilde_ne = policies[pick] != policies[truth];
            let pi_hat = construct_pi_hat(&data, delta, s_n, a_n, h_n);
            let hat_ne = pi_hat != policies[truth];
            (tilde_ne as usize, hat_ne as usize)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    EpsilonReport {
        offline_episodes,
        mc_pi_tilde: tilde_miss as f64 / n_trials as f64,
        mc_pi_hat: hat_miss as f64 / n_trials as f64,
        bound_eps_l: epsilon_bound(s_n, h_n, offline_episodes, p_underbar),
        n_trials,
    }
}
