//! The imperfect-expert generative model, offline dataset generation, and
//! the entropy-based deliberateness estimator.
//!
//! An expert with competence `(beta, lambda)` knows a noisy copy of the
//! optimal action values (`lambda` is the precision of that knowledge;
//! infinite means exact) and acts through a softmax with inverse temperature
//! `beta`. Offline datasets record complete episodes played by one expert.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{backward_induction, simulate_episode, QTable, StochasticPolicy, TabularMDP};
use crate::rng::RandomStream;

/// Cap applied to the entropy-based deliberateness estimate.
pub const BETA_MAX: f64 = 1e4;

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid argument: {0}")]
    InvalidArgs(String),
    #[error("dataset i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad dataset line {line}: {message}")]
    BadRecord { line: usize, message: String },
}

/// Expert competence: softmax deliberateness `beta`, knowledge precision
/// `lambda` (`f64::INFINITY` for exact knowledge), and the exponential prior
/// rate `lambda2` over `beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Competence {
    pub beta: f64,
    pub lambda: f64,
    pub lambda2: f64,
}

impl Competence {
    pub fn new(beta: f64, lambda: f64) -> Self {
        assert!(beta >= 0.0, "beta must be nonnegative");
        assert!(lambda > 0.0, "lambda must be positive (possibly infinite)");
        Self {
            beta,
            lambda,
            lambda2: 1.0,
        }
    }

    /// Expert with exact knowledge of the optimal values.
    pub fn exact(beta: f64) -> Self {
        Self::new(beta, f64::INFINITY)
    }
}

/// One recorded expert transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OfflineTransition {
    #[serde(rename = "l")]
    pub episode: usize,
    #[serde(rename = "h")]
    pub period: usize,
    #[serde(rename = "s")]
    pub state: usize,
    #[serde(rename = "a")]
    pub action: usize,
    #[serde(rename = "sn")]
    pub next_state: usize,
    #[serde(rename = "r")]
    pub reward: f64,
}

/// Generation metadata carried alongside a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env: String,
    pub beta: f64,
    /// `None` encodes infinite knowledgeability.
    pub lambda: Option<f64>,
    pub kappa: Option<f64>,
    pub seed: u64,
}

/// Expert demonstrations: `L` complete episodes of `H` transitions each.
///
/// The terminal reward of each episode is folded into the reward of its
/// final transition, so episode returns are exactly the sums of recorded
/// rewards and value regression over the records needs no separate terminal
/// stage.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub transitions: Vec<OfflineTransition>,
    pub num_episodes: usize,
    pub meta: DatasetMeta,
}

impl OfflineDataset {
    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    /// Writes one transition per line as JSON plus a `<stem>.meta.json`
    /// sidecar next to the main file.
    pub fn save_jsonl(&self, path: &Path) -> Result<(), ExpertError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.transitions {
            serde_json::to_writer(&mut out, t)
                .map_err(|e| ExpertError::InvalidArgs(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        let meta = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| ExpertError::InvalidArgs(e.to_string()))?;
        std::fs::write(meta_path(path), meta)?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self, ExpertError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut transitions = Vec::new();
        for (ix, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: OfflineTransition =
                serde_json::from_str(&line).map_err(|e| ExpertError::BadRecord {
                    line: ix + 1,
                    message: e.to_string(),
                })?;
            transitions.push(t);
        }
        let meta_text = std::fs::read_to_string(meta_path(path))?;
        let meta: DatasetMeta =
            serde_json::from_str(&meta_text).map_err(|e| ExpertError::BadRecord {
                line: 0,
                message: format!("metadata: {e}"),
            })?;
        let num_episodes = transitions
            .iter()
            .map(|t| t.episode + 1)
            .max()
            .unwrap_or(0);
        Ok(Self {
            transitions,
            num_episodes,
            meta,
        })
    }
}

fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Number of demonstration episodes for a data ratio `kappa`:
/// `round(kappa * A * S / H)`.
pub fn episodes_for_ratio(kappa: f64, num_states: usize, num_actions: usize, horizon: usize) -> usize {
    (kappa * num_actions as f64 * num_states as f64 / horizon as f64).round() as usize
}

/// Softmax policy over the rows of a Q table:
/// `pi_h(a|s) = exp(beta Q_h(s,a)) / sum_b exp(beta Q_h(s,b))`.
///
/// Computed with max subtraction, so rows stay normalized for `beta` up to
/// at least `1e6`.
pub fn softmax_policy(q: &QTable, beta: f64) -> StochasticPolicy {
    assert!(beta >= 0.0, "beta must be nonnegative");
    let (h_n, s_n, a_n) = (q.horizon(), q.num_states(), q.num_actions());
    let mut probs = ndarray::Array3::zeros((h_n, s_n, a_n));
    let mut row = vec![0.0; a_n];
    for h in 0..h_n {
        for s in 0..s_n {
            let mut max = f64::NEG_INFINITY;
            for a in 0..a_n {
                row[a] = beta * q.values[[h, s, a]];
                max = max.max(row[a]);
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for a in 0..a_n {
                probs[[h, s, a]] = row[a] / sum;
            }
        }
    }
    StochasticPolicy { probs }
}

/// The expert's noisy copy of a Q table: every entry gets independent
/// Gaussian noise with standard deviation `1 / lambda`. Infinite `lambda`
/// returns the table unchanged.
pub fn perturb_q(q: &QTable, lambda: f64, rng: &mut RandomStream) -> QTable {
    assert!(lambda > 0.0, "lambda must be positive (possibly infinite)");
    if lambda.is_infinite() {
        return q.clone();
    }
    let mut out = q.clone();
    let scale = 1.0 / lambda;
    for v in out.values.iter_mut() {
        let g: f64 = StandardNormal.sample(rng);
        *v += scale * g;
    }
    out
}

/// Generates `episodes` expert demonstrations on `mdp`.
///
/// The noisy value table is drawn once (one expert), the softmax policy is
/// formed from it, and full episodes are simulated. Terminal rewards are
/// folded into the final transition of each episode.
pub fn generate_offline(
    mdp: &TabularMDP,
    competence: &Competence,
    episodes: usize,
    rng: &mut RandomStream,
) -> OfflineDataset {
    let q_star = backward_induction(mdp);
    let q_expert = perturb_q(&q_star, competence.lambda, rng);
    let policy = softmax_policy(&q_expert, competence.beta);
    let horizon = mdp.horizon();
    let mut transitions = Vec::with_capacity(episodes * horizon);
    for episode in 0..episodes {
        let traj = simulate_episode(mdp, &policy, rng);
        for step in &traj.steps {
            let mut reward = step.reward;
            if step.period == horizon - 1 {
                reward += traj.terminal_reward;
            }
            transitions.push(OfflineTransition {
                episode,
                period: step.period,
                state: step.state,
                action: step.action,
                next_state: step.next_state,
                reward,
            });
        }
    }
    OfflineDataset {
        transitions,
        num_episodes: episodes,
        meta: DatasetMeta {
            env: String::new(),
            beta: competence.beta,
            lambda: competence.lambda.is_finite().then_some(competence.lambda),
            kappa: None,
            seed: 0,
        },
    }
}

/// Entropy-based deliberateness estimate: `min(c0 / H(mu_A), BETA_MAX)`
/// where `mu_A` is the empirical marginal of all recorded actions and the
/// entropy uses natural logarithms.
pub fn estimate_beta_entropy(data: &OfflineDataset, c0: f64) -> Result<f64, ExpertError> {
    if data.transitions.is_empty() {
        return Err(ExpertError::EmptyDataset);
    }
    if c0 <= 0.0 {
        return Err(ExpertError::InvalidArgs("c0 must be positive".into()));
    }
    let max_action = data
        .transitions
        .iter()
        .map(|t| t.action)
        .max()
        .unwrap_or(0);
    let mut counts = vec![0usize; max_action + 1];
    for t in &data.transitions {
        counts[t.action] += 1;
    }
    let total = data.transitions.len() as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    if entropy <= 0.0 {
        return Ok(BETA_MAX);
    }
    Ok((c0 / entropy).min(BETA_MAX))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::{array, Array3, Array4};
    use rand::Rng;

    fn bandit_q(rewards: &[f64]) -> (TabularMDP, QTable) {
        let a_n = rewards.len();
        let transitions = Array4::from_elem((1, 1, a_n, 1), 1.0);
        let step = Array3::from_shape_vec((1, 1, a_n), rewards.to_vec()).unwrap();
        let mdp =
            TabularMDP::with_terminal(transitions, step, array![0.0], array![1.0]).unwrap();
        let q = backward_induction(&mdp);
        (mdp, q)
    }

    #[test]
    fn beta_zero_is_uniform() {
        let (_, q) = bandit_q(&[0.3, 0.7]);
        let pol = softmax_policy(&q, 0.0);
        assert_eq!(pol.probs[[0, 0, 0]], 0.5);
        assert_eq!(pol.probs[[0, 0, 1]], 0.5);
    }

    #[test]
    fn softmax_closed_form() {
        let (_, q) = bandit_q(&[3f64.ln(), 0.0]);
        let pol = softmax_policy(&q, 1.0);
        assert!((pol.probs[[0, 0, 0]] - 0.75).abs() < 1e-12);
        assert!((pol.probs[[0, 0, 1]] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn huge_beta_concentrates_on_the_argmax() {
        let (_, q) = bandit_q(&[1.0, 0.0]);
        let pol = softmax_policy(&q, 1e6);
        assert!(pol.probs[[0, 0, 0]] >= 1.0 - 1e-9);
        let sum = pol.probs[[0, 0, 0]] + pol.probs[[0, 0, 1]];
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_normalize_and_keep_argmax() {
        let mut rng = stream(17);
        for _ in 0..50 {
            let vals: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
            let (_, q) = bandit_q(&vals);
            for beta in [1e-3, 0.5, 3.0, 50.0, 1e6] {
                let pol = softmax_policy(&q, beta);
                let sum: f64 = (0..4).map(|a| pol.probs[[0, 0, a]]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
                let best_q = crate::mdp::argmax_lowest(vals.iter().copied());
                let best_p =
                    crate::mdp::argmax_lowest((0..4).map(|a| pol.probs[[0, 0, a]]));
                assert_eq!(best_q, best_p, "beta={beta}");
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let (_, q) = bandit_q(&[0.2, -0.4, 1.1]);
        let mut shifted = q.clone();
        for a in 0..3 {
            shifted.values[[0, 0, a]] += 123.456;
        }
        let p1 = softmax_policy(&q, 2.5);
        let p2 = softmax_policy(&shifted, 2.5);
        for a in 0..3 {
            assert!((p1.probs[[0, 0, a]] - p2.probs[[0, 0, a]]).abs() < 1e-12);
        }
    }

    #[test]
    fn infinite_lambda_leaves_the_table_alone() {
        let (_, q) = bandit_q(&[0.1, 0.9]);
        let out = perturb_q(&q, f64::INFINITY, &mut stream(4));
        assert_eq!(out, q);
    }

    #[test]
    fn perturbation_is_seed_deterministic() {
        let (_, q) = bandit_q(&[0.1, 0.9]);
        let a = perturb_q(&q, 2.0, &mut stream(8));
        let b = perturb_q(&q, 2.0, &mut stream(8));
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let (mdp, _) = bandit_q(&[0.0, 1.0]);
        let data = generate_offline(&mdp, &Competence::exact(1.0), 0, &mut stream(1));
        assert!(data.is_empty());
        assert_eq!(data.num_episodes, 0);
        assert_eq!(data.meta.beta, 1.0);
        assert_eq!(data.meta.lambda, None);
    }

    #[test]
    fn episode_count_from_data_ratio() {
        assert_eq!(episodes_for_ratio(5.0, 121, 2, 10), 121);
        assert_eq!(episodes_for_ratio(1.0, 121, 2, 10), 24);
    }

    #[test]
    fn near_deterministic_expert_plays_the_best_action() {
        let (mdp, _) = bandit_q(&[0.0, 1.0]);
        let data = generate_offline(&mdp, &Competence::exact(1e6), 50, &mut stream(2));
        assert!(data.transitions.iter().all(|t| t.action == 1));
    }

    #[test]
    fn dataset_shape_is_h_transitions_per_episode() {
        let spec = crate::envs::DeepSeaSpec::new(4);
        let mdp = crate::envs::make_deep_sea(&spec);
        let data = generate_offline(&mdp, &Competence::exact(2.0), 7, &mut stream(3));
        assert_eq!(data.len(), 7 * 4);
        for l in 0..7 {
            let periods: Vec<usize> = data
                .transitions
                .iter()
                .filter(|t| t.episode == l)
                .map(|t| t.period)
                .collect();
            assert_eq!(periods, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn terminal_reward_is_folded_into_the_last_transition() {
        // Slip-free deep sea: a perfect expert always reaches the bonus.
        let spec = crate::envs::DeepSeaSpec {
            slip: 0.0,
            ..crate::envs::DeepSeaSpec::new(3)
        };
        let mdp = crate::envs::make_deep_sea(&spec);
        let data = generate_offline(&mdp, &Competence::exact(1e6), 1, &mut stream(5));
        let last = data.transitions.last().unwrap();
        assert_eq!(last.period, 2);
        assert!((last.reward - (spec.move_cost + 1.0)).abs() < 1e-15);
        let total: f64 = data.transitions.iter().map(|t| t.reward).sum();
        assert!((total - (1.0 + 3.0 * spec.move_cost)).abs() < 1e-12);
    }

    #[test]
    fn entropy_estimator_closed_forms() {
        let (mdp, _) = bandit_q(&[0.0, 0.0]);
        let mut data = generate_offline(&mdp, &Competence::exact(0.0), 4, &mut stream(1));
        // Force exactly uniform actions over two arms.
        for (ix, t) in data.transitions.iter_mut().enumerate() {
            t.action = ix % 2;
        }
        let est = estimate_beta_entropy(&data, 1.0).unwrap();
        assert!((est - 1.0 / 2f64.ln()).abs() < 1e-12);

        for t in data.transitions.iter_mut() {
            t.action = 1;
        }
        assert_eq!(estimate_beta_entropy(&data, 1.0).unwrap(), BETA_MAX);

        let actions = [0, 0, 0, 1];
        for (t, &a) in data.transitions.iter_mut().zip(actions.iter()) {
            t.action = a;
        }
        let est = estimate_beta_entropy(&data, 1.0).unwrap();
        let entropy = 0.75 * (4f64 / 3.0).ln() + 0.25 * 4f64.ln();
        assert!((est - 1.0 / entropy).abs() < 1e-12);
        assert!((est - 1.7782989549370471).abs() < 1e-9);
    }

    #[test]
    fn entropy_estimator_rejects_empty_data() {
        let (mdp, _) = bandit_q(&[0.0, 1.0]);
        let data = generate_offline(&mdp, &Competence::exact(1.0), 0, &mut stream(1));
        assert!(matches!(
            estimate_beta_entropy(&data, 1.0),
            Err(ExpertError::EmptyDataset)
        ));
    }

    #[test]
    fn entropy_estimator_is_monotone_in_entropy() {
        // Sweep count vectors from skewed to uniform; estimates must not rise.
        let (mdp, _) = bandit_q(&[0.0, 0.0]);
        let base = generate_offline(&mdp, &Competence::exact(0.0), 10, &mut stream(1));
        let mut last = f64::INFINITY;
        for ones in [1usize, 2, 3, 4, 5] {
            let mut data = base.clone();
            for (ix, t) in data.transitions.iter_mut().enumerate() {
                t.action = usize::from(ix < ones);
            }
            let est = estimate_beta_entropy(&data, 1.0).unwrap();
            assert!(est <= last + 1e-12);
            last = est;
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let spec = crate::envs::DeepSeaSpec::new(3);
        let mdp = crate::envs::make_deep_sea(&spec);
        let mut data = generate_offline(&mdp, &Competence::new(2.0, 4.0), 5, &mut stream(12));
        data.meta.env = "deep_sea:M=3".into();
        data.meta.kappa = Some(1.5);
        data.meta.seed = 12;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("expert.jsonl");
        data.save_jsonl(&path).unwrap();
        let back = OfflineDataset::load_jsonl(&path).unwrap();
        assert_eq!(back, data);
        assert!(dir.path().join("expert.meta.json").exists());
    }
}
