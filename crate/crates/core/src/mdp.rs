//! Finite-horizon tabular MDPs: exact dynamic programming, policy evaluation,
//! simulation, and the structural quantities (action gap, reachability floor)
//! used by the posterior-sampling analysis.
//!
//! Conventions used throughout the crate:
//! - Periods run `h = 0..H-1` for decisions; a terminal reward is collected at
//!   period `H` and depends on the state only.
//! - Tie-breaking for argmax is always the lowest action index, and states
//!   that cannot be reached under the policy being constructed are assigned
//!   the fallback action `0`. This makes the optimal policy of an MDP a
//!   well-defined canonical object, so policies can be compared for equality.

use ndarray::{Array1, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RandomStream;
use rand::Rng;

/// Occupancy probabilities at or below this cutoff count as unreachable.
pub const REACH_CUTOFF: f64 = 1e-15;

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("transition row (h={h}, s={s}, a={a}) sums to {sum:e}, expected 1 within 1e-12")]
    BadTransitionRow { h: usize, s: usize, a: usize, sum: f64 },
    #[error("negative transition probability at (h={h}, s={s}, a={a}, next={next})")]
    NegativeTransition { h: usize, s: usize, a: usize, next: usize },
    #[error("initial distribution sums to {sum:e}, expected 1 within 1e-12")]
    BadInitialDist { sum: f64 },
    #[error("non-finite reward at (h={h}, s={s}, a={a})")]
    NonFiniteReward { h: usize, s: usize, a: usize },
    #[error("terminal reward at state {s} varies with the action")]
    TerminalRewardVaries { s: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("action-value tie at reachable state (h={h}, s={s}): the gap assumption fails")]
    MarginZero { h: usize, s: usize },
    #[error("invalid stochastic policy row (h={h}, s={s}): sums to {sum:e}")]
    BadPolicyRow { h: usize, s: usize, sum: f64 },
    #[error("bad MDP document: {0}")]
    Document(String),
}

/// A finite-horizon tabular MDP `(S, A, H, P, r, nu)`.
///
/// Transition kernels are indexed `(h, s, a, s')` for `h < H`; rewards are
/// indexed `(h, s, a)` for `h <= H`, where the period-`H` slice is the
/// terminal reward and must be constant in the action. All probability rows
/// are validated once at construction; operations assume a valid instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMDP {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    transitions: Array4<f64>,
    rewards: Array3<f64>,
    initial_dist: Array1<f64>,
}

impl TabularMDP {
    pub fn new(
        transitions: Array4<f64>,
        rewards: Array3<f64>,
        initial_dist: Array1<f64>,
    ) -> Result<Self, MdpError> {
        let (horizon, num_states, num_actions, s2) = transitions.dim();
        if s2 != num_states {
            return Err(MdpError::Shape(format!(
                "transition tensor is (H={horizon}, S={num_states}, A={num_actions}, S'={s2})"
            )));
        }
        if rewards.dim() != (horizon + 1, num_states, num_actions) {
            return Err(MdpError::Shape(format!(
                "rewards are {:?}, expected ({}, {}, {})",
                rewards.dim(),
                horizon + 1,
                num_states,
                num_actions
            )));
        }
        if initial_dist.len() != num_states {
            return Err(MdpError::Shape(format!(
                "initial distribution has {} entries, expected {num_states}",
                initial_dist.len()
            )));
        }
        if horizon == 0 || num_states == 0 || num_actions == 0 {
            return Err(MdpError::Shape("S, A and H must all be positive".into()));
        }
        for h in 0..horizon {
            for s in 0..num_states {
                for a in 0..num_actions {
                    let mut sum = 0.0;
                    for next in 0..num_states {
                        let p = transitions[[h, s, a, next]];
                        if p < 0.0 {
                            return Err(MdpError::NegativeTransition { h, s, a, next });
                        }
                        sum += p;
                    }
                    if (sum - 1.0).abs() > ROW_SUM_TOL {
                        return Err(MdpError::BadTransitionRow { h, s, a, sum });
                    }
                }
            }
        }
        for ((h, s, a), &r) in rewards.indexed_iter() {
            if !r.is_finite() {
                return Err(MdpError::NonFiniteReward { h, s, a });
            }
        }
        for s in 0..num_states {
            let base = rewards[[horizon, s, 0]];
            for a in 1..num_actions {
                if rewards[[horizon, s, a]] != base {
                    return Err(MdpError::TerminalRewardVaries { s });
                }
            }
        }
        let nu_sum: f64 = initial_dist.iter().sum();
        if (nu_sum - 1.0).abs() > ROW_SUM_TOL || initial_dist.iter().any(|&p| p < 0.0) {
            return Err(MdpError::BadInitialDist { sum: nu_sum });
        }
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            transitions,
            rewards,
            initial_dist,
        })
    }

    /// Convenience constructor taking per-step rewards `(H, S, A)` and a
    /// terminal reward vector over states.
    pub fn with_terminal(
        transitions: Array4<f64>,
        step_rewards: Array3<f64>,
        terminal: Array1<f64>,
        initial_dist: Array1<f64>,
    ) -> Result<Self, MdpError> {
        let (horizon, num_states, num_actions) = step_rewards.dim();
        let mut rewards = Array3::zeros((horizon + 1, num_states, num_actions));
        rewards
            .slice_mut(ndarray::s![..horizon, .., ..])
            .assign(&step_rewards);
        for s in 0..num_states {
            for a in 0..num_actions {
                rewards[[horizon, s, a]] = terminal[s];
            }
        }
        Self::new(transitions, rewards, initial_dist)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn transitions(&self) -> &Array4<f64> {
        &self.transitions
    }

    pub fn rewards(&self) -> &Array3<f64> {
        &self.rewards
    }

    pub fn initial_dist(&self) -> &Array1<f64> {
        &self.initial_dist
    }

    pub fn reward(&self, h: usize, s: usize, a: usize) -> f64 {
        self.rewards[[h, s, a]]
    }

    pub fn terminal_reward(&self, s: usize) -> f64 {
        self.rewards[[self.horizon, s, 0]]
    }

    pub fn transition(&self, h: usize, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[[h, s, a, next]]
    }

    /// Serializes to the interchange document
    /// `{"S":…,"A":…,"H":…,"nu":[…],"r":[[[…]]],"P":[[[[…]]]]}`.
    pub fn to_json(&self) -> String {
        let doc = MdpDocument {
            num_states: self.num_states,
            num_actions: self.num_actions,
            horizon: self.horizon,
            nu: self.initial_dist.to_vec(),
            r: (0..=self.horizon)
                .map(|h| {
                    (0..self.num_states)
                        .map(|s| (0..self.num_actions).map(|a| self.rewards[[h, s, a]]).collect())
                        .collect()
                })
                .collect(),
            p: (0..self.horizon)
                .map(|h| {
                    (0..self.num_states)
                        .map(|s| {
                            (0..self.num_actions)
                                .map(|a| {
                                    (0..self.num_states)
                                        .map(|n| self.transitions[[h, s, a, n]])
                                        .collect()
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect(),
        };
        serde_json::to_string(&doc).expect("MDP document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MdpError> {
        let doc: MdpDocument =
            serde_json::from_str(text).map_err(|e| MdpError::Document(e.to_string()))?;
        let (s_n, a_n, h_n) = (doc.num_states, doc.num_actions, doc.horizon);
        let mut transitions = Array4::zeros((h_n, s_n, a_n, s_n));
        let mut rewards = Array3::zeros((h_n + 1, s_n, a_n));
        if doc.p.len() != h_n || doc.r.len() != h_n + 1 || doc.nu.len() != s_n {
            return Err(MdpError::Document("grid sizes disagree with S/A/H".into()));
        }
        for (h, plane) in doc.p.iter().enumerate() {
            if plane.len() != s_n {
                return Err(MdpError::Document("P state dimension mismatch".into()));
            }
            for (s, rows) in plane.iter().enumerate() {
                if rows.len() != a_n {
                    return Err(MdpError::Document("P action dimension mismatch".into()));
                }
                for (a, row) in rows.iter().enumerate() {
                    if row.len() != s_n {
                        return Err(MdpError::Document("P row length mismatch".into()));
                    }
                    for (n, &p) in row.iter().enumerate() {
                        transitions[[h, s, a, n]] = p;
                    }
                }
            }
        }
        for (h, plane) in doc.r.iter().enumerate() {
            if plane.len() != s_n {
                return Err(MdpError::Document("r state dimension mismatch".into()));
            }
            for (s, row) in plane.iter().enumerate() {
                if row.len() != a_n {
                    return Err(MdpError::Document("r action dimension mismatch".into()));
                }
                for (a, &r) in row.iter().enumerate() {
                    rewards[[h, s, a]] = r;
                }
            }
        }
        Self::new(transitions, rewards, Array1::from_vec(doc.nu))
    }
}

#[derive(Serialize, Deserialize)]
struct MdpDocument {
    #[serde(rename = "S")]
    num_states: usize,
    #[serde(rename = "A")]
    num_actions: usize,
    #[serde(rename = "H")]
    horizon: usize,
    nu: Vec<f64>,
    r: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "P")]
    p: Vec<Vec<Vec<Vec<f64>>>>,
}

/// State-action values indexed `(h, s, a)` for `h = 0..H`, with the
/// convention that the period-`H` slice holds terminal values.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub values: Array3<f64>,
}

impl QTable {
    pub fn zeros(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            values: Array3::zeros((horizon + 1, num_states, num_actions)),
        }
    }

    pub fn horizon(&self) -> usize {
        self.values.dim().0 - 1
    }

    pub fn num_states(&self) -> usize {
        self.values.dim().1
    }

    pub fn num_actions(&self) -> usize {
        self.values.dim().2
    }

    /// `max_a Q_h(s, a)`.
    pub fn state_value(&self, h: usize, s: usize) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for a in 0..self.num_actions() {
            best = best.max(self.values[[h, s, a]]);
        }
        best
    }

    /// Lowest-index argmax of the row `Q_h(s, ·)`.
    pub fn greedy_action(&self, h: usize, s: usize) -> usize {
        argmax_lowest(
            (0..self.num_actions()).map(|a| self.values[[h, s, a]]),
        )
    }
}

/// Lowest-index argmax over an iterator of values.
pub(crate) fn argmax_lowest(values: impl Iterator<Item = f64>) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut best_ix = 0;
    for (ix, v) in values.enumerate() {
        if v > best {
            best = v;
            best_ix = ix;
        }
    }
    best_ix
}

/// A deterministic Markov policy: one action per `(h, s)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeterministicPolicy {
    pub actions: Array2<usize>,
}

impl DeterministicPolicy {
    pub fn horizon(&self) -> usize {
        self.actions.dim().0
    }

    pub fn num_states(&self) -> usize {
        self.actions.dim().1
    }

    pub fn to_stochastic(&self, num_actions: usize) -> StochasticPolicy {
        let (h_n, s_n) = self.actions.dim();
        let mut probs = Array3::zeros((h_n, s_n, num_actions));
        for ((h, s), &a) in self.actions.indexed_iter() {
            probs[[h, s, a]] = 1.0;
        }
        StochasticPolicy { probs }
    }
}

/// A randomized Markov policy: a distribution over actions per `(h, s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPolicy {
    pub probs: Array3<f64>,
}

impl StochasticPolicy {
    pub fn new(probs: Array3<f64>) -> Result<Self, MdpError> {
        let (h_n, s_n, _) = probs.dim();
        for h in 0..h_n {
            for s in 0..s_n {
                let row = probs.slice(ndarray::s![h, s, ..]);
                let sum: f64 = row.sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&p| p < 0.0) {
                    return Err(MdpError::BadPolicyRow { h, s, sum });
                }
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            probs: Array3::from_elem(
                (horizon, num_states, num_actions),
                1.0 / num_actions as f64,
            ),
        }
    }
}

/// One step of an episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionStep {
    pub period: usize,
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
    pub reward: f64,
}

/// A full `H`-step episode plus the terminal observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TransitionStep>,
    pub terminal_state: usize,
    pub terminal_reward: f64,
}

impl Trajectory {
    /// Sum of step rewards plus the terminal reward.
    pub fn total_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum::<f64>() + self.terminal_reward
    }
}

/// Exact backward induction. The returned table satisfies
/// `Q_h(s,a) = r_h(s,a) + sum_{s'} P_h(s'|s,a) max_b Q_{h+1}(s',b)` for
/// `h < H` and `Q_H(s,a) = r_H(s)`.
pub fn backward_induction(mdp: &TabularMDP) -> QTable {
    let (s_n, a_n, h_n) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut q = QTable::zeros(h_n, s_n, a_n);
    for s in 0..s_n {
        for a in 0..a_n {
            q.values[[h_n, s, a]] = mdp.terminal_reward(s);
        }
    }
    for h in (0..h_n).rev() {
        // Value of the next period, maximized over actions.
        let mut vnext = vec![0.0; s_n];
        for (s, v) in vnext.iter_mut().enumerate() {
            *v = q.state_value(h + 1, s);
        }
        for s in 0..s_n {
            for a in 0..a_n {
                let mut expected = 0.0;
                for (next, v) in vnext.iter().enumerate() {
                    expected += mdp.transition(h, s, a, next) * v;
                }
                q.values[[h, s, a]] = mdp.reward(h, s, a) + expected;
            }
        }
    }
    q
}

/// Canonical greedy policy for a Q table.
///
/// Built forward in `h`: at states reachable under the partially built
/// policy the action is the lowest-index argmax of the row; unreachable
/// states take the fixed fallback action `0`.
pub fn greedy_policy(q: &QTable, mdp: &TabularMDP) -> DeterministicPolicy {
    let (s_n, a_n, h_n) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut actions = Array2::zeros((h_n, s_n));
    let mut occ: Vec<f64> = mdp.initial_dist().to_vec();
    for h in 0..h_n {
        for s in 0..s_n {
            actions[[h, s]] = if occ[s] > REACH_CUTOFF {
                argmax_lowest((0..a_n).map(|a| q.values[[h, s, a]]))
            } else {
                0
            };
        }
        let mut next_occ = vec![0.0; s_n];
        for s in 0..s_n {
            if occ[s] <= REACH_CUTOFF {
                continue;
            }
            let a = actions[[h, s]];
            for (next, slot) in next_occ.iter_mut().enumerate() {
                *slot += occ[s] * mdp.transition(h, s, a, next);
            }
        }
        occ = next_occ;
    }
    DeterministicPolicy { actions }
}

/// Expected total reward (terminal reward included) under a randomized
/// policy, computed exactly by forward propagation of state distributions.
pub fn policy_value(mdp: &TabularMDP, policy: &StochasticPolicy) -> f64 {
    let (s_n, a_n, h_n) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut dist: Vec<f64> = mdp.initial_dist().to_vec();
    let mut total = 0.0;
    for h in 0..h_n {
        let mut next = vec![0.0; s_n];
        for s in 0..s_n {
            if dist[s] == 0.0 {
                continue;
            }
            for a in 0..a_n {
                let w = dist[s] * policy.probs[[h, s, a]];
                if w == 0.0 {
                    continue;
                }
                total += w * mdp.reward(h, s, a);
                for (n, slot) in next.iter_mut().enumerate() {
                    *slot += w * mdp.transition(h, s, a, n);
                }
            }
        }
        dist = next;
    }
    for s in 0..s_n {
        total += dist[s] * mdp.terminal_reward(s);
    }
    total
}

/// Draws an index from a finite distribution given by an iterator of
/// probabilities. Any floating-point dust is assigned to the last index.
pub(crate) fn sample_index(probs: impl Iterator<Item = f64>, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (ix, p) in probs.enumerate() {
        acc += p;
        last = ix;
        if u < acc {
            return ix;
        }
    }
    last
}

/// Samples one episode. Deterministic given the stream state.
pub fn simulate_episode(
    mdp: &TabularMDP,
    policy: &StochasticPolicy,
    rng: &mut RandomStream,
) -> Trajectory {
    let (s_n, a_n, h_n) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut state = sample_index(mdp.initial_dist().iter().copied(), rng.random::<f64>());
    let mut steps = Vec::with_capacity(h_n);
    for h in 0..h_n {
        let action = sample_index(
            (0..a_n).map(|a| policy.probs[[h, state, a]]),
            rng.random::<f64>(),
        );
        let next_state = sample_index(
            (0..s_n).map(|n| mdp.transition(h, state, action, n)),
            rng.random::<f64>(),
        );
        steps.push(TransitionStep {
            period: h,
            state,
            action,
            next_state,
            reward: mdp.reward(h, state, action),
        });
        state = next_state;
    }
    Trajectory {
        steps,
        terminal_state: state,
        terminal_reward: mdp.terminal_reward(state),
    }
}

/// Exact occupancy probabilities `(h, s)` for `h = 0..H` under a
/// deterministic policy. Every slice sums to 1.
pub fn state_visitation(mdp: &TabularMDP, policy: &DeterministicPolicy) -> Array2<f64> {
    let (s_n, h_n) = (mdp.num_states(), mdp.horizon());
    let mut occ = Array2::zeros((h_n + 1, s_n));
    for s in 0..s_n {
        occ[[0, s]] = mdp.initial_dist()[s];
    }
    for h in 0..h_n {
        for s in 0..s_n {
            let mass = occ[[h, s]];
            if mass == 0.0 {
                continue;
            }
            let a = policy.actions[[h, s]];
            for next in 0..s_n {
                occ[[h + 1, next]] += mass * mdp.transition(h, s, a, next);
            }
        }
    }
    occ
}

/// Minimum action gap over reachable states under the canonical optimal
/// policy: `min_h min_{s: p_h(s)>0} (best Q - second best Q)`.
///
/// Returns `+inf` when there is a single action, and `MarginZero` when a
/// reachable row has an exact tie at the top.
pub fn compute_margin(mdp: &TabularMDP) -> Result<f64, MdpError> {
    if mdp.num_actions() == 1 {
        return Ok(f64::INFINITY);
    }
    let q = backward_induction(mdp);
    let policy = greedy_policy(&q, mdp);
    let occ = state_visitation(mdp, &policy);
    let mut margin = f64::INFINITY;
    for h in 0..mdp.horizon() {
        for s in 0..mdp.num_states() {
            if occ[[h, s]] <= REACH_CUTOFF {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for a in 0..mdp.num_actions() {
                let v = q.values[[h, s, a]];
                if v > best {
                    second = best;
                    best = v;
                } else if v > second {
                    second = v;
                }
            }
            let gap = best - second;
            if gap == 0.0 {
                return Err(MdpError::MarginZero { h, s });
            }
            margin = margin.min(gap);
        }
    }
    Ok(margin)
}

/// Smallest positive occupancy probability of a non-final state across a
/// family of MDPs, each evaluated under its own canonical optimal policy.
///
/// Panics on an empty slice.
pub fn compute_p_underbar(hypotheses: &[TabularMDP]) -> f64 {
    assert!(!hypotheses.is_empty(), "need at least one hypothesis");
    let mut floor = f64::INFINITY;
    for mdp in hypotheses {
        let q = backward_induction(mdp);
        let policy = greedy_policy(&q, mdp);
        let occ = state_visitation(mdp, &policy);
        for h in 0..mdp.horizon() {
            for s in 0..mdp.num_states() {
                let p = occ[[h, s]];
                if p > REACH_CUTOFF {
                    floor = floor.min(p);
                }
            }
        }
    }
    floor
}
