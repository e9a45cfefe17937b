//! Python bindings: the environment constructors, expert dataset generator,
//! agents and closed-form quantities, driven in-process from Python.
//!
//! Usage from Python:
//!
//!     import regret_forge as rf
//!     env = rf.Mdp.deep_sea(10)
//!     data = rf.generate_offline(env, beta=10.0, kappa=5.0, seed=1)
//!     per_ep, cum = rf.run_agent(env, data, "irlsvi", beta=10.0, episodes=300, seed=0)

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use regret_forge_core::envs::{
    make_deep_sea, make_random_hypothesis_set, make_random_margin_mdp, DeepSeaSpec,
};
use regret_forge_core::expert::{
    episodes_for_ratio, estimate_beta_entropy, generate_offline as core_generate_offline,
    Competence, OfflineDataset,
};
use regret_forge_core::harness::RegretCurve;
use regret_forge_core::ipsrl::{
    beta_threshold as core_beta_threshold, epsilon_bound as core_epsilon_bound,
    estimate_epsilon_mc, ipsrl_run as core_ipsrl_run, HypothesisSet,
};
use regret_forge_core::mdp::{
    backward_induction, compute_margin, compute_p_underbar, greedy_policy, policy_value,
    TabularMDP,
};
use regret_forge_core::rlsvi::{run_agent as core_run_agent, AgentKind, BetaMode, RlsviConfig};
use regret_forge_core::rng::stream;

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A finite-horizon tabular MDP.
#[pyclass(name = "Mdp", from_py_object)]
#[derive(Clone)]
struct PyMdp {
    inner: TabularMDP,
}

#[pymethods]
impl PyMdp {
    /// Deep sea benchmark of the given size.
    #[staticmethod]
    #[pyo3(signature = (size, move_cost=None, bonus=None, slip=None))]
    fn deep_sea(size: usize, move_cost: Option<f64>, bonus: Option<f64>, slip: Option<f64>) -> Self {
        let mut spec = DeepSeaSpec::new(size);
        if let Some(c) = move_cost {
            spec.move_cost = c;
        }
        if let Some(b) = bonus {
            spec.bonus = b;
        }
        if let Some(s) = slip {
            spec.slip = s;
        }
        Self {
            inner: make_deep_sea(&spec),
        }
    }

    /// Random MDP whose action gap certifies at `min_margin`.
    #[staticmethod]
    #[pyo3(signature = (num_states, num_actions, horizon, min_margin, seed))]
    fn random_margin(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        min_margin: f64,
        seed: u64,
    ) -> PyResult<Self> {
        make_random_margin_mdp(num_states, num_actions, horizon, min_margin, &mut stream(seed))
            .map(|inner| Self { inner })
            .map_err(runtime_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        TabularMDP::from_json(text)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn num_states(&self) -> usize {
        self.inner.num_states()
    }

    #[getter]
    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    /// Exact optimal expected return from the initial distribution.
    fn optimal_value(&self) -> f64 {
        let q = backward_induction(&self.inner);
        (0..self.inner.num_states())
            .map(|s| self.inner.initial_dist()[s] * q.state_value(0, s))
            .sum()
    }

    /// Expected return of the canonical optimal policy (sanity identity:
    /// equals `optimal_value`).
    fn optimal_policy_value(&self) -> f64 {
        let q = backward_induction(&self.inner);
        let policy = greedy_policy(&q, &self.inner).to_stochastic(self.inner.num_actions());
        policy_value(&self.inner, &policy)
    }

    /// Minimum action gap over reachable states.
    fn margin(&self) -> PyResult<f64> {
        compute_margin(&self.inner).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Mdp(S={}, A={}, H={})",
            self.inner.num_states(),
            self.inner.num_actions(),
            self.inner.horizon()
        )
    }
}

/// Expert demonstrations plus generation metadata.
#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: OfflineDataset,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn num_episodes(&self) -> usize {
        self.inner.num_episodes
    }

    #[getter]
    fn num_transitions(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.meta.beta
    }

    /// Entropy-based deliberateness estimate from the recorded actions.
    #[pyo3(signature = (c0=1.0))]
    fn beta_entropy_estimate(&self, c0: f64) -> PyResult<f64> {
        estimate_beta_entropy(&self.inner, c0).map_err(value_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_jsonl(&path).map_err(runtime_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        OfflineDataset::load_jsonl(&path)
            .map(|inner| Self { inner })
            .map_err(runtime_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(episodes={}, transitions={}, beta={})",
            self.inner.num_episodes,
            self.inner.len(),
            self.inner.meta.beta
        )
    }
}

/// Generate expert demonstrations on an environment. Provide either
/// `episodes` or a data ratio `kappa`.
#[pyfunction]
#[pyo3(signature = (env, beta, episodes=None, kappa=None, lam=None, seed=0))]
fn generate_offline(
    env: &PyMdp,
    beta: f64,
    episodes: Option<usize>,
    kappa: Option<f64>,
    lam: Option<f64>,
    seed: u64,
) -> PyResult<PyDataset> {
    let count = match (episodes, kappa) {
        (Some(n), _) => n,
        (None, Some(k)) => episodes_for_ratio(
            k,
            env.inner.num_states(),
            env.inner.num_actions(),
            env.inner.horizon(),
        ),
        (None, None) => return Err(PyValueError::new_err("provide episodes or kappa")),
    };
    let competence = Competence::new(beta, lam.unwrap_or(f64::INFINITY));
    let mut data = core_generate_offline(&env.inner, &competence, count, &mut stream(seed));
    data.meta.kappa = kappa;
    data.meta.seed = seed;
    Ok(PyDataset { inner: data })
}

fn curve_to_py(curve: RegretCurve) -> (Vec<f64>, Vec<f64>) {
    (curve.per_episode, curve.cumulative)
}

/// Run one value-iteration agent (`"urlsvi"`, `"pirlsvi"` or `"irlsvi"`)
/// and return `(per_episode_regret, cumulative_regret)`.
#[pyfunction]
#[pyo3(signature = (env, data, agent, beta, episodes, seed,
                    sigma0_sq=1.0, sigma_sq=0.1, buffer_b=20, alpha=0.5,
                    entropy_beta=false, c0=1.0))]
#[allow(clippy::too_many_arguments)]
fn run_agent(
    env: &PyMdp,
    data: &PyDataset,
    agent: &str,
    beta: f64,
    episodes: usize,
    seed: u64,
    sigma0_sq: f64,
    sigma_sq: f64,
    buffer_b: usize,
    alpha: f64,
    entropy_beta: bool,
    c0: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let kind = AgentKind::parse(agent)
        .ok_or_else(|| PyValueError::new_err(format!("unknown agent '{agent}'")))?;
    let beta_mode = if entropy_beta {
        BetaMode::Entropy { c0 }
    } else {
        BetaMode::Known(beta)
    };
    let mut config = RlsviConfig::new(kind, beta_mode);
    config.sigma0_sq = sigma0_sq;
    config.sigma_sq = sigma_sq;
    config.buffer_b = buffer_b;
    config.alpha = alpha;
    core_run_agent(&env.inner, &data.inner, &config, episodes, &mut stream(seed))
        .map(curve_to_py)
        .map_err(runtime_err)
}

fn build_set(hypotheses: Vec<PyMdp>, prior: Option<Vec<f64>>) -> PyResult<HypothesisSet> {
    let mdps: Vec<TabularMDP> = hypotheses.into_iter().map(|m| m.inner).collect();
    match prior {
        Some(p) => HypothesisSet::new(mdps, p),
        None => HypothesisSet::uniform(mdps),
    }
    .map_err(value_err)
}

/// Posterior-sampling agent over a finite hypothesis set, warmed up on the
/// demonstrations. Returns `(per_episode_regret, cumulative_regret)`.
#[pyfunction]
#[pyo3(signature = (hypotheses, data, beta, true_index, episodes, seed, prior=None))]
fn ipsrl_run(
    hypotheses: Vec<PyMdp>,
    data: &PyDataset,
    beta: f64,
    true_index: usize,
    episodes: usize,
    seed: u64,
    prior: Option<Vec<f64>>,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let set = build_set(hypotheses, prior)?;
    core_ipsrl_run(&set, &data.inner, beta, true_index, episodes, &mut stream(seed))
        .map(curve_to_py)
        .map_err(runtime_err)
}

/// Monte-Carlo first-episode error report as a dict with keys
/// `mc_pi_tilde`, `mc_pi_hat`, `bound`, `se_pi_tilde`, `se_pi_hat`.
#[pyfunction]
#[pyo3(signature = (hypotheses, beta, episodes, trials, seed, prior=None))]
fn estimate_epsilon(
    hypotheses: Vec<PyMdp>,
    beta: f64,
    episodes: usize,
    trials: usize,
    seed: u64,
    prior: Option<Vec<f64>>,
) -> PyResult<HashMap<String, f64>> {
    let set = build_set(hypotheses, prior)?;
    let report = estimate_epsilon_mc(&set, beta, episodes, trials, &mut stream(seed));
    let mut out = HashMap::new();
    out.insert("mc_pi_tilde".into(), report.mc_pi_tilde);
    out.insert("mc_pi_hat".into(), report.mc_pi_hat);
    out.insert("bound".into(), report.bound_eps_l);
    out.insert("se_pi_tilde".into(), report.se_pi_tilde());
    out.insert("se_pi_hat".into(), report.se_pi_hat());
    out.insert("n_trials".into(), report.n_trials as f64);
    Ok(out)
}

/// Margin-certified random hypothesis sets sharing rewards and the initial
/// distribution.
#[pyfunction]
#[pyo3(signature = (num_states, num_actions, horizon, count, min_margin, seed))]
fn random_hypothesis_set(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    count: usize,
    min_margin: f64,
    seed: u64,
) -> PyResult<Vec<PyMdp>> {
    make_random_hypothesis_set(
        num_states,
        num_actions,
        horizon,
        count,
        min_margin,
        &mut stream(seed),
    )
    .map(|mdps| mdps.into_iter().map(|inner| PyMdp { inner }).collect())
    .map_err(runtime_err)
}

/// Smallest positive reachable-state probability across hypotheses.
#[pyfunction]
fn p_underbar(hypotheses: Vec<PyMdp>) -> f64 {
    let mdps: Vec<TabularMDP> = hypotheses.into_iter().map(|m| m.inner).collect();
    compute_p_underbar(&mdps)
}

/// Closed-form bound `min(1, 2SH [exp(-L p^2/18) + exp(-L p/36)])`.
#[pyfunction]
fn epsilon_bound(num_states: usize, horizon: usize, episodes: usize, p_underbar: f64) -> f64 {
    core_epsilon_bound(num_states, horizon, episodes, p_underbar)
}

/// Deliberateness threshold `[ln 3 - ln p + ln(H-1) + ln(A-1)] / margin`.
#[pyfunction]
fn beta_threshold(margin: f64, p_underbar: f64, horizon: usize, num_actions: usize) -> PyResult<f64> {
    core_beta_threshold(margin, p_underbar, horizon, num_actions).map_err(value_err)
}

#[pymodule]
fn regret_forge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMdp>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(generate_offline, m)?)?;
    m.add_function(wrap_pyfunction!(run_agent, m)?)?;
    m.add_function(wrap_pyfunction!(ipsrl_run, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_epsilon, m)?)?;
    m.add_function(wrap_pyfunction!(random_hypothesis_set, m)?)?;
    m.add_function(wrap_pyfunction!(p_underbar, m)?)?;
    m.add_function(wrap_pyfunction!(epsilon_bound, m)?)?;
    m.add_function(wrap_pyfunction!(beta_threshold, m)?)?;
    Ok(())
}
