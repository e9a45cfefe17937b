//! Concrete environments: the Deep Sea exploration benchmark and a
//! margin-certified random MDP generator for theory experiments.

use ndarray::{Array1, Array3, Array4};
use thiserror::Error;

use crate::mdp::{compute_margin, compute_p_underbar, MdpError, TabularMDP};
use crate::rng::RandomStream;
use rand::Rng;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("no certified instance found after {attempts} attempts")]
    GenerationFailed { attempts: usize },
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// Deep Sea of size `M`: states are `(x, d)` pairs with `0 <= x, d <= M`,
/// horizon `H = M`, two actions (`0` = left, `1` = right). Moving right costs
/// `move_cost` and succeeds with probability `1 - slip`; reaching `(M, M)` at
/// the end of the episode pays `bonus`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeepSeaSpec {
    pub size: usize,
    pub move_cost: f64,
    pub bonus: f64,
    pub slip: f64,
}

impl DeepSeaSpec {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            move_cost: -0.1 / size as f64,
            bonus: 1.0,
            slip: 1.0 / size as f64,
        }
    }

    /// Row-major state id for position `(x, d)`.
    pub fn state_id(&self, x: usize, d: usize) -> usize {
        x * (self.size + 1) + d
    }

    pub fn num_states(&self) -> usize {
        (self.size + 1) * (self.size + 1)
    }
}

/// Builds the Deep Sea MDP. The initial state is fixed at `(0, 0)`; the
/// depth coordinate always increments (clamped at `M`); combinations with
/// `x > d` cannot occur from the start state and keep identity-in-`x`
/// dynamics so the full `(M+1)^2` grid stays a valid state space.
pub fn make_deep_sea(spec: &DeepSeaSpec) -> TabularMDP {
    assert!(spec.size >= 2, "deep sea needs size >= 2");
    assert!(
        (0.0..1.0).contains(&spec.slip),
        "slip must lie in [0, 1)"
    );
    let m = spec.size;
    let s_n = spec.num_states();
    let h_n = m;
    let mut p = Array4::zeros((h_n, s_n, 2, s_n));
    let mut step = Array3::zeros((h_n, s_n, 2));
    for h in 0..h_n {
        for x in 0..=m {
            for d in 0..=m {
                let s = spec.state_id(x, d);
                let dn = (d + 1).min(m);
                if x > d {
                    for a in 0..2 {
                        p[[h, s, a, spec.state_id(x, dn)]] = 1.0;
                    }
                } else {
                    p[[h, s, 0, spec.state_id(x.saturating_sub(1), dn)]] = 1.0;
                    let xr = (x + 1).min(m);
                    p[[h, s, 1, spec.state_id(xr, dn)]] += 1.0 - spec.slip;
                    p[[h, s, 1, spec.state_id(x, dn)]] += spec.slip;
                }
                step[[h, s, 1]] = spec.move_cost;
            }
        }
    }
    let mut terminal = Array1::zeros(s_n);
    terminal[spec.state_id(m, m)] = spec.bonus;
    let mut nu = Array1::zeros(s_n);
    nu[spec.state_id(0, 0)] = 1.0;
    TabularMDP::with_terminal(p, step, terminal, nu).expect("deep sea construction is valid")
}

fn dirichlet_row(len: usize, rng: &mut RandomStream) -> Vec<f64> {
    // Dirichlet(1,...,1) via normalized exponentials.
    let mut row: Vec<f64> = (0..len)
        .map(|_| -f64::ln(1.0 - rng.random::<f64>()))
        .collect();
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= sum);
    row
}

fn random_transitions(
    s_n: usize,
    a_n: usize,
    h_n: usize,
    rng: &mut RandomStream,
) -> Array4<f64> {
    let mut p = Array4::zeros((h_n, s_n, a_n, s_n));
    for h in 0..h_n {
        for s in 0..s_n {
            for a in 0..a_n {
                for (next, v) in dirichlet_row(s_n, rng).into_iter().enumerate() {
                    p[[h, s, a, next]] = v;
                }
            }
        }
    }
    p
}

fn random_rewards(
    s_n: usize,
    a_n: usize,
    h_n: usize,
    rng: &mut RandomStream,
) -> (Array3<f64>, Array1<f64>) {
    let mut step = Array3::zeros((h_n, s_n, a_n));
    step.iter_mut()
        .for_each(|v| *v = rng.random::<f64>() * 2.0 - 1.0);
    let terminal = Array1::from_vec(
        (0..s_n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
    );
    (step, terminal)
}

const MAX_ATTEMPTS: usize = 1000;

/// Rejection-samples a tabular MDP with Dirichlet transition rows, uniform
/// rewards in `[-1, 1]` and a uniform initial distribution until the action
/// gap certifies at `min_margin` and every-state reachability is positive.
pub fn make_random_margin_mdp(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    min_margin: f64,
    rng: &mut RandomStream,
) -> Result<TabularMDP, GenerationError> {
    assert!(min_margin > 0.0, "min_margin must be positive");
    let nu = Array1::from_elem(num_states, 1.0 / num_states as f64);
    for _ in 0..MAX_ATTEMPTS {
        let p = random_transitions(num_states, num_actions, horizon, rng);
        let (step, terminal) = random_rewards(num_states, num_actions, horizon, rng);
        let mdp = TabularMDP::with_terminal(p, step, terminal, nu.clone())?;
        let margin_ok = matches!(compute_margin(&mdp), Ok(m) if m >= min_margin);
        if margin_ok && compute_p_underbar(std::slice::from_ref(&mdp)) > 0.0 {
            return Ok(mdp);
        }
    }
    Err(GenerationError::GenerationFailed {
        attempts: MAX_ATTEMPTS,
    })
}

/// Builds a family of margin-certified MDPs sharing rewards and the initial
/// distribution, differing only in their transition kernels. Suitable as a
/// finite hypothesis set for posterior-sampling experiments.
pub fn make_random_hypothesis_set(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    count: usize,
    min_margin: f64,
    rng: &mut RandomStream,
) -> Result<Vec<TabularMDP>, GenerationError> {
    assert!(count >= 1);
    let first = make_random_margin_mdp(num_states, num_actions, horizon, min_margin, rng)?;
    let step = first
        .rewards()
        .slice(ndarray::s![..horizon, .., ..])
        .to_owned();
    let terminal = Array1::from_vec(
        (0..num_states).map(|s| first.terminal_reward(s)).collect(),
    );
    let nu = first.initial_dist().clone();
    let mut set = vec![first];
    while set.len() < count {
        let mut found = false;
        for _ in 0..MAX_ATTEMPTS {
            let p = random_transitions(num_states, num_actions, horizon, rng);
            let mdp =
                TabularMDP::with_terminal(p, step.clone(), terminal.clone(), nu.clone())?;
            if matches!(compute_margin(&mdp), Ok(m) if m >= min_margin) {
                set.push(mdp);
                found = true;
                break;
            }
        }
        if !found {
            return Err(GenerationError::GenerationFailed {
                attempts: MAX_ATTEMPTS,
            });
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{backward_induction, greedy_policy, policy_value, state_visitation};
    use crate::rng::stream;
    use ndarray::Array2;

    #[test]
    fn deep_sea_dimensions_and_costs() {
        let spec = DeepSeaSpec::new(10);
        let mdp = make_deep_sea(&spec);
        assert_eq!(mdp.num_states(), 121);
        assert_eq!(mdp.num_actions(), 2);
        assert_eq!(mdp.horizon(), 10);
        assert!((spec.move_cost + 0.01).abs() < 1e-15);
        assert!((spec.slip - 0.1).abs() < 1e-15);
        for x in 0..=10usize {
            for d in 0..=10usize {
                assert_eq!(mdp.reward(3, spec.state_id(x, d), 1), spec.move_cost);
                assert_eq!(mdp.reward(3, spec.state_id(x, d), 0), 0.0);
            }
        }
    }

    #[test]
    fn left_from_origin_goes_to_zero_one() {
        let spec = DeepSeaSpec::new(10);
        let mdp = make_deep_sea(&spec);
        let origin = spec.state_id(0, 0);
        let target = spec.state_id(0, 1);
        assert_eq!(mdp.transition(0, origin, 0, target), 1.0);
    }

    #[test]
    fn depth_always_increments() {
        let spec = DeepSeaSpec::new(4);
        let mdp = make_deep_sea(&spec);
        for h in 0..4 {
            for x in 0..=4usize {
                for d in 0..4usize {
                    let s = spec.state_id(x, d);
                    for a in 0..2 {
                        for xn in 0..=4usize {
                            for dn in 0..=4usize {
                                if mdp.transition(h, s, a, spec.state_id(xn, dn)) > 0.0 {
                                    assert_eq!(dn, d + 1);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn always_right_reach_probability_matches_the_closed_form() {
        let spec = DeepSeaSpec::new(10);
        let mdp = make_deep_sea(&spec);
        let pol = crate::mdp::DeterministicPolicy {
            actions: Array2::from_elem((10, 121), 1),
        };
        let occ = state_visitation(&mdp, &pol);
        let reach = occ[[10, spec.state_id(10, 10)]];
        assert!((reach - 0.9f64.powi(10)).abs() < 1e-12);
    }

    #[test]
    fn no_slip_always_right_returns_point_nine() {
        let spec = DeepSeaSpec {
            slip: 0.0,
            ..DeepSeaSpec::new(10)
        };
        let mdp = make_deep_sea(&spec);
        let pol = crate::mdp::DeterministicPolicy {
            actions: Array2::from_elem((10, 121), 1),
        }
        .to_stochastic(2);
        assert!((policy_value(&mdp, &pol) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn generator_certifies_and_is_deterministic() {
        let a = make_random_margin_mdp(2, 2, 2, 0.1, &mut stream(3)).unwrap();
        let b = make_random_margin_mdp(2, 2, 2, 0.1, &mut stream(3)).unwrap();
        assert_eq!(a, b);
        assert!(compute_margin(&a).unwrap() >= 0.1);
        assert!(compute_p_underbar(std::slice::from_ref(&a)) > 0.0);
    }

    #[test]
    fn hypothesis_set_shares_rewards_and_start_distribution() {
        let set = make_random_hypothesis_set(3, 2, 2, 4, 0.05, &mut stream(9)).unwrap();
        assert_eq!(set.len(), 4);
        for mdp in &set[1..] {
            assert_eq!(mdp.rewards(), set[0].rewards());
            assert_eq!(mdp.initial_dist(), set[0].initial_dist());
            assert_ne!(mdp.transitions(), set[0].transitions());
            assert!(compute_margin(mdp).unwrap() >= 0.05);
        }
    }

    #[test]
    fn deep_sea_optimal_policy_goes_right_on_the_diagonal() {
        let spec = DeepSeaSpec::new(6);
        let mdp = make_deep_sea(&spec);
        let q = backward_induction(&mdp);
        let pol = greedy_policy(&q, &mdp);
        for d in 0..6usize {
            assert_eq!(pol.actions[[d, spec.state_id(d, d)]], 1);
        }
    }
}
