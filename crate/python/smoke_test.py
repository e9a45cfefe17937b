#!/usr/bin/env python3
"""Smoke test for the regret_forge extension module.

Builds nothing itself: run python/build.sh first (or let this script find a
previously built target/release/libregret_forge.so and stage it).
"""

import math
import shutil
import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent


def stage_module() -> None:
    """Make regret_forge importable from this directory."""
    staged = HERE / "regret_forge.so"
    built = HERE.parent / "target" / "release" / "libregret_forge.so"
    if built.exists() and (
        not staged.exists() or built.stat().st_mtime > staged.stat().st_mtime
    ):
        shutil.copy2(built, staged)
    if not staged.exists():
        sys.exit("regret_forge.so not found - run python/build.sh first")
    sys.path.insert(0, str(HERE))


def close(a: float, b: float, tol: float = 1e-9) -> bool:
    return abs(a - b) <= tol


def main() -> None:
    stage_module()
    import regret_forge as rf

    checks = 0

    def ok(name: str, condition: bool) -> None:
        nonlocal checks
        if not condition:
            sys.exit(f"FAIL: {name}")
        checks += 1
        print(f"ok - {name}")

    env = rf.Mdp.deep_sea(10)
    ok("deep sea dimensions", (env.num_states, env.num_actions, env.horizon) == (121, 2, 10))
    v = env.optimal_value()
    ok("optimal value consistent with policy evaluation",
       close(v, env.optimal_policy_value(), 1e-10))
    ok("optimal value in the expected range", 0.2 < v < 0.35)
    ok("margin is positive", env.margin() > 0.0)

    round_trip = rf.Mdp.from_json(env.to_json())
    ok("json round trip", close(round_trip.optimal_value(), v, 1e-12))

    data = rf.generate_offline(env, beta=10.0, kappa=5.0, seed=1)
    ok("data ratio episode count", data.num_episodes == 121)
    ok("complete episodes", len(data) == 121 * 10)
    est = data.beta_entropy_estimate()
    ok("entropy estimate positive", est > 0.0)

    per_u, cum_u = rf.run_agent(env, data, "urlsvi", beta=10.0, episodes=60, seed=3)
    per_i, cum_i = rf.run_agent(env, data, "irlsvi", beta=10.0, episodes=60, seed=3)
    ok("curves have the requested length", len(per_u) == 60 and len(cum_i) == 60)
    ok("cumulative regret is the prefix sum",
       close(cum_i[-1], sum(per_i), 1e-9))
    ok("informed agent beats the uninformed one here", cum_i[-1] < cum_u[-1])

    ok("error bound closed form",
       close(rf.epsilon_bound(2, 2, 400, 0.5),
             16.0 * math.exp(-400 * 0.25 / 18.0), 1e-12))
    ok("threshold closed form",
       close(rf.beta_threshold(1.0, 0.5, 2, 2), math.log(6.0), 1e-12))

    hyps = rf.random_hypothesis_set(3, 2, 2, 3, 0.1, seed=5)
    ok("hypothesis set size", len(hyps) == 3)
    p = rf.p_underbar(hyps)
    ok("reachability floor in (0, 1]", 0.0 < p <= 1.0)

    small = rf.generate_offline(hyps[0], beta=5.0, episodes=20, seed=6)
    per_ps, cum_ps = rf.ipsrl_run(hyps, small, beta=5.0, true_index=0,
                                  episodes=50, seed=7)
    ok("sampler curve length", len(per_ps) == 50)

    report = rf.estimate_epsilon(hyps, beta=5.0, episodes=10, trials=200, seed=8)
    ok("epsilon report fields",
       0.0 <= report["mc_pi_tilde"] <= 1.0 and 0.0 <= report["mc_pi_hat"] <= 1.0
       and report["bound"] <= 1.0)

    print(f"\nall {checks} smoke checks passed")


if __name__ == "__main__":
    main()
