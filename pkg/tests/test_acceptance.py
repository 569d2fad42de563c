"""End-to-end acceptance checks.

Each test covers one numbered criterion and prints a single PASS/FAIL line
(visible with ``pytest -s`` or in captured output on failure).
"""

import hashlib
import itertools
import json
import math
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from regimefolio.agents import (
    TrainConfig,
    cem_train,
    equal_weight_policy,
    obs_features,
    policy_act,
    reinforce_train,
)
from regimefolio.cli import main as cli_main
from regimefolio.dataio import FeatureMatrix, ReturnPanel
from regimefolio.env import (
    EnvConfig,
    RegimeStats,
    env_new,
    regime_aware_reward,
)
from regimefolio.fixtures import synthetic_panel, write_panel_csv
from regimefolio.mcsim import (
    TransitionMatrix,
    compound_strategy,
    empirical_var_cvar,
    simulate_chain,
)
from regimefolio.metrics import backtest
from regimefolio.regimes import (
    RegimeModel,
    hmm_fit,
    hmm_forward_loglik,
    viterbi,
)
from regimefolio.rng import child_stream
from regimefolio.stats import (
    anova_f,
    cara_utility,
    crra_utility,
    f_sf,
    mutual_information,
)


@contextmanager
def criterion(number: int, description: str):
    try:
        yield
    except BaseException:
        print(f"[criterion {number:02d}] FAIL  {description}")
        raise
    print(f"[criterion {number:02d}] PASS  {description}")


def feature_matrix(values, start_year=2000):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    return FeatureMatrix(
        years=list(range(start_year, start_year + values.shape[0])),
        feature_names=[f"f{i}" for i in range(values.shape[1])],
        values=values,
    )


def accuracy_up_to_permutation(pred, truth, K):
    best = 0.0
    for perm in itertools.permutations(range(K)):
        mapped = np.array([perm[p] for p in pred])
        best = max(best, float(np.mean(mapped == truth)))
    return best


def test_criterion_01_regime_recovery():
    with criterion(1, "2-state HMM recovery >= 95% with monotone log-likelihood"):
        rng = np.random.default_rng(0)
        T = 500
        states = np.empty(T, dtype=int)
        states[0] = 0
        for t in range(1, T):
            states[t] = states[t - 1] if rng.random() < 0.9 else 1 - states[t - 1]
        obs = rng.normal(np.where(states == 0, -5.0, 5.0), 1.0)
        X = feature_matrix(obs[:, None], start_year=1500)

        history = []
        start = time.perf_counter()
        model = hmm_fit(X, 2, seed=0, loglik_history=history)
        elapsed = time.perf_counter() - start

        acc = accuracy_up_to_permutation(viterbi(model, X), states, 2)
        assert acc >= 0.95
        diffs = np.diff(history)
        assert np.all(diffs >= -1e-9)
        assert elapsed < 5.0


def test_criterion_02_forward_equals_path_sum():
    with criterion(2, "HMM forward likelihood equals exhaustive path sum (100 trials)"):
        rng = np.random.default_rng(1)
        for _ in range(100):
            K = int(rng.integers(1, 4))
            T = int(rng.integers(1, 9))
            model = RegimeModel(
                kind="hmm", K=K,
                means=rng.normal(0, 2, size=(K, 1)),
                variances=rng.uniform(0.2, 2.0, size=(K, 1)),
                transition=rng.dirichlet(np.ones(K), size=K),
                initial_dist=rng.dirichlet(np.ones(K)),
                feature_names=["f0"],
                scaler_mean=np.zeros(1),
                scaler_std=np.ones(1),
            )
            X = feature_matrix(rng.normal(0, 2, size=(T, 1)))
            got = hmm_forward_loglik(model, X)

            total = 0.0
            for path in itertools.product(range(K), repeat=T):
                p = model.initial_dist[path[0]]
                for t in range(1, T):
                    p *= model.transition[path[t - 1], path[t]]
                for t, k in enumerate(path):
                    var = float(model.variances[k, 0])
                    z = float(X.values[t, 0] - model.means[k, 0])
                    p *= math.exp(-0.5 * z * z / var) / math.sqrt(2 * math.pi * var)
                total += p
            want = math.log(total)
            assert got == pytest.approx(want, rel=1e-10)


def test_criterion_03_chain_stationarity():
    with criterion(3, "100k-step chain occupancy matches stationary 0.20 +/- 0.01"):
        P = TransitionMatrix([[0.9, 0.1], [0.4, 0.6]])
        np.testing.assert_allclose(P.stationary(), [0.8, 0.2], atol=1e-12)
        path = simulate_chain(100_000, P, 0, child_stream(7, "acceptance.chain"))
        assert abs(float(np.mean(path == 1)) - 0.20) <= 0.01


def test_criterion_04_var_cvar_oracle():
    with criterion(4, "empirical VaR/CVaR matches sort-based oracle (1000 trials)"):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            n = int(rng.integers(1, 300))
            samples = rng.normal(0, 1, size=n)
            alpha = float(rng.uniform(0.01, 0.5))
            var, cvar = empirical_var_cvar(samples, alpha)

            ordered = sorted(samples.tolist())
            idx = max(0, math.ceil(alpha * n) - 1)
            want_var = ordered[idx]
            tail = [s for s in ordered if s <= want_var]
            assert var == want_var
            assert cvar == pytest.approx(sum(tail) / len(tail), rel=1e-12)


def _scripted_traces():
    """Run the same varying-action script through baseline + each ablation."""
    T = 61  # step indices 0..60 so both the 30- and 60-step resets land
    rng = np.random.default_rng(3)
    panel = ReturnPanel(
        years=list(range(1950, 1950 + T)),
        asset_names=["A", "B"],
        returns=rng.uniform(-0.15, 0.2, size=(T, 2)),
    )
    probs = rng.dirichlet(np.ones(2), size=T)
    from regimefolio.regimes import RegimePosterior

    post = RegimePosterior(probs=probs, labels=np.argmax(probs, axis=1), loglik=0.0)
    actions = [np.array([0.6, 0.4]) if t % 2 == 0 else np.array([0.4, 0.6])
               for t in range(T)]

    traces = {}
    for variant, flags in {
        "baseline": {},
        "no_shock": {"no_shock": True},
        "no_reset": {"no_reset": True},
        "no_clip": {"no_clip": True},
        "no_cost": {"no_cost": True},
    }.items():
        env = env_new(EnvConfig(**flags), panel, post)
        env.reset()
        for action in actions:
            env.step(action)
        traces[variant] = env.trace
    return traces


def test_criterion_05_reward_mechanics():
    with criterion(5, "shock/reset/clip schedule and independent ablation flags"):
        traces = _scripted_traces()
        base = traces["baseline"]

        assert [r["t"] for r in base if r["shock_applied"]] == [25, 50]
        assert [r["t"] for r in base if r["reset_applied"]] == [30, 60]
        assert all(-0.03 <= r["reward"] <= 0.03 for r in base)

        no_shock = traces["no_shock"]
        assert not any(r["shock_applied"] for r in no_shock)
        assert [r["t"] for r in no_shock if r["reset_applied"]] == [30, 60]

        no_reset = traces["no_reset"]
        assert not any(r["reset_applied"] for r in no_reset)
        assert [r["t"] for r in no_reset if r["shock_applied"]] == [25, 50]

        no_clip = traces["no_clip"]
        assert any(abs(r["reward"]) > 0.03 for r in no_clip)
        assert [r["t"] for r in no_clip if r["shock_applied"]] == [25, 50]
        assert [r["t"] for r in no_clip if r["reset_applied"]] == [30, 60]

        no_cost = traces["no_cost"]
        assert all(r["cost"] == 0.0 for r in no_cost)
        assert any(r["cost"] > 0.0 for r in base)


def test_criterion_06_regime_aware_reward_fixtures():
    with criterion(6, "regime-aware reward matches 20 hand-computed fixtures"):
        rng = np.random.default_rng(4)
        cfg = EnvConfig(reward_mode="regime_aware")
        checked = 0
        for trial in range(20):
            K = int(rng.integers(1, 4))
            N = int(rng.integers(1, 4))
            stats = RegimeStats(
                means=rng.normal(0.02, 0.05, size=(K, N)),
                variances=rng.uniform(0.001, 0.05, size=(K, N)),
            )
            gamma_k = rng.uniform(0.5, 3.0, size=K)
            w = rng.dirichlet(np.ones(N))
            w_prev = rng.dirichlet(np.ones(N))
            if trial < 5:  # degenerate one-hot mixtures
                rho = np.zeros(K)
                rho[trial % K] = 1.0
            else:
                rho = rng.dirichlet(np.ones(K))

            # Independent scalar-loop evaluation of the published formula.
            mu = 0.0
            var = 0.0
            for k in range(K):
                e_k = sum(w[i] * stats.means[k, i] for i in range(N))
                v_k = sum(w[i] ** 2 * stats.variances[k, i] for i in range(N))
                mu += rho[k] * e_k
                var += rho[k] * gamma_k[k] * v_k
            cost = 0.002 * sum(abs(w[i] - w_prev[i]) for i in range(N))
            want = (mu - cost) / (math.sqrt(var) + 1e-8)

            got, breakdown = regime_aware_reward(w, w_prev, rho, stats, cfg, gamma_k)
            assert abs(got - want) < 1e-12
            assert breakdown.cost == pytest.approx(cost, abs=1e-15)

            # Homogeneity: doubling every gamma scales the reward by 1/sqrt(2)
            # in the epsilon-free limit.
            tiny = EnvConfig(reward_mode="regime_aware", epsilon=1e-300)
            base_val, _ = regime_aware_reward(w, w_prev, rho, stats, tiny, gamma_k)
            double_val, _ = regime_aware_reward(
                w, w_prev, rho, stats, tiny, 2.0 * gamma_k
            )
            assert double_val == pytest.approx(base_val / math.sqrt(2), rel=1e-9)
            checked += 1
        assert checked == 20


def test_criterion_07_gradient_check():
    with criterion(7, "score-function gradient matches finite differences"):
        r0 = np.array([0.012, -0.008])
        rho0 = np.array([0.7, 0.3])
        panel = ReturnPanel(years=[2000], asset_names=["A", "B"],
                            returns=r0[None, :])
        from regimefolio.regimes import RegimePosterior

        post = RegimePosterior(probs=rho0[None, :], labels=np.array([0]), loglik=0.0)
        env = env_new(EnvConfig(), panel, post)
        obs = env.reset()
        phi = obs_features(obs)
        w_prev = np.full(2, 0.5)

        def reward_batch(W):
            gross = W @ r0
            cost = 0.002 * np.abs(W - w_prev).sum(axis=1)
            return np.clip(gross - cost, -0.03, 0.03)

        # Anchor the vectorized reward to the real environment step.
        probe_rng = np.random.default_rng(0)
        for _ in range(5):
            w = probe_rng.dirichlet(np.ones(2))
            env.reset()
            _, r_env, _, _ = env.step(w)
            assert r_env == pytest.approx(float(reward_batch(w[None, :])[0]), abs=1e-12)

        sigma = 0.3
        theta0 = np.random.default_rng(5).normal(0, 0.5, size=(2, 5))
        eps = np.random.default_rng(6).standard_normal((100_000, 2))

        def softmax_rows(L):
            Z = L - L.max(axis=1, keepdims=True)
            E = np.exp(Z)
            return E / E.sum(axis=1, keepdims=True)

        def expected_reward(theta):
            logits = theta @ phi + sigma * eps
            return float(reward_batch(softmax_rows(logits)).mean())

        rewards = reward_batch(softmax_rows(theta0 @ phi + sigma * eps))
        advantages = rewards - rewards.mean()
        grad_analytic = ((eps / sigma) * advantages[:, None]).T.mean(axis=1)[:, None] @ phi[None, :]

        h = 1e-5
        grad_fd = np.empty_like(theta0)
        for i in range(theta0.shape[0]):
            for j in range(theta0.shape[1]):
                up = theta0.copy(); up[i, j] += h
                dn = theta0.copy(); dn[i, j] -= h
                grad_fd[i, j] = (expected_reward(up) - expected_reward(dn)) / (2 * h)

        rel = np.linalg.norm(grad_analytic - grad_fd) / np.linalg.norm(grad_fd)
        assert rel < 1e-2


def _dominance_factory():
    rng = np.random.default_rng(8)
    T = 60
    panel = ReturnPanel(
        years=list(range(1950, 1950 + T)),
        asset_names=["good", "bad"],
        returns=np.column_stack([
            rng.uniform(0.02, 0.03, size=T),
            rng.uniform(-0.03, -0.02, size=T),
        ]),
    )
    probs = rng.dirichlet(np.ones(2), size=T)
    from regimefolio.regimes import RegimePosterior

    post = RegimePosterior(probs=probs, labels=np.argmax(probs, axis=1), loglik=0.0)
    cfg = EnvConfig(no_clip=True, no_cost=True, no_reset=True, no_shock=True)
    return lambda: env_new(cfg, panel, post)


def _mean_dominant_weight(policy, env):
    obs = env.reset()
    weights = []
    done = False
    while not done:
        w = policy_act(policy, obs, deterministic=True)
        weights.append(float(w[0]))
        obs, _, done, _ = env.step(w)
    return float(np.mean(weights))


def test_criterion_08_learning_smoke():
    with criterion(8, "reinforce and cem both allocate >= 0.90 to the dominant asset"):
        factory = _dominance_factory()

        start = time.perf_counter()
        r_cfg = TrainConfig(total_steps=40_000, learning_rate=0.2,
                            batch_episodes=8, seed=0)
        p_reinforce = reinforce_train(factory, r_cfg)
        p_reinforce_again = reinforce_train(factory, r_cfg)
        reinforce_time = time.perf_counter() - start
        np.testing.assert_array_equal(p_reinforce.theta, p_reinforce_again.theta)
        assert _mean_dominant_weight(p_reinforce, factory()) >= 0.90
        assert reinforce_time < 60.0

        start = time.perf_counter()
        c_cfg = TrainConfig(seed=0)
        p_cem = cem_train(factory, c_cfg, population=24, n_iters=8, init_std=2.0)
        p_cem_again = cem_train(factory, c_cfg, population=24, n_iters=8, init_std=2.0)
        cem_time = time.perf_counter() - start
        np.testing.assert_array_equal(p_cem.theta, p_cem_again.theta)
        assert _mean_dominant_weight(p_cem, factory()) >= 0.90
        assert cem_time < 60.0


def test_criterion_09_statistics_oracles():
    with criterion(9, "ANOVA, F-CDF, mutual-information and utility oracles"):
        F, _ = anova_f([[1, 2, 3], [2, 3, 4]])
        assert F == pytest.approx(1.5, abs=1e-12)
        assert f_sf(3.231, 1, 65) == pytest.approx(0.0769, abs=0.0005)
        mi = mutual_information([0, 0, 1, 1], [-1.0, -1.0, 1.0, 1.0], bins=2)
        assert mi == pytest.approx(math.log(2), abs=1e-12)
        crra_exact = (1.03 ** (1 - 3) - 1.0) / (1 - 3)
        cara_exact = -math.exp(-3 * 0.03)
        assert crra_utility([0.03], 3.0) == pytest.approx(crra_exact, abs=1e-9)
        assert cara_utility([0.03], 3.0) == pytest.approx(cara_exact, abs=1e-9)
        assert round(crra_exact, 6) == 0.028702
        assert round(cara_exact, 6) == -0.913931


def test_criterion_10_cross_module_identity():
    with criterion(10, "equal-weight backtest reproduces pure compounding"):
        panel, _ = synthetic_panel(n_years=70, seed=0)
        rng = np.random.default_rng(9)
        probs = rng.dirichlet(np.ones(2), size=70)
        from regimefolio.regimes import RegimePosterior

        post = RegimePosterior(probs=probs, labels=np.argmax(probs, axis=1), loglik=0.0)
        env = env_new(EnvConfig(no_shock=True, no_reset=True), panel, post)
        policy = equal_weight_policy(panel.n_assets, 2)
        report = backtest(policy, env)

        w = np.full(panel.n_assets, 1.0 / panel.n_assets)
        expected = compound_strategy(panel.returns, w)
        got = math.expm1(report.final_log_value)
        assert got == pytest.approx(expected, rel=1e-10)
        # Whole wealth curve, not just the endpoint.
        np.testing.assert_allclose(
            report.wealth_curve,
            np.concatenate([[1.0], np.cumprod(1.0 + panel.returns @ w)]),
            rtol=1e-10,
        )


def _hash_tree(root: Path, skip=("manifest.json",)) -> dict:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in skip
    }


def _run_pipeline(root: Path, threads: int) -> None:
    root.mkdir(parents=True, exist_ok=True)
    csv = root / "panel.csv"
    assert cli_main(["make-fixture", "--years", "70", "--seed", "0",
                     "--out", str(csv)]) == 0
    assert cli_main(["detect", "--input", str(csv), "--model", "hmm", "--k", "2",
                     "--seed", "0", "--out", str(root / "detect")]) == 0
    regimes = str(root / "detect" / "regimes.json")
    assert cli_main(["simulate", "--input", str(csv), "--regimes", regimes,
                     "--horizon", "10", "--paths", "300",
                     "--threads", str(threads),
                     "--out", str(root / "simulate")]) == 0
    assert cli_main(["train", "--input", str(csv), "--regimes", regimes,
                     "--trainer", "cem", "--steps", "2000", "--seed", "0",
                     "--out", str(root / "train")]) == 0
    assert cli_main(["backtest", "--input", str(csv), "--regimes", regimes,
                     "--policy", str(root / "train" / "policy.json"),
                     "--out", str(root / "backtest")]) == 0
    assert cli_main(["stats", "--input", str(csv), "--regimes", regimes,
                     "--out", str(root / "stats")]) == 0


def test_criterion_11_end_to_end_determinism(tmp_path):
    with criterion(11, "full CLI pipeline byte-identical across runs and thread counts"):
        a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        _run_pipeline(a, threads=1)
        _run_pipeline(b, threads=1)
        _run_pipeline(c, threads=8)
        ha, hb, hc = _hash_tree(a), _hash_tree(b), _hash_tree(c)
        assert ha == hb
        assert ha == hc
        assert len(ha) > 15  # CSVs, JSON summaries and rendered figures


def test_criterion_12_monte_carlo_structure(tmp_path):
    with criterion(12, "multi-horizon summaries with tighter CI for the calmer strategy"):
        panel, _ = synthetic_panel(n_years=70, seed=0)
        csv = tmp_path / "panel.csv"
        write_panel_csv(panel, csv)
        assert cli_main(["detect", "--input", str(csv), "--model", "hmm", "--k", "2",
                         "--seed", "0", "--out", str(tmp_path / "detect")]) == 0

        idx = {name: i for i, name in enumerate(panel.asset_names)}
        variances = panel.returns.var(axis=0)
        defensive_asset = panel.asset_names[int(np.argmin(variances))]
        growth_asset = panel.asset_names[int(np.argmax(variances))]
        for name, asset in (("defensive", defensive_asset), ("growth", growth_asset)):
            w = np.zeros(panel.n_assets)
            w[idx[asset]] = 1.0
            (tmp_path / f"{name}.json").write_text(json.dumps({"weights": w.tolist()}))

        out = tmp_path / "simulate"
        assert cli_main(["simulate", "--input", str(csv),
                         "--regimes", str(tmp_path / "detect" / "regimes.json"),
                         "--strategy", "equal",
                         "--strategy", str(tmp_path / "defensive.json"),
                         "--strategy", str(tmp_path / "growth.json"),
                         "--paths", "1000", "--seed", "0",
                         "--out", str(out)]) == 0

        doc = json.loads((out / "summary.json").read_text())
        expected_runs = {
            f"{stem}_{h}y"
            for stem in ("equal", "defensive", "growth")
            for h in (10, 20, 30)
        }
        assert set(doc["runs"]) == expected_runs
        for block in doc["runs"].values():
            for key in ("mean", "median", "ci_low", "ci_high", "var5", "cvar5"):
                assert key in block

        def ci_width(stem, h):
            block = doc["runs"][f"{stem}_{h}y"]
            return block["ci_high"] - block["ci_low"]

        assert ci_width("defensive", 10) < ci_width("growth", 10)
