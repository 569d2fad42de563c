import numpy as np
import pytest

from regimefolio.agents import (
    Policy,
    TrainConfig,
    TrainError,
    ablation_env_config,
    cem_train,
    equal_weight_policy,
    fit_regime_value_baseline,
    obs_features,
    policy_act,
    reinforce_train,
    sharpe_optimal_static,
    utility_path_penalty,
)
from regimefolio.dataio import ReturnPanel
from regimefolio.env import EnvConfig, Observation, env_new
from regimefolio.regimes import RegimePosterior
from regimefolio.rng import child_stream


def make_obs(r=(0.1, -0.05), rho=(0.7, 0.3)):
    return Observation(returns=np.asarray(r, dtype=float),
                       regime_probs=np.asarray(rho, dtype=float))


def dominance_panel(T=60, seed=0):
    """Asset 0 clearly dominates asset 1 in every period."""
    rng = np.random.default_rng(seed)
    returns = np.column_stack([
        rng.uniform(0.02, 0.03, size=T),
        rng.uniform(-0.03, -0.02, size=T),
    ])
    panel = ReturnPanel(
        years=list(range(1950, 1950 + T)),
        asset_names=["good", "bad"],
        returns=returns,
    )
    probs = rng.dirichlet(np.ones(2), size=T)
    post = RegimePosterior(probs=probs, labels=np.argmax(probs, axis=1), loglik=0.0)
    return panel, post


def dominance_env_factory(T=60, seed=0):
    panel, post = dominance_panel(T, seed)
    cfg = EnvConfig(no_clip=True, no_cost=True, no_reset=True, no_shock=True)
    return lambda: env_new(cfg, panel, post)


class TestPolicyAct:
    def test_feature_layout(self):
        phi = obs_features(make_obs())
        np.testing.assert_array_equal(phi, [0.1, -0.05, 0.7, 0.3, 1.0])

    def test_zero_theta_uniform(self):
        pol = equal_weight_policy(2, 2)
        w = policy_act(pol, make_obs(), deterministic=True)
        np.testing.assert_allclose(w, [0.5, 0.5])

    def test_bias_column_hand_value(self):
        theta = np.zeros((2, 5))
        theta[0, -1] = 1.0  # logits (1, 0) -> softmax = sigmoid(1)
        pol = Policy(theta=theta)
        w = policy_act(pol, make_obs(), deterministic=True)
        assert w[0] == pytest.approx(1 / (1 + np.exp(-1.0)), abs=1e-12)
        assert w.sum() == pytest.approx(1.0)

    def test_simplex_for_random_policies(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            pol = Policy(theta=rng.normal(0, 5, size=(3, 6)))
            obs = make_obs(r=(0.1, -0.05, 0.02))
            w = policy_act(pol, obs, rng=rng)
            assert w.sum() == pytest.approx(1.0, abs=1e-12)
            assert np.all(w >= 0)

    def test_stochastic_requires_rng(self):
        with pytest.raises(TrainError):
            policy_act(equal_weight_policy(2, 2), make_obs())

    def test_dimension_mismatch(self):
        with pytest.raises(TrainError):
            policy_act(equal_weight_policy(3, 2), make_obs(), deterministic=True)

    def test_same_seed_same_noise(self):
        pol = Policy(theta=np.ones((2, 5)))
        w1 = policy_act(pol, make_obs(), rng=child_stream(7, "t"))
        w2 = policy_act(pol, make_obs(), rng=child_stream(7, "t"))
        np.testing.assert_array_equal(w1, w2)


class TestSharpeOptimalStatic:
    def test_dominant_asset_wins(self):
        panel, _ = dominance_panel()
        w = sharpe_optimal_static(panel, n_candidates=500)
        assert w[0] > 0.99

    def test_returns_simplex(self):
        rng = np.random.default_rng(3)
        panel = ReturnPanel(
            years=list(range(2000, 2030)),
            asset_names=["a", "b", "c"],
            returns=rng.uniform(-0.1, 0.15, size=(30, 3)),
        )
        w = sharpe_optimal_static(panel, n_candidates=200)
        assert w.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(w >= -1e-12)


class TestUtilityPathPenalty:
    def test_empty_and_single(self):
        assert utility_path_penalty([], 0.99, 0.05) == 0.0
        assert utility_path_penalty([1.0], 0.99, 0.05) == 0.0

    def test_monotone_improving_path_unpenalized(self):
        assert utility_path_penalty([0.0, 0.0, 1.0], 1.0, 0.0) == 0.0

    def test_hand_value(self):
        # delta=1: U = [-0.05, 0.0]; drop of U is -(-0.05) = 0.05 over slack 0.02.
        assert utility_path_penalty([-0.05, 0.0], 1.0, 0.02) == pytest.approx(0.03)

    def test_discounting_hand_value(self):
        # rewards [1, 0], delta=0.5: U = [1.0, 0.0]; dU = 1.0 >= 0, no penalty.
        assert utility_path_penalty([1.0, 0.0], 0.5, 0.0) == 0.0
        # rewards [-1, 0.5], delta=0.5: U = [-0.75, 0.5]; -dU = 1.25.
        assert utility_path_penalty([-1.0, 0.5], 0.5, 0.1) == pytest.approx(1.15)

    def test_slack_absorbs_small_declines(self):
        rewards = [-0.01, 0.0, -0.01, 0.0]
        assert utility_path_penalty(rewards, 1.0, 1.0) == 0.0

    def test_nonnegative_property(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            rewards = rng.normal(size=int(rng.integers(0, 20)))
            delta = float(rng.uniform(0.1, 1.0))
            eta = float(rng.uniform(0, 0.5))
            assert utility_path_penalty(rewards, delta, eta) >= 0.0

    def test_invalid_params(self):
        with pytest.raises(TrainError):
            utility_path_penalty([0.0], 0.0, 0.1)
        with pytest.raises(TrainError):
            utility_path_penalty([0.0], 0.9, -0.1)


class TestValueBaseline:
    def test_exact_linear_target_recovered(self):
        rng = np.random.default_rng(5)
        true_heads = rng.normal(size=(2, 4))
        samples = []
        for _ in range(200):
            phi = rng.normal(size=4)
            rho = rng.dirichlet(np.ones(2))
            G = float(rho @ (true_heads @ phi))
            samples.append((phi, G, rho))
        baseline = fit_regime_value_baseline(samples)
        for phi, G, rho in samples[:20]:
            assert baseline.predict(phi, rho) == pytest.approx(G, abs=1e-4)

    def test_constant_target_one_regime(self):
        samples = [(np.array([1.0]), 3.0, np.array([1.0]))] * 10
        baseline = fit_regime_value_baseline(samples)
        assert baseline.predict(np.array([1.0]), np.array([1.0])) == pytest.approx(
            3.0, abs=1e-4
        )

    def test_empty_rejected(self):
        with pytest.raises(TrainError):
            fit_regime_value_baseline([])


class TestReinforce:
    def test_zero_lr_keeps_equal_weight(self):
        factory = dominance_env_factory()
        cfg = TrainConfig(total_steps=500, learning_rate=0.0, batch_episodes=2, seed=0)
        policy = reinforce_train(factory, cfg)
        np.testing.assert_array_equal(policy.theta, np.zeros_like(policy.theta))

    def test_same_seed_determinism(self):
        factory = dominance_env_factory()
        cfg = TrainConfig(total_steps=2000, learning_rate=0.05, batch_episodes=4, seed=3)
        p1 = reinforce_train(factory, cfg)
        p2 = reinforce_train(factory, cfg)
        np.testing.assert_array_equal(p1.theta, p2.theta)

    def test_progress_csv_written(self, tmp_path):
        factory = dominance_env_factory()
        cfg = TrainConfig(total_steps=1000, learning_rate=0.05, batch_episodes=2, seed=0)
        path = tmp_path / "progress.csv"
        reinforce_train(factory, cfg, progress_path=path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "iteration,mean_return,penalty,parameter_norm"
        assert len(lines) >= 2

    def test_learns_dominant_asset(self):
        factory = dominance_env_factory()
        cfg = TrainConfig(total_steps=40_000, learning_rate=0.2, batch_episodes=8, seed=0)
        policy = reinforce_train(factory, cfg)
        env = factory()
        obs = env.reset()
        weights = []
        done = False
        while not done:
            w = policy_act(policy, obs, deterministic=True)
            weights.append(w[0])
            obs, _, done, _ = env.step(w)
        assert float(np.mean(weights)) >= 0.90


class TestCem:
    def test_zero_iters_returns_zero_policy(self):
        factory = dominance_env_factory()
        cfg = TrainConfig(total_steps=100, seed=0)
        policy = cem_train(factory, cfg, population=4, n_iters=0)
        np.testing.assert_array_equal(policy.theta, np.zeros_like(policy.theta))

    def test_same_seed_determinism(self):
        factory = dominance_env_factory()
        cfg = TrainConfig(seed=5)
        p1 = cem_train(factory, cfg, population=8, n_iters=2)
        p2 = cem_train(factory, cfg, population=8, n_iters=2)
        np.testing.assert_array_equal(p1.theta, p2.theta)

    def test_elite_frac_one_accepted(self):
        factory = dominance_env_factory()
        cfg = TrainConfig(seed=0)
        policy = cem_train(factory, cfg, population=6, elite_frac=1.0, n_iters=2)
        assert policy.theta.shape == (2, 5)

    def test_learns_dominant_asset(self):
        factory = dominance_env_factory()
        cfg = TrainConfig(seed=0)
        policy = cem_train(factory, cfg, population=24, n_iters=8, init_std=2.0)
        env = factory()
        obs = env.reset()
        weights = []
        done = False
        while not done:
            w = policy_act(policy, obs, deterministic=True)
            weights.append(w[0])
            obs, _, done, _ = env.step(w)
        assert float(np.mean(weights)) >= 0.90


class TestPolicyJson:
    def test_roundtrip(self):
        pol = Policy(theta=np.arange(10.0).reshape(2, 5), sigma=0.4)
        back = Policy.from_json(pol.to_json())
        np.testing.assert_array_equal(back.theta, pol.theta)
        assert back.sigma == pol.sigma

    def test_bad_schema_rejected(self):
        with pytest.raises(TrainError):
            Policy.from_json('{"schema_version": 99, "theta": [[0]], "sigma": 0.3}')


class TestAblations:
    def test_variant_flags(self):
        base = EnvConfig()
        assert ablation_env_config(base, "baseline") is base
        assert ablation_env_config(base, "noclip").no_clip
        assert ablation_env_config(base, "nocost").no_cost
        assert ablation_env_config(base, "noreset").no_reset

    def test_unknown_variant(self):
        with pytest.raises(TrainError):
            ablation_env_config(EnvConfig(), "nofun")
