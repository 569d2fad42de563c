"""Allocation policies and trainers.

The policy is a linear softmax map from [r_t, rho_t, 1] to asset logits,
explored with Gaussian noise in logit space so the score-function gradient
has a closed form. Two optimizers are provided as cross-checks on each
other: an analytic-gradient trainer with a regime-weighted linear value
baseline, and a derivative-free cross-entropy method.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dataio import ReturnPanel
from .env import EnvConfig, Observation, PortfolioEnv
from .metrics import BacktestReport, backtest, sharpe
from .rng import child_stream

SCHEMA_VERSION = 1


class TrainError(RuntimeError):
    """Training failure (divergence or invalid configuration)."""


@dataclass(frozen=True)
class Policy:
    theta: np.ndarray  # (N, N + K + 1)
    sigma: float = 0.3  # exploration std in logit space

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        object.__setattr__(self, "theta", theta)
        if not np.all(np.isfinite(theta)):
            raise TrainError("non-finite policy parameters")
        if self.sigma <= 0:
            raise TrainError("sigma must be > 0")

    @property
    def n_assets(self) -> int:
        return self.theta.shape[0]

    def to_json(self) -> str:
        return json.dumps({
            "schema_version": SCHEMA_VERSION,
            "theta": self.theta.tolist(),
            "sigma": self.sigma,
            "feature_layout": "[returns, regime_probs, 1]",
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Policy":
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise TrainError(f"unsupported schema_version {doc.get('schema_version')}")
        return cls(theta=np.asarray(doc["theta"], dtype=float), sigma=float(doc["sigma"]))


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 250_000
    learning_rate: float = 1e-4
    gamma: float = 0.99
    batch_episodes: int = 8
    delta: float = 0.99  # utility discount
    eta: float = 0.05  # monotonicity slack
    penalty_weight: float = 0.1
    seed: int = 0
    sigma: float = 0.3

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise TrainError("gamma must lie in (0, 1]")
        if self.learning_rate < 0:
            raise TrainError("learning_rate must be >= 0")
        if not 0 < self.delta <= 1:
            raise TrainError("delta must lie in (0, 1]")
        if self.eta < 0:
            raise TrainError("eta must be >= 0")


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def obs_features(obs: Observation) -> np.ndarray:
    """Policy/value feature vector [r_t, rho_t, 1]."""
    return np.concatenate([obs.returns, obs.regime_probs, [1.0]])


def policy_act(
    policy: Policy,
    obs: Observation,
    rng: np.random.Generator | None = None,
    deterministic: bool = False,
) -> np.ndarray:
    """Softmax weights from linear logits, optionally noise-perturbed."""
    phi = obs_features(obs)
    if phi.shape[0] != policy.theta.shape[1]:
        raise TrainError(
            f"observation dimension {phi.shape[0]} != policy dimension {policy.theta.shape[1]}"
        )
    logits = policy.theta @ phi
    if not deterministic:
        if rng is None:
            raise TrainError("stochastic policy_act requires an rng")
        logits = logits + policy.sigma * rng.standard_normal(logits.shape)
    return _softmax(logits)


def equal_weight_policy(n_assets: int, n_regimes: int, sigma: float = 0.3) -> Policy:
    """Zero parameters: softmax gives uniform weights."""
    return Policy(theta=np.zeros((n_assets, n_assets + n_regimes + 1)), sigma=sigma)


def sharpe_optimal_static(
    panel: ReturnPanel, n_candidates: int = 2000, seed: int = 0
) -> np.ndarray:
    """Best in-sample Sharpe among Dirichlet draws, vertices, equal weight."""
    N = panel.n_assets
    rng = child_stream(seed, "agents.sharpe_opt")
    candidates = [np.full(N, 1.0 / N)]
    candidates += [np.eye(N)[i] for i in range(N)]
    if n_candidates > 0:
        candidates += list(rng.dirichlet(np.ones(N), size=n_candidates))
    best_w, best_s = None, -np.inf
    for w in candidates:
        series = panel.returns @ w
        try:
            s = sharpe(series)
        except Exception:
            continue
        if s > best_s:
            best_w, best_s = w, s
    if best_w is None:
        return np.full(N, 1.0 / N)
    return np.asarray(best_w, dtype=float)


def utility_path_penalty(rewards, delta: float, eta: float) -> float:
    """Hinge penalty on declines of discounted forward utility.

    U_t = sum_{tau>=t} delta^(tau-t) R_tau; each drop of U from t to t+1
    beyond the slack eta contributes to the penalty.
    """
    rewards = np.asarray(rewards, dtype=float)
    if not 0 < delta <= 1:
        raise TrainError("delta must lie in (0, 1]")
    if eta < 0:
        raise TrainError("eta must be >= 0")
    T = rewards.size
    if T == 0:
        return 0.0
    U = np.empty(T)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        acc = rewards[t] + delta * acc
        U[t] = acc
    penalty = 0.0
    for t in range(T - 1):
        dU = U[t] - U[t + 1]
        penalty += max(0.0, -dU - eta)
    return penalty


@dataclass(frozen=True)
class RegimeValueBaseline:
    """K linear value heads over [r, rho, 1], mixed by the regime posterior."""

    heads: np.ndarray  # (K, D)

    def predict(self, phi: np.ndarray, rho: np.ndarray) -> float:
        return float(rho @ (self.heads @ phi))


def fit_regime_value_baseline(samples) -> RegimeValueBaseline:
    """Ridge least squares of returns-to-go on rho-weighted head features.

    `samples` is a list of (phi, G, rho) tuples; the design row stacks
    rho_k * phi blocks so the prediction is sum_k rho_k * v_k(phi).
    """
    if not samples:
        raise TrainError("need at least one sample")
    phi0, _, rho0 = samples[0]
    D, K = len(phi0), len(rho0)
    X = np.empty((len(samples), K * D))
    y = np.empty(len(samples))
    for i, (phi, G, rho) in enumerate(samples):
        X[i] = np.outer(np.asarray(rho), np.asarray(phi)).ravel()
        y[i] = G
    A = X.T @ X + 1e-6 * np.eye(K * D)
    heads = np.linalg.solve(A, X.T @ y).reshape(K, D)
    return RegimeValueBaseline(heads=heads)


def _rollout(env: PortfolioEnv, policy: Policy, rng: np.random.Generator):
    """One stochastic episode; returns per-step records and reward list."""
    obs = env.reset()
    records = []
    rewards = []
    done = False
    while not done:
        phi = obs_features(obs)
        mean_logits = policy.theta @ phi
        noise = policy.sigma * rng.standard_normal(mean_logits.shape)
        action = _softmax(mean_logits + noise)
        rho = obs.regime_probs.copy()
        obs, reward, done, _ = env.step(action)
        records.append((phi, noise, rho))
        rewards.append(reward)
    return records, rewards


def _discounted_returns(rewards, gamma: float) -> np.ndarray:
    G = np.empty(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        G[t] = acc
    return G


def reinforce_train(env_factory, cfg: TrainConfig, progress_path=None) -> Policy:
    """Score-function policy gradient with a regime-weighted value baseline.

    The gradient of log-density of the Gaussian logit noise is
    (noise / sigma^2) outer phi. The utility-path penalty enters through the
    score-function trick at episode level. Deterministic for a fixed seed.
    """
    env = env_factory()
    policy = equal_weight_policy(env.n_assets, env.n_regimes, sigma=cfg.sigma)
    steps_per_episode = env.episode_length
    n_iters = max(1, cfg.total_steps // max(1, steps_per_episode * cfg.batch_episodes))
    baseline: RegimeValueBaseline | None = None
    progress_rows = []

    episode_counter = 0
    for it in range(n_iters):
        batch = []
        for _ in range(cfg.batch_episodes):
            rng = child_stream(cfg.seed, "agents.reinforce.episode", episode_counter)
            episode_counter += 1
            records, rewards = _rollout(env, policy, rng)
            G = _discounted_returns(rewards, cfg.gamma)
            penalty = utility_path_penalty(rewards, cfg.delta, cfg.eta)
            batch.append((records, rewards, G, penalty))

        samples = [
            (phi, g, rho)
            for records, _, G, _ in batch
            for (phi, _, rho), g in zip(records, G)
        ]
        baseline = fit_regime_value_baseline(samples)

        advantages = np.concatenate([
            np.array([
                g - baseline.predict(phi, rho)
                for (phi, _, rho), g in zip(records, G)
            ])
            for records, _, G, _ in batch
        ])
        adv_mean, adv_std = advantages.mean(), advantages.std()
        advantages = (advantages - adv_mean) / (adv_std + 1e-8)

        grad = np.zeros_like(policy.theta)
        i = 0
        for records, _, G, penalty in batch:
            for (phi, noise, rho) in records:
                score = np.outer(noise / (policy.sigma ** 2), phi)
                grad += score * (advantages[i] - cfg.penalty_weight * penalty)
                i += 1
        grad /= len(batch)

        new_theta = policy.theta + cfg.learning_rate * grad
        norm = float(np.linalg.norm(new_theta))
        if norm > 1e6:
            raise TrainError(f"parameter norm diverged ({norm:.3e}) at iteration {it}")
        policy = replace(policy, theta=new_theta)

        mean_return = float(np.mean([sum(rw) for _, rw, _, _ in batch]))
        mean_penalty = float(np.mean([p for _, _, _, p in batch]))
        progress_rows.append((it, mean_return, mean_penalty, norm))

    if progress_path is not None:
        import csv

        with open(progress_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "mean_return", "penalty", "parameter_norm"])
            for row in progress_rows:
                writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])
    return policy


def cem_train(
    env_factory,
    cfg: TrainConfig,
    population: int = 32,
    elite_frac: float = 0.25,
    n_iters: int | None = None,
    init_std: float = 1.0,
) -> Policy:
    """Cross-entropy method over flattened policy parameters.

    Samples candidate thetas from a diagonal Gaussian, keeps the top
    elite_frac by mean episode reward, and refits the sampler. Returns the
    best policy observed.
    """
    env = env_factory()
    D = env.n_assets * (env.n_assets + env.n_regimes + 1)
    shape = (env.n_assets, env.n_assets + env.n_regimes + 1)
    mean = np.zeros(D)
    std = np.full(D, init_std)
    if n_iters is None:
        n_iters = max(1, cfg.total_steps // max(1, env.episode_length * population))
    n_elite = max(1, int(round(population * elite_frac)))

    def score(theta_flat) -> float:
        pol = Policy(theta=theta_flat.reshape(shape), sigma=cfg.sigma)
        obs = env.reset()
        total = 0.0
        done = False
        while not done:
            action = policy_act(pol, obs, deterministic=True)
            obs, reward, done, _ = env.step(action)
            total += reward
        return total

    best_theta, best_score = mean.copy(), score(mean)
    for it in range(n_iters):
        rng = child_stream(cfg.seed, "agents.cem.iter", it)
        pop = mean + std * rng.standard_normal((population, D))
        scores = np.array([score(candidate) for candidate in pop])
        elite_idx = np.argsort(-scores, kind="stable")[:n_elite]
        elites = pop[elite_idx]
        mean = elites.mean(axis=0)
        std = elites.std(axis=0) + 1e-3
        if scores[elite_idx[0]] > best_score:
            best_score = float(scores[elite_idx[0]])
            best_theta = pop[elite_idx[0]].copy()
        if float(np.linalg.norm(mean)) > 1e6:
            raise TrainError("CEM sampler mean diverged")
    if score(mean) > best_score:
        best_theta = mean
    return Policy(theta=best_theta.reshape(shape), sigma=cfg.sigma)


ABLATION_FLAGS = {
    "noclip": "no_clip",
    "nocost": "no_cost",
    "noreset": "no_reset",
}


def ablation_env_config(base: EnvConfig, variant: str) -> EnvConfig:
    if variant == "baseline":
        return base
    try:
        flag = ABLATION_FLAGS[variant]
    except KeyError:
        raise TrainError(f"unknown ablation variant {variant!r}") from None
    return replace(base, **{flag: True})


def run_ablations(
    make_env,
    cfg: TrainConfig,
    variants: list[str],
    seeds: list[int],
    trainer=reinforce_train,
) -> dict[str, dict[int, BacktestReport]]:
    """Train and backtest one agent per (variant, seed).

    `make_env` takes an EnvConfig-modifying variant name and returns a fresh
    environment. The baseline variant always runs first.
    """
    out: dict[str, dict[int, BacktestReport]] = {}
    for variant in ["baseline"] + [v for v in variants if v != "baseline"]:
        out[variant] = {}
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed)
            policy = trainer(lambda: make_env(variant), run_cfg)
            report = backtest(policy, make_env(variant))
            out[variant][seed] = report
    return out
