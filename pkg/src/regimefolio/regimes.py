"""Latent market-regime models: KMeans, diagonal-Gaussian mixture, and
diagonal-Gaussian HMM, fitted on standardized features.

All three expose the same posterior interface: per-step regime probabilities
and argmax labels (ties broken by lowest index). Features are standardized
with training-set statistics stored in the model, so posteriors at inference
reuse the fit-time scaling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataio import FeatureMatrix

VARIANCE_FLOOR = 1e-6
SCHEMA_VERSION = 1


class RegimeFitError(ValueError):
    """Invalid input to a regime fit or inference call."""


@dataclass(frozen=True)
class RegimeModel:
    kind: str  # kmeans | gmm | hmm
    K: int
    means: np.ndarray  # (K, F), standardized units
    feature_names: list[str]
    scaler_mean: np.ndarray  # (F,)
    scaler_std: np.ndarray  # (F,)
    variances: np.ndarray | None = None  # (K, F) diagonal, gmm/hmm
    mixing_weights: np.ndarray | None = None  # (K,), gmm
    transition: np.ndarray | None = None  # (K, K), hmm
    initial_dist: np.ndarray | None = None  # (K,), hmm

    def __post_init__(self):
        if self.kind not in ("kmeans", "gmm", "hmm"):
            raise RegimeFitError(f"unknown model kind {self.kind!r}")
        if self.K < 1:
            raise RegimeFitError("K must be >= 1")
        if self.variances is not None and np.any(self.variances <= 0):
            raise RegimeFitError("non-positive variance")
        for name, vec in (("mixing_weights", self.mixing_weights),
                          ("initial_dist", self.initial_dist)):
            if vec is not None and abs(float(np.sum(vec)) - 1.0) > 1e-9:
                raise RegimeFitError(f"{name} must sum to 1")
        if self.transition is not None:
            rowsums = np.sum(self.transition, axis=1)
            if np.any(np.abs(rowsums - 1.0) > 1e-9):
                raise RegimeFitError("transition rows must sum to 1")

    def standardize(self, X: FeatureMatrix) -> np.ndarray:
        if X.n_features != len(self.feature_names):
            raise RegimeFitError(
                f"feature dimension {X.n_features} != model dimension {len(self.feature_names)}"
            )
        return (X.values - self.scaler_mean) / self.scaler_std

    def to_json(self) -> str:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "K": self.K,
            "feature_names": self.feature_names,
            "means": self.means.tolist(),
            "scaler_mean": self.scaler_mean.tolist(),
            "scaler_std": self.scaler_std.tolist(),
        }
        for key in ("variances", "mixing_weights", "transition", "initial_dist"):
            val = getattr(self, key)
            doc[key] = None if val is None else val.tolist()
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RegimeModel":
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise RegimeFitError(f"unsupported schema_version {doc.get('schema_version')}")

        def arr(key):
            val = doc.get(key)
            return None if val is None else np.asarray(val, dtype=float)

        return cls(
            kind=doc["kind"],
            K=int(doc["K"]),
            means=np.asarray(doc["means"], dtype=float),
            feature_names=list(doc["feature_names"]),
            scaler_mean=np.asarray(doc["scaler_mean"], dtype=float),
            scaler_std=np.asarray(doc["scaler_std"], dtype=float),
            variances=arr("variances"),
            mixing_weights=arr("mixing_weights"),
            transition=arr("transition"),
            initial_dist=arr("initial_dist"),
        )


@dataclass(frozen=True)
class RegimePosterior:
    probs: np.ndarray  # (T, K)
    labels: np.ndarray  # (T,), argmax with lowest-index tie break
    loglik: float

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=int))
        if np.any(probs < -1e-12) or np.any(probs > 1 + 1e-12):
            raise RegimeFitError("posterior entries outside [0, 1]")
        if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-8):
            raise RegimeFitError("posterior rows must sum to 1")

    @property
    def K(self) -> int:
        return self.probs.shape[1]

    def to_csv(self, path, years: list[int]) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["year"] + [f"rho_{k}" for k in range(self.K)] + ["label"])
            for year, row, label in zip(years, self.probs, self.labels):
                writer.writerow([year] + [repr(float(v)) for v in row] + [int(label)])


def _standardizer(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return mean, std


def _kmeans_pp_init(Z: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = Z.shape[0]
    centers = [Z[rng.integers(n)]]
    for _ in range(1, K):
        d2 = np.min(
            np.stack([np.sum((Z - c) ** 2, axis=1) for c in centers]), axis=0
        )
        total = d2.sum()
        if total <= 0:
            centers.append(Z[rng.integers(n)])
            continue
        probs = d2 / total
        centers.append(Z[rng.choice(n, p=probs)])
    return np.stack(centers)


def _lloyd(Z: np.ndarray, K: int, rng: np.random.Generator, max_iter: int):
    centers = _kmeans_pp_init(Z, K, rng)
    labels = np.zeros(Z.shape[0], dtype=int)
    for _ in range(max_iter):
        dists = np.sum((Z[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(dists, axis=1)
        for k in range(K):
            mask = new_labels == k
            if mask.any():
                centers[k] = Z[mask].mean(axis=0)
            else:
                # Re-seed empty clusters at the farthest point.
                centers[k] = Z[np.argmax(np.min(dists, axis=1))]
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return centers, labels


def _check_fit_inputs(X: FeatureMatrix, K: int, max_iter: int):
    if X.n_rows == 0:
        raise RegimeFitError("empty feature matrix")
    if K < 1:
        raise RegimeFitError("K must be >= 1")
    if K > X.n_rows:
        raise RegimeFitError(f"K={K} exceeds number of rows {X.n_rows}")
    if max_iter < 1:
        raise RegimeFitError("max_iter must be >= 1")


def kmeans_fit(X: FeatureMatrix, K: int, seed: int = 0, max_iter: int = 100) -> RegimeModel:
    """Lloyd's algorithm with kmeans++ seeding on standardized features."""
    _check_fit_inputs(X, K, max_iter)
    mean, std = _standardizer(X.values)
    Z = (X.values - mean) / std
    rng = np.random.default_rng(seed)
    centers, _ = _lloyd(Z, K, rng, max_iter)
    return RegimeModel(
        kind="kmeans", K=K, means=centers, feature_names=list(X.feature_names),
        scaler_mean=mean, scaler_std=std,
    )


def _log_gauss_diag(Z: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """Log density of each row of Z under each diagonal Gaussian: (T, K)."""
    T, F = Z.shape
    out = np.empty((T, means.shape[0]))
    for k in range(means.shape[0]):
        var = variances[k]
        out[:, k] = -0.5 * (
            np.sum(np.log(2 * np.pi * var))
            + np.sum((Z - means[k]) ** 2 / var, axis=1)
        )
    return out


def _init_from_kmeans(Z: np.ndarray, K: int, seed: int, max_iter: int):
    rng = np.random.default_rng(seed)
    centers, labels = _lloyd(Z, K, rng, max_iter)
    variances = np.empty_like(centers)
    weights = np.empty(K)
    for k in range(K):
        mask = labels == k
        weights[k] = max(mask.sum(), 1) / Z.shape[0]
        if mask.sum() >= 2:
            variances[k] = np.maximum(Z[mask].var(axis=0), VARIANCE_FLOOR)
        else:
            variances[k] = np.ones(Z.shape[1])
    weights = weights / weights.sum()
    return centers, variances, weights


def gmm_fit(
    X: FeatureMatrix,
    K: int,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-8,
    loglik_history: list | None = None,
) -> RegimeModel:
    """EM for a diagonal-covariance Gaussian mixture, kmeans-initialized.

    The log-likelihood is non-decreasing each iteration (within 1e-9);
    variances are floored rather than allowed to collapse. Pass a list as
    `loglik_history` to collect the per-iteration trace.
    """
    _check_fit_inputs(X, K, max_iter)
    if tol <= 0:
        raise RegimeFitError("tol must be > 0")
    if K > len({tuple(row) for row in X.values}):
        raise RegimeFitError("K exceeds number of distinct points")
    mean, std = _standardizer(X.values)
    Z = (X.values - mean) / std
    means, variances, weights = _init_from_kmeans(Z, K, seed, max_iter)

    prev_ll = -np.inf
    for _ in range(max_iter):
        log_resp = _log_gauss_diag(Z, means, variances) + np.log(weights)
        norm = _logsumexp(log_resp, axis=1)
        ll = float(norm.sum())
        if loglik_history is not None:
            loglik_history.append(ll)
        resp = np.exp(log_resp - norm[:, None])

        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-300)
        weights = nk / nk.sum()
        means = (resp.T @ Z) / nk[:, None]
        for k in range(K):
            diff2 = (Z - means[k]) ** 2
            variances[k] = np.maximum((resp[:, k] @ diff2) / nk[k], VARIANCE_FLOOR)

        if ll - prev_ll < tol and np.isfinite(prev_ll):
            prev_ll = ll
            break
        prev_ll = ll

    return RegimeModel(
        kind="gmm", K=K, means=means, feature_names=list(X.feature_names),
        scaler_mean=mean, scaler_std=std, variances=variances,
        mixing_weights=weights,
    )


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    amax = np.max(a, axis=axis, keepdims=True)
    out = amax + np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _forward_backward(log_emit, log_A, log_pi):
    """Scaled forward-backward in log space.

    Returns (log_alpha, log_beta, loglik) for emission log-densities (T, K).
    """
    T, K = log_emit.shape
    log_alpha = np.empty((T, K))
    log_alpha[0] = log_pi + log_emit[0]
    for t in range(1, T):
        log_alpha[t] = log_emit[t] + _logsumexp(
            log_alpha[t - 1][:, None] + log_A, axis=0
        )
    loglik = float(_logsumexp(log_alpha[-1], axis=0))

    log_beta = np.zeros((T, K))
    for t in range(T - 2, -1, -1):
        log_beta[t] = _logsumexp(
            log_A + (log_emit[t + 1] + log_beta[t + 1])[None, :], axis=1
        )
    return log_alpha, log_beta, loglik


def hmm_forward_loglik(model: RegimeModel, X: FeatureMatrix) -> float:
    """Sequence log-likelihood under the fitted HMM (forward pass)."""
    if model.kind != "hmm":
        raise RegimeFitError("forward likelihood requires an hmm model")
    Z = model.standardize(X)
    log_emit = _log_gauss_diag(Z, model.means, model.variances)
    _, _, loglik = _forward_backward(
        log_emit, np.log(model.transition), np.log(model.initial_dist)
    )
    return loglik


def hmm_fit(
    X: FeatureMatrix,
    K: int,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-8,
    loglik_history: list | None = None,
) -> RegimeModel:
    """Baum-Welch with diagonal-Gaussian emissions.

    Emissions initialize from kmeans; the transition matrix starts uniform
    with 0.5 added to the diagonal (renormalized) to bias toward persistent
    regimes. Log-likelihood is non-decreasing within 1e-9 per iteration.
    """
    _check_fit_inputs(X, K, max_iter)
    if tol <= 0:
        raise RegimeFitError("tol must be > 0")
    if K > len({tuple(row) for row in X.values}):
        raise RegimeFitError("K exceeds number of distinct points")
    mean, std = _standardizer(X.values)
    Z = (X.values - mean) / std
    T = Z.shape[0]
    means, variances, _ = _init_from_kmeans(Z, K, seed, max_iter)
    A = np.full((K, K), 1.0 / K) + 0.5 * np.eye(K)
    A /= A.sum(axis=1, keepdims=True)
    pi = np.full(K, 1.0 / K)

    prev_ll = -np.inf
    for _ in range(max_iter):
        log_emit = _log_gauss_diag(Z, means, variances)
        log_A = np.log(A)
        log_alpha, log_beta, ll = _forward_backward(log_emit, log_A, np.log(pi))
        if loglik_history is not None:
            loglik_history.append(ll)

        log_gamma = log_alpha + log_beta
        log_gamma -= _logsumexp(log_gamma, axis=1)[:, None]
        gamma = np.exp(log_gamma)

        # Expected transition counts xi, summed over t.
        xi_sum = np.zeros((K, K))
        for t in range(T - 1):
            log_xi = (
                log_alpha[t][:, None]
                + log_A
                + (log_emit[t + 1] + log_beta[t + 1])[None, :]
            )
            log_xi -= _logsumexp(log_xi.ravel(), axis=0)
            xi_sum += np.exp(log_xi)

        pi = gamma[0] / gamma[0].sum()
        if T > 1:
            denom = np.maximum(gamma[:-1].sum(axis=0), 1e-300)
            A = xi_sum / denom[:, None]
            A = np.maximum(A, 1e-300)
            A /= A.sum(axis=1, keepdims=True)
        nk = np.maximum(gamma.sum(axis=0), 1e-300)
        means = (gamma.T @ Z) / nk[:, None]
        for k in range(K):
            diff2 = (Z - means[k]) ** 2
            variances[k] = np.maximum((gamma[:, k] @ diff2) / nk[k], VARIANCE_FLOOR)

        if ll - prev_ll < tol and np.isfinite(prev_ll):
            prev_ll = ll
            break
        prev_ll = ll

    return RegimeModel(
        kind="hmm", K=K, means=means, feature_names=list(X.feature_names),
        scaler_mean=mean, scaler_std=std, variances=variances,
        transition=A, initial_dist=pi,
    )


def _argmax_lowest(probs: np.ndarray) -> np.ndarray:
    return np.argmax(probs, axis=1)  # np.argmax already takes the lowest index on ties


def posterior(model: RegimeModel, X: FeatureMatrix) -> RegimePosterior:
    """Per-step regime probabilities under a fitted model.

    kmeans: one-hot nearest-center rows. gmm: normalized responsibilities.
    hmm: smoothed forward-backward marginals.
    """
    Z = model.standardize(X)
    if model.kind == "kmeans":
        dists = np.sum((Z[:, None, :] - model.means[None, :, :]) ** 2, axis=2)
        labels = np.argmin(dists, axis=1)
        probs = np.zeros((Z.shape[0], model.K))
        probs[np.arange(Z.shape[0]), labels] = 1.0
        wcss = float(np.sum(np.min(dists, axis=1)))
        return RegimePosterior(probs=probs, labels=labels, loglik=-wcss)

    log_emit = _log_gauss_diag(Z, model.means, model.variances)
    if model.kind == "gmm":
        log_resp = log_emit + np.log(model.mixing_weights)
        norm = _logsumexp(log_resp, axis=1)
        probs = np.exp(log_resp - norm[:, None])
        probs /= probs.sum(axis=1, keepdims=True)
        return RegimePosterior(
            probs=probs, labels=_argmax_lowest(probs), loglik=float(norm.sum())
        )

    log_alpha, log_beta, loglik = _forward_backward(
        log_emit, np.log(model.transition), np.log(model.initial_dist)
    )
    log_gamma = log_alpha + log_beta
    log_gamma -= _logsumexp(log_gamma, axis=1)[:, None]
    probs = np.exp(log_gamma)
    probs /= probs.sum(axis=1, keepdims=True)
    return RegimePosterior(probs=probs, labels=_argmax_lowest(probs), loglik=loglik)


def viterbi(model: RegimeModel, X: FeatureMatrix) -> np.ndarray:
    """Most likely state path, log-space recursion, lowest-index tie break."""
    if model.kind != "hmm":
        raise RegimeFitError("viterbi requires an hmm model")
    Z = model.standardize(X)
    log_emit = _log_gauss_diag(Z, model.means, model.variances)
    log_A = np.log(model.transition)
    T, K = log_emit.shape

    delta = np.log(model.initial_dist) + log_emit[0]
    back = np.zeros((T, K), dtype=int)
    for t in range(1, T):
        scores = delta[:, None] + log_A
        back[t] = np.argmax(scores, axis=0)
        delta = scores[back[t], np.arange(K)] + log_emit[t]

    path = np.empty(T, dtype=int)
    path[-1] = int(np.argmax(delta))
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


@dataclass(frozen=True)
class CrisisAlignment:
    """Per-regime crisis occupancy and detector precision/recall."""

    per_regime: list[dict]
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {"schema_version": SCHEMA_VERSION, "per_regime": self.per_regime,
             "warnings": self.warnings},
            indent=2, sort_keys=True,
        )


def crisis_alignment(
    labels: np.ndarray, years: list[int], crisis_years: list[int]
) -> CrisisAlignment:
    """Score each regime as a crisis detector against known crisis years."""
    labels = np.asarray(labels, dtype=int)
    if len(labels) != len(years):
        raise RegimeFitError("labels and years must align")
    warnings = []
    year_set = set(years)
    kept = []
    for cy in crisis_years:
        if cy in year_set:
            kept.append(cy)
        else:
            warnings.append(f"crisis year {cy} outside panel range; skipped")
    crisis_mask = np.array([y in set(kept) for y in years], dtype=bool)

    n_crisis = int(crisis_mask.sum())
    n_calm = int((~crisis_mask).sum())
    report = []
    for k in sorted(set(labels.tolist())):
        in_k = labels == k
        tp = int((in_k & crisis_mask).sum())
        fp = int((in_k & ~crisis_mask).sum())
        report.append({
            "regime": int(k),
            "crisis_fraction": tp / n_crisis if n_crisis else 0.0,
            "noncrisis_fraction": fp / n_calm if n_calm else 0.0,
            "precision": tp / (tp + fp) if (tp + fp) else 0.0,
            "recall": tp / n_crisis if n_crisis else 0.0,
        })
    return CrisisAlignment(per_regime=report, warnings=warnings)
