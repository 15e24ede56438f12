"""Diagonal-covariance Gaussian mixtures fit by EM, plus slide-level pooling.

The mixture is fit on training-set tile embeddings only; every tile then gets
a posterior over the k components, and a slide's feature vector is the
arithmetic mean of its tiles' posteriors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

VARIANCE_FLOOR = 1e-6


@dataclass
class GmmModel:
    weights: np.ndarray     # (k,), sums to 1
    means: np.ndarray       # (k, d)
    variances: np.ndarray   # (k, d), >= VARIANCE_FLOOR
    log_likelihood_trace: list[float] = field(default_factory=list)
    n_iter: int = 0

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class SlideFeature:
    slide_id: int
    v: np.ndarray  # (k,), mean of tile posteriors, on the simplex

    def __post_init__(self):
        if np.any(self.v < -1e-12) or abs(float(self.v.sum()) - 1.0) > 1e-9:
            raise ValueError(f"slide {self.slide_id}: pooled posterior is not on the simplex")


def _log_densities(x: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """(n, k) matrix of log N(x_i; mu_z, diag sigma2_z)."""
    # -(1/2) sum_d [log(2 pi s2) + (x - mu)^2 / s2]
    const = -0.5 * np.log(2.0 * np.pi * variances).sum(axis=1)  # (k,)
    diff = x[:, None, :] - means[None, :, :]                    # (n, k, d)
    quad = -0.5 * (diff * diff / variances[None, :, :]).sum(axis=2)
    return const[None, :] + quad


def _log_joint(model_or_parts, x: np.ndarray) -> np.ndarray:
    weights, means, variances = model_or_parts
    return np.log(weights)[None, :] + _log_densities(x, means, variances)


def log_likelihood(model: GmmModel, x: np.ndarray) -> float:
    lj = _log_joint((model.weights, model.means, model.variances), np.atleast_2d(x))
    return float(logsumexp(lj, axis=1).sum())


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> GmmModel:
    """k-means++ seeding followed by one hard-assignment M-step."""
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:  # all remaining points coincide with a center
            centers.append(x[rng.integers(n)])
            continue
        centers.append(x[rng.choice(n, p=d2 / total)])
        d2 = np.minimum(d2, ((x - centers[-1]) ** 2).sum(axis=1))
    centers = np.stack(centers)

    assign = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2).argmin(axis=1)
    global_var = np.maximum(x.var(axis=0), VARIANCE_FLOOR)
    weights = np.empty(k)
    means = np.empty((k, x.shape[1]))
    variances = np.empty((k, x.shape[1]))
    for z in range(k):
        members = x[assign == z]
        if members.shape[0] == 0:
            weights[z] = 1.0 / n
            means[z] = centers[z]
            variances[z] = global_var
        else:
            weights[z] = members.shape[0] / n
            means[z] = members.mean(axis=0)
            variances[z] = np.maximum(members.var(axis=0), VARIANCE_FLOOR)
    weights /= weights.sum()
    return GmmModel(weights, means, variances)


def fit_gmm(embeddings: np.ndarray, k: int, tolerance: float = 1e-6,
            max_iter: int = 200, seed: int = 0) -> GmmModel:
    """EM until the relative log-likelihood improvement drops below `tolerance`
    or `max_iter` iterations, whichever comes first."""
    x = np.asarray(embeddings, dtype=float)
    if x.ndim != 2:
        raise ValueError("embeddings must be a 2-D array")
    if not np.all(np.isfinite(x)):
        raise ValueError("embeddings must be finite")
    n = x.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the {n} available samples")

    rng = np.random.default_rng(seed)
    model = _kmeanspp_init(x, k, rng)
    model.log_likelihood_trace.append(log_likelihood(model, x))

    for it in range(1, max_iter + 1):
        # E-step
        lj = _log_joint((model.weights, model.means, model.variances), x)
        resp = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))

        # M-step
        counts = resp.sum(axis=0)  # (k,)
        collapsed = counts < 1e-10
        if np.any(collapsed):
            warnings.warn(f"{int(collapsed.sum())} mixture component(s) collapsed; "
                          f"resetting their variance to the floor")
        safe = np.maximum(counts, 1e-10)
        new_means = (resp.T @ x) / safe[:, None]
        sq = (resp.T @ (x * x)) / safe[:, None]
        new_vars = np.maximum(sq - new_means * new_means, VARIANCE_FLOOR)
        model.means[~collapsed] = new_means[~collapsed]
        model.variances[~collapsed] = new_vars[~collapsed]
        model.variances[collapsed] = VARIANCE_FLOOR
        model.weights = safe / safe.sum()

        ll = log_likelihood(model, x)
        prev = model.log_likelihood_trace[-1]
        model.log_likelihood_trace.append(ll)
        model.n_iter = it
        denom = abs(prev) if prev != 0.0 else 1.0
        if (ll - prev) / denom < tolerance:
            break
    return model


def posterior(model: GmmModel, embedding: np.ndarray) -> np.ndarray:
    """p(z | x) for one embedding (k,) or a batch (n, k); log-domain softmax."""
    single = np.asarray(embedding).ndim == 1
    x = np.atleast_2d(np.asarray(embedding, dtype=float))
    if x.shape[1] != model.dim:
        raise ValueError(f"embedding dim {x.shape[1]} does not match model dim {model.dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("embedding must be finite")
    lj = _log_joint((model.weights, model.means, model.variances), x)
    post = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    return post[0] if single else post


def pool_slide(model: GmmModel, slide_id: int, embeddings: np.ndarray) -> SlideFeature:
    """Average the per-tile posteriors of one slide into its feature vector."""
    x = np.atleast_2d(np.asarray(embeddings, dtype=float))
    if x.shape[0] == 0:
        raise ValueError(f"slide {slide_id} has no tiles to pool")
    return SlideFeature(slide_id, posterior(model, x).mean(axis=0))


def slide_features(model: GmmModel, embeddings: np.ndarray, slide_ids) -> list[SlideFeature]:
    """Pool every slide present in `slide_ids`, sorted by slide id."""
    slide_ids = np.asarray(slide_ids)
    return [pool_slide(model, int(s), embeddings[slide_ids == s])
            for s in np.unique(slide_ids)]


# --- text model file and slide-feature CSV -------------------------------

def save_gmm(model: GmmModel, path) -> None:
    """One line per component: weight, then the mean, then the variances."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"tilesurv-gmm 1 {model.n_components} {model.dim}\n")
        for z in range(model.n_components):
            fh.write(format(model.weights[z], ".17g") + "\n")
            fh.write(" ".join(format(v, ".17g") for v in model.means[z]) + "\n")
            fh.write(" ".join(format(v, ".17g") for v in model.variances[z]) + "\n")


def load_gmm(path) -> GmmModel:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    magic, version, k_s, d_s = lines[0].split()
    if (magic, version) != ("tilesurv-gmm", "1"):
        raise ValueError(f"{path}: not a GMM model file")
    k, d = int(k_s), int(d_s)
    weights = np.empty(k)
    means = np.empty((k, d))
    variances = np.empty((k, d))
    for z in range(k):
        weights[z] = float(lines[1 + 3 * z])
        means[z] = np.array(lines[2 + 3 * z].split(), dtype=float)
        variances[z] = np.array(lines[3 + 3 * z].split(), dtype=float)
    return GmmModel(weights, means, variances)


def save_slide_features(features: list[SlideFeature], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        k = features[0].v.shape[0] if features else 0
        fh.write("slide_id," + ",".join(f"v{z}" for z in range(k)) + "\n")
        for f in features:
            fh.write(f"{f.slide_id}," + ",".join(format(x, ".9g") for x in f.v) + "\n")
