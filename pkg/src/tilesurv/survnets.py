"""Network survival models: discrete-time hazards, network Cox, attention MIL.

Every model here is a small tanh MLP trained full-batch by gradient ascent
with backtracking line search; gradients are analytic and finite-difference
checkable. The discrete-time model emits one conditional survival probability
per interval; the network Cox model reuses the Breslow partial likelihood
from :mod:`tilesurv.survival`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import mlp
from .survival import (StepFunction, SurvivalRecord, as_arrays, partial_loglik,
                       partial_loglik_score_gradient)


@dataclass(frozen=True)
class NetConfig:
    hidden_dims: tuple[int, ...] = ()
    l2: float = 0.1            # penalty (l2/2)*||W||^2 on weights, biases free
    max_iter: int = 500
    grad_tol: float = 1e-6
    seed: int = 0


def _weight_penalty_and_grad(params: mlp.MlpParams, l2: float):
    penalty = 0.5 * l2 * sum(float((w * w).sum()) for w in params.weights)
    grads = mlp.MlpParams([l2 * w for w in params.weights],
                          [np.zeros_like(b) for b in params.biases])
    return penalty, grads


def _maximize(value_fn, value_grad_fn, x0: np.ndarray, max_iter: int,
              grad_tol: float) -> np.ndarray:
    """Gradient ascent with backtracking line search on a flat parameter vector."""
    x = x0
    f = value_fn(x)
    g = value_grad_fn(x)
    for _ in range(max_iter):
        gnorm = float(np.linalg.norm(g))
        if gnorm < grad_tol:
            break
        step = 1.0 / max(1.0, gnorm)
        accepted = False
        while step > 1e-14:
            candidate = x + step * g
            f_new = value_fn(candidate)
            if f_new > f + 1e-4 * step * (g @ g):
                accepted = True
                break
            step /= 2.0
        if not accepted:
            break
        x = candidate
        f = f_new
        g = value_grad_fn(x)
    return x


# ---------------------------------------------------------------------------
# Discrete-time hazard model ("one conditional survival output per interval").
# ---------------------------------------------------------------------------

@dataclass
class DiscreteHazardModel:
    boundaries: np.ndarray   # (T+1,), strictly increasing, boundaries[0] >= 0
    params: mlp.MlpParams    # final layer width T

    @property
    def n_intervals(self) -> int:
        return self.boundaries.size - 1

    def conditional_survival(self, x: np.ndarray) -> np.ndarray:
        """(n, T) matrix of p(t > t_{i+1} | t > t_i, x), each in (0, 1)."""
        z, _ = mlp.forward(self.params, np.atleast_2d(x))
        return expit(z)


def six_month_grid(times) -> np.ndarray:
    """Unit-width interval boundaries 0..max_time+1 covering all observed times."""
    return np.arange(0.0, float(np.max(times)) + 2.0)


def _check_boundaries(boundaries: np.ndarray) -> np.ndarray:
    boundaries = np.asarray(boundaries, dtype=float)
    if boundaries.size < 2 or np.any(np.diff(boundaries) <= 0) or boundaries[0] < 0:
        raise ValueError("boundaries must be >= 0 and strictly increasing, length >= 2")
    return boundaries


def _interval_masks(boundaries: np.ndarray, times: np.ndarray, events: np.ndarray):
    """(survived mask, event one-hot) over intervals, clamping beyond-range times."""
    n_int = boundaries.size - 1
    if np.any(times < boundaries[0]):
        raise ValueError("observed time precedes the first interval boundary")
    completed = np.searchsorted(boundaries[1:], times, side="right")
    event_idx = np.searchsorted(boundaries, times, side="right") - 1
    beyond = times >= boundaries[-1]
    if np.any(beyond & events):
        warnings.warn("event time beyond the last boundary; clamped to the final interval")
        event_idx = np.where(beyond, n_int - 1, event_idx)
        completed = np.where(beyond & events, n_int - 1, completed)

    cols = np.arange(n_int)
    survived = cols[None, :] < completed[:, None]
    event_onehot = np.zeros((times.size, n_int))
    event_onehot[events, event_idx[events]] = 1.0
    return survived, event_onehot


def nnsurv_loglik_from_logits(z: np.ndarray, survived: np.ndarray,
                              event_onehot: np.ndarray):
    """Censored discrete-time log-likelihood and its gradient w.r.t. the logits.

    log L_i = sum_{completed l} log s_il + event_i * log(1 - s_ij), s = sigmoid(z).
    """
    log_s = -np.logaddexp(0.0, -z)        # log sigmoid, stable
    log_1ms = -z + log_s                  # log(1 - sigmoid)
    ll = float((survived * log_s).sum() + (event_onehot * log_1ms).sum())
    s = expit(z)
    grad_z = survived * (1.0 - s) - event_onehot * s
    return ll, grad_z


def _nnsurv_objective(dims, boundaries, x, survived, event_onehot, l2):
    def value(vec: np.ndarray) -> float:
        params = mlp.MlpParams.from_vector(dims, vec)
        z, _ = mlp.forward(params, x)
        ll, _ = nnsurv_loglik_from_logits(z, survived, event_onehot)
        penalty, _ = _weight_penalty_and_grad(params, l2)
        return ll - penalty

    def grad(vec: np.ndarray) -> np.ndarray:
        params = mlp.MlpParams.from_vector(dims, vec)
        z, caches = mlp.forward(params, x)
        _, grad_z = nnsurv_loglik_from_logits(z, survived, event_onehot)
        grads, _ = mlp.backward(params, caches, grad_z)
        _, pen_grads = _weight_penalty_and_grad(params, l2)
        return mlp.add_scaled(grads, pen_grads, -1.0).to_vector()

    return value, grad


def nnsurv_fit(records: list[SurvivalRecord], boundaries,
               config: NetConfig = NetConfig()) -> DiscreteHazardModel:
    boundaries = _check_boundaries(boundaries)
    x, times, events = as_arrays(records)
    if not np.any(events):
        raise ValueError("discrete-time fit needs at least one event")
    survived, event_onehot = _interval_masks(boundaries, times, events)
    dims = (x.shape[1], *config.hidden_dims, boundaries.size - 1)
    params0 = mlp.init_params(dims, np.random.default_rng(config.seed))
    value, grad = _nnsurv_objective(dims, boundaries, x, survived, event_onehot, config.l2)
    best = _maximize(value, grad, params0.to_vector(), config.max_iter, config.grad_tol)
    return DiscreteHazardModel(boundaries, mlp.MlpParams.from_vector(dims, best))


def nnsurv_survival(model: DiscreteHazardModel, v: np.ndarray, t: float):
    """S(t | v): product of conditional survivals over intervals completed by t."""
    single = np.asarray(v).ndim == 1
    s = model.conditional_survival(np.atleast_2d(v))
    if t > model.boundaries[-1]:
        warnings.warn(f"t={t} beyond the last boundary; clamped")
    completed = int(np.searchsorted(model.boundaries[1:], t, side="right"))
    out = s[:, :completed].prod(axis=1)
    return float(out[0]) if single else out


def nnsurv_risk(model: DiscreteHazardModel, v: np.ndarray):
    """Scalar risk for ranking: negative area under the discrete survival curve."""
    s = model.conditional_survival(np.atleast_2d(v))
    curve = np.cumprod(s, axis=1)
    out = -curve.sum(axis=1)
    return float(out[0]) if np.asarray(v).ndim == 1 else out


# ---------------------------------------------------------------------------
# Network Cox model (continuous time, Breslow baseline).
# ---------------------------------------------------------------------------

@dataclass
class DeepSurvModel:
    params: mlp.MlpParams   # final layer width 1
    alpha: float
    baseline: StepFunction


def breslow_from_scores(times, events, scores) -> StepFunction:
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    w = np.exp(np.asarray(scores, dtype=float))
    event_times = np.unique(times[events])
    jumps = np.empty(event_times.size)
    for i, t in enumerate(event_times):
        jumps[i] = np.sum(events & (times == t)) / w[times >= t].sum()
    return StepFunction(event_times, np.cumsum(jumps), start_value=0.0)


def deepsurv_objective(dims, x, times, events, alpha):
    def value(vec: np.ndarray) -> float:
        params = mlp.MlpParams.from_vector(dims, vec)
        scores, _ = mlp.forward(params, x)
        penalty, _ = _weight_penalty_and_grad(params, alpha)
        return partial_loglik(times, events, scores[:, 0]) - penalty

    def grad(vec: np.ndarray) -> np.ndarray:
        params = mlp.MlpParams.from_vector(dims, vec)
        scores, caches = mlp.forward(params, x)
        g_scores = partial_loglik_score_gradient(times, events, scores[:, 0])
        grads, _ = mlp.backward(params, caches, g_scores[:, None])
        _, pen_grads = _weight_penalty_and_grad(params, alpha)
        return mlp.add_scaled(grads, pen_grads, -1.0).to_vector()

    return value, grad


def deepsurv_fit(records: list[SurvivalRecord],
                 config: NetConfig = NetConfig()) -> DeepSurvModel:
    """MLP hazard score trained on the penalized Breslow partial likelihood."""
    x, times, events = as_arrays(records)
    if not np.any(events):
        raise ValueError("network Cox fit needs at least one event")
    dims = (x.shape[1], *config.hidden_dims, 1)
    params0 = mlp.init_params(dims, np.random.default_rng(config.seed))
    value, grad = deepsurv_objective(dims, x, times, events, config.l2)
    best_vec = _maximize(value, grad, params0.to_vector(), config.max_iter, config.grad_tol)
    params = mlp.MlpParams.from_vector(dims, best_vec)
    scores, _ = mlp.forward(params, x)
    return DeepSurvModel(params=params, alpha=config.l2,
                         baseline=breslow_from_scores(times, events, scores[:, 0]))


def deepsurv_score(model: DeepSurvModel, v: np.ndarray):
    single = np.asarray(v).ndim == 1
    out, _ = mlp.forward(model.params, np.atleast_2d(v))
    return float(out[0, 0]) if single else out[:, 0]


def deepsurv_risk(model: DeepSurvModel, v: np.ndarray):
    return np.exp(deepsurv_score(model, v))


def deepsurv_survival(model: DeepSurvModel, v: np.ndarray, t):
    return np.exp(-model.baseline(t) * deepsurv_risk(model, v))


# ---------------------------------------------------------------------------
# Attention pooling over a slide's tile embeddings (gated by tanh, Ilse-style).
# ---------------------------------------------------------------------------

@dataclass
class MilAttentionParams:
    v: np.ndarray  # (attn_dim, embed_dim)
    w: np.ndarray  # (attn_dim,)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.v.ravel(), self.w])

    @classmethod
    def from_vector(cls, attn_dim: int, embed_dim: int, vec: np.ndarray):
        split = attn_dim * embed_dim
        return cls(vec[:split].reshape(attn_dim, embed_dim).copy(), vec[split:].copy())


def init_attention(attn_dim: int, embed_dim: int,
                   rng: np.random.Generator) -> MilAttentionParams:
    return MilAttentionParams(rng.normal(0.0, 1.0 / np.sqrt(embed_dim),
                                         size=(attn_dim, embed_dim)),
                              rng.normal(0.0, 1.0 / np.sqrt(attn_dim), size=attn_dim))


def mil_attention_pool(embeddings: np.ndarray, params: MilAttentionParams):
    """Softmax-attention-weighted sum of instance embeddings.

    Returns (bag representation, attention weights); weights sum to 1.
    """
    embeddings = np.atleast_2d(embeddings)
    if embeddings.shape[0] == 0:
        raise ValueError("cannot pool an empty bag")
    h = np.tanh(embeddings @ params.v.T)
    u = h @ params.w
    a = np.exp(u - u.max())
    a /= a.sum()
    return a @ embeddings, a


def _attention_backward(embeddings, params, a, grad_rep):
    h = np.tanh(embeddings @ params.v.T)
    grad_a = embeddings @ grad_rep
    gu = a * (grad_a - float(a @ grad_a))
    grad_w = h.T @ gu
    grad_v = ((gu[:, None] * (1.0 - h * h)) * params.w[None, :]).T @ embeddings
    return grad_v, grad_w


@dataclass
class MilSurvModel:
    attention: MilAttentionParams
    head_kind: str                       # "deepsurv" | "nnsurv"
    head: mlp.MlpParams
    baseline: StepFunction | None = None       # deepsurv head
    boundaries: np.ndarray | None = None       # nnsurv head


def mil_fit(bags: list[np.ndarray], times, events, head_kind: str,
            config: NetConfig = NetConfig(), attn_dim: int = 16,
            boundaries=None) -> MilSurvModel:
    """Jointly train attention pooling and a survival head on bag-level outcomes."""
    if head_kind not in ("deepsurv", "nnsurv"):
        raise ValueError(f"unknown MIL head {head_kind!r}")
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    if len(bags) != times.size:
        raise ValueError("one bag per outcome required")
    if not np.any(events):
        raise ValueError("MIL fit needs at least one event")
    embed_dim = bags[0].shape[1]
    if head_kind == "nnsurv":
        boundaries = _check_boundaries(boundaries if boundaries is not None
                                       else six_month_grid(times))
        survived, event_onehot = _interval_masks(boundaries, times, events)
        out_dim = boundaries.size - 1
    else:
        out_dim = 1
    head_dims = (embed_dim, *config.hidden_dims, out_dim)

    rng = np.random.default_rng(config.seed)
    attn0 = init_attention(attn_dim, embed_dim, rng)
    head0 = mlp.init_params(head_dims, rng)
    n_attn = attn0.to_vector().size

    def unpack(vec):
        return (MilAttentionParams.from_vector(attn_dim, embed_dim, vec[:n_attn]),
                mlp.MlpParams.from_vector(head_dims, vec[n_attn:]))

    def pooled(attn):
        return np.stack([mil_attention_pool(bag, attn)[0] for bag in bags])

    def value(vec: np.ndarray) -> float:
        attn, head = unpack(vec)
        reps = pooled(attn)
        z, _ = mlp.forward(head, reps)
        if head_kind == "deepsurv":
            ll = partial_loglik(times, events, z[:, 0])
        else:
            ll, _ = nnsurv_loglik_from_logits(z, survived, event_onehot)
        penalty, _ = _weight_penalty_and_grad(head, config.l2)
        penalty += 0.5 * config.l2 * (float((attn.v ** 2).sum()) + float((attn.w ** 2).sum()))
        return ll - penalty

    def grad(vec: np.ndarray) -> np.ndarray:
        attn, head = unpack(vec)
        pools = [mil_attention_pool(bag, attn) for bag in bags]
        reps = np.stack([rep for rep, _ in pools])
        z, caches = mlp.forward(head, reps)
        if head_kind == "deepsurv":
            grad_z = partial_loglik_score_gradient(times, events, z[:, 0])[:, None]
        else:
            _, grad_z = nnsurv_loglik_from_logits(z, survived, event_onehot)
        head_grads, grad_reps = mlp.backward(head, caches, grad_z)
        gv = np.zeros_like(attn.v)
        gw = np.zeros_like(attn.w)
        for bag, (_, a), g_rep in zip(bags, pools, grad_reps):
            dv, dw = _attention_backward(bag, attn, a, g_rep)
            gv += dv
            gw += dw
        _, pen_grads = _weight_penalty_and_grad(head, config.l2)
        head_vec = mlp.add_scaled(head_grads, pen_grads, -1.0).to_vector()
        attn_vec = np.concatenate([(gv - config.l2 * attn.v).ravel(),
                                   gw - config.l2 * attn.w])
        return np.concatenate([attn_vec, head_vec])

    x0 = np.concatenate([attn0.to_vector(), head0.to_vector()])
    best = _maximize(value, grad, x0, config.max_iter, config.grad_tol)
    attn, head = unpack(best)

    model = MilSurvModel(attention=attn, head_kind=head_kind, head=head)
    if head_kind == "deepsurv":
        reps = pooled(attn)
        z, _ = mlp.forward(head, reps)
        model.baseline = breslow_from_scores(times, events, z[:, 0])
    else:
        model.boundaries = boundaries
    return model


def mil_pooled_reps(model: MilSurvModel, bags: list[np.ndarray]) -> np.ndarray:
    return np.stack([mil_attention_pool(bag, model.attention)[0] for bag in bags])


def mil_risk(model: MilSurvModel, bags: list[np.ndarray]) -> np.ndarray:
    reps = mil_pooled_reps(model, bags)
    if model.head_kind == "deepsurv":
        z, _ = mlp.forward(model.head, reps)
        return np.exp(z[:, 0])
    return nnsurv_risk(DiscreteHazardModel(model.boundaries, model.head), reps)


def mil_survival(model: MilSurvModel, bags: list[np.ndarray], t: float) -> np.ndarray:
    reps = mil_pooled_reps(model, bags)
    if model.head_kind == "deepsurv":
        z, _ = mlp.forward(model.head, reps)
        return np.exp(-model.baseline(t) * np.exp(z[:, 0]))
    return nnsurv_survival(DiscreteHazardModel(model.boundaries, model.head), reps, t)
