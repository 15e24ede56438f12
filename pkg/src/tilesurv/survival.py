"""Classical survival estimators: Kaplan-Meier and L2-penalized Cox regression.

Times are non-negative integers (6-month units). Ties are handled with the
Breslow convention throughout, both in the partial likelihood and in the
baseline cumulative hazard, so the fitted coefficients and the baseline are
mutually consistent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SurvivalRecord:
    """(covariates, event, time) for one unit, usually a patient."""

    unit_id: int
    covariates: np.ndarray
    event: bool
    time: int

    def __post_init__(self):
        if self.time < 0:
            raise ValueError(f"unit {self.unit_id}: negative time")
        if not np.all(np.isfinite(self.covariates)):
            raise ValueError(f"unit {self.unit_id}: non-finite covariates")


def as_arrays(records: list[SurvivalRecord]):
    x = np.stack([r.covariates for r in records])
    times = np.array([r.time for r in records], dtype=float)
    events = np.array([r.event for r in records], dtype=bool)
    return x, times, events


@dataclass
class StepFunction:
    """Right-continuous step function, zero before the first step time."""

    times: np.ndarray   # strictly increasing step locations
    values: np.ndarray  # value from times[i] (inclusive) to times[i+1] (exclusive)
    start_value: float = 0.0

    def _eval(self, t, side: str):
        if self.times.size == 0:
            return self.start_value if np.isscalar(t) else np.full(np.shape(t), self.start_value)
        idx = np.searchsorted(self.times, t, side=side) - 1
        vals = np.where(idx >= 0, self.values[np.maximum(idx, 0)], self.start_value)
        return float(vals) if np.isscalar(t) else vals

    def __call__(self, t) -> float | np.ndarray:
        return self._eval(t, "right")

    def left_limit(self, t) -> float | np.ndarray:
        """Value just before t."""
        return self._eval(t, "left")


@dataclass
class KmCurve:
    """Product-limit estimate with at-risk/event counts per distinct time."""

    step: StepFunction          # S(t), starts at 1
    times: np.ndarray           # distinct observed times (events or censorings)
    at_risk: np.ndarray
    events: np.ndarray

    def survival(self, t):
        return self.step(t)

    def survival_left(self, t):
        return self.step.left_limit(t)


def km_from_arrays(times: np.ndarray, events: np.ndarray) -> KmCurve:
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    if times.size == 0:
        raise ValueError("Kaplan-Meier needs at least one record")
    if np.any(times < 0):
        raise ValueError("negative times")

    distinct = np.unique(times)
    at_risk = np.empty(distinct.size)
    d = np.empty(distinct.size)
    for i, t in enumerate(distinct):
        at_risk[i] = np.sum(times >= t)
        d[i] = np.sum(events & (times == t))
    factors = 1.0 - d / at_risk
    surv = np.cumprod(factors)
    # S only steps where events occur; keep all distinct times in the counts
    step_mask = d > 0
    step = StepFunction(distinct[step_mask], surv[step_mask], start_value=1.0)
    return KmCurve(step=step, times=distinct, at_risk=at_risk, events=d)


def km_fit(records: list[SurvivalRecord]) -> KmCurve:
    """Kaplan-Meier estimate; censored units leave the risk set after their time."""
    _, times, events = as_arrays(records)
    return km_from_arrays(times, events)


# ---------------------------------------------------------------------------
# Cox proportional hazards, Breslow ties, L2 penalty (alpha/2)*||beta||^2.
# ---------------------------------------------------------------------------

@dataclass
class CoxModel:
    beta: np.ndarray
    alpha: float
    baseline: StepFunction      # cumulative hazard, zero before the first event
    n_iter: int
    final_grad_norm: float
    trace: list[float] = field(default_factory=list)  # penalized pll per iteration


def partial_loglik(times, events, scores) -> float:
    """Breslow partial log-likelihood as a function of per-unit linear scores."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    scores = np.asarray(scores, dtype=float)
    shift = scores.max()  # guard exp overflow; pll is reported unshifted
    w = np.exp(scores - shift)
    pll = float(scores[events].sum())
    for t in np.unique(times)[::-1]:
        d = int(np.sum(events & (times == t)))
        if d:
            s0 = w[times >= t].sum()
            pll -= d * (np.log(s0) + shift)
    return pll


def partial_loglik_score_gradient(times, events, scores) -> np.ndarray:
    """d pll / d score_j = event_j - exp(score_j) * Lambda0(T_j) (Breslow identity)."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    scores = np.asarray(scores, dtype=float)
    shift = scores.max()
    w = np.exp(scores - shift)
    cumhaz = np.zeros_like(scores)
    running = 0.0
    for t in np.unique(times):  # ascending; Lambda0 accumulates over event times <= T_j
        d = int(np.sum(events & (times == t)))
        if d:
            running += d / w[times >= t].sum()
        cumhaz[times == t] = running
    return events.astype(float) - w * cumhaz


def _cox_quantities(x, times, events, beta, alpha, with_hessian: bool):
    """Penalized pll, gradient, and (optionally) Hessian at beta."""
    p = x.shape[1]
    eta = x @ beta
    shift = eta.max()
    w = np.exp(eta - shift)
    wx = w[:, None] * x

    pll = float(eta[events].sum())
    grad = x[events].sum(axis=0).astype(float)
    hess = np.zeros((p, p)) if with_hessian else None

    s0, s1 = 0.0, np.zeros(p)
    s2 = np.zeros((p, p)) if with_hessian else None
    for t in np.unique(times)[::-1]:  # descending: risk sets grow as t falls
        block = times == t
        s0 += w[block].sum()
        s1 += wx[block].sum(axis=0)
        if with_hessian:
            s2 += x[block].T @ wx[block]
        d = int(np.sum(events & block))
        if d:
            pll -= d * (np.log(s0) + shift)
            xbar = s1 / s0
            grad -= d * xbar
            if with_hessian:
                hess -= d * (s2 / s0 - np.outer(xbar, xbar))
    pll -= 0.5 * alpha * float(beta @ beta)
    grad -= alpha * beta
    if with_hessian:
        hess -= alpha * np.eye(p)
    return pll, grad, hess


def cox_fit(records: list[SurvivalRecord], alpha: float = 0.1,
            max_iter: int = 100, grad_tol: float = 1e-8) -> CoxModel:
    """Newton iterations with step halving on the penalized partial likelihood."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    x, times, events = as_arrays(records)
    if x.shape[1] < 1:
        raise ValueError("need at least one covariate")
    if not np.any(events):
        raise ValueError("Cox regression needs at least one event")

    beta = np.zeros(x.shape[1])
    pll, grad, hess = _cox_quantities(x, times, events, beta, alpha, True)
    trace = [pll]
    grad_norm = float(np.linalg.norm(grad))
    n_iter = 0
    while grad_norm >= grad_tol:
        if n_iter >= max_iter:
            raise RuntimeError(
                f"Cox fit did not converge in {max_iter} Newton iterations; "
                f"gradient norm {grad_norm:.3e}, penalized pll trace {trace}")
        try:
            delta = np.linalg.solve(-hess, grad)
            if grad @ delta <= 0:  # not an ascent direction (numerical noise)
                delta = grad
        except np.linalg.LinAlgError:
            delta = grad
        noise = 1e-10 * (1.0 + abs(pll))  # objective changes below this are float noise
        step = 1.0
        while step > 1e-12:
            candidate = beta + step * delta
            new_pll, _, _ = _cox_quantities(x, times, events, candidate, alpha, False)
            if new_pll >= pll - noise:
                break
            step /= 2.0
        else:
            raise RuntimeError(
                f"Cox step halving stalled at iteration {n_iter}; gradient norm "
                f"{grad_norm:.3e}, penalized pll trace {trace}")
        beta = beta + step * delta
        pll, grad, hess = _cox_quantities(x, times, events, beta, alpha, True)
        trace.append(pll)
        grad_norm = float(np.linalg.norm(grad))
        n_iter += 1

    baseline = breslow_baseline(records, beta)
    return CoxModel(beta=beta, alpha=alpha, baseline=baseline,
                    n_iter=n_iter, final_grad_norm=grad_norm, trace=trace)


def breslow_baseline(records: list[SurvivalRecord], beta: np.ndarray) -> StepFunction:
    """Cumulative baseline hazard: jumps d_e / sum_{at risk} exp(beta.x) at event times."""
    x, times, events = as_arrays(records)
    if not np.any(events):
        raise ValueError("Breslow baseline needs at least one event")
    w = np.exp(x @ np.asarray(beta, dtype=float))
    event_times = np.unique(times[events])
    jumps = np.empty(event_times.size)
    for i, t in enumerate(event_times):
        risk = w[times >= t].sum()
        assert risk > 0, "empty risk set at an event time"
        jumps[i] = np.sum(events & (times == t)) / risk
    return StepFunction(event_times, np.cumsum(jumps), start_value=0.0)


def cox_predict_risk(model: CoxModel, v: np.ndarray):
    """exp(beta . v); accepts a single vector or a batch."""
    v = np.asarray(v, dtype=float)
    return np.exp(v @ model.beta)


def cox_predict_survival(model: CoxModel, v: np.ndarray, t):
    """S(t | v) = exp(-Lambda0(t) * exp(beta . v))."""
    return np.exp(-model.baseline(t) * cox_predict_risk(model, v))


def hazard_ratios(model: CoxModel) -> list[tuple[int, float]]:
    """(covariate index, exp(beta_i)) sorted by decreasing ratio; >1 means
    the covariate is positively associated with the event."""
    ratios = np.exp(model.beta)
    order = np.argsort(-ratios, kind="stable")
    return [(int(i), float(ratios[i])) for i in order]


def save_cox_model(model: CoxModel, path) -> None:
    """Text layout: alpha line, beta line, baseline step times and values."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("tilesurv-cox 1\n")
        fh.write(format(model.alpha, ".17g") + "\n")
        fh.write(" ".join(format(b, ".17g") for b in model.beta) + "\n")
        fh.write(" ".join(format(t, ".17g") for t in model.baseline.times) + "\n")
        fh.write(" ".join(format(v, ".17g") for v in model.baseline.values) + "\n")


def load_cox_model(path) -> CoxModel:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if lines[0] != "tilesurv-cox 1":
        raise ValueError(f"{path}: not a Cox model file")
    alpha = float(lines[1])
    beta = np.array(lines[2].split(), dtype=float)
    times = np.array(lines[3].split(), dtype=float)
    values = np.array(lines[4].split(), dtype=float)
    baseline = StepFunction(times, values, start_value=0.0)
    return CoxModel(beta=beta, alpha=alpha, baseline=baseline,
                    n_iter=0, final_grad_norm=float("nan"))
