"""Censoring-aware evaluation metrics: concordance index and IPCW Brier score."""

from __future__ import annotations

import numpy as np

from .survival import SurvivalRecord, as_arrays, km_from_arrays


def c_index(records: list[SurvivalRecord], risks) -> float:
    """Concordance over all comparable pairs, exhaustively enumerated.

    A pair is comparable when the times differ and the unit with the earlier
    time had the event; it is concordant when that unit also has the higher
    predicted risk. Risk ties count 0.5.
    """
    _, times, events = as_arrays(records)
    risks = np.asarray(risks, dtype=float)
    if risks.shape[0] != times.shape[0]:
        raise ValueError("one risk per record required")

    earlier = (times[:, None] < times[None, :]) & events[:, None]
    concordant = risks[:, None] > risks[None, :]
    tied = risks[:, None] == risks[None, :]
    n_comparable = int(earlier.sum())
    if n_comparable == 0:
        raise ValueError("no comparable pairs (every earlier time is censored)")
    score = (earlier & concordant).sum() + 0.5 * (earlier & tied).sum()
    return float(score / n_comparable)


def censoring_km(records: list[SurvivalRecord]):
    """Kaplan-Meier estimate of the censoring distribution (reversed indicators)."""
    _, times, events = as_arrays(records)
    return km_from_arrays(times, ~events)


def brier_score(records: list[SurvivalRecord], predicted_survival, t: float) -> float:
    """Inverse-probability-of-censoring-weighted Brier score at horizon t.

    Units with an event at time T_i <= t contribute S_hat^2 / G(T_i-); units
    still at risk past t contribute (1 - S_hat)^2 / G(t); units censored at or
    before t contribute nothing. G is the Kaplan-Meier estimate of the
    censoring distribution. Raises if a needed weight has G = 0.
    """
    _, times, events = as_arrays(records)
    s_hat = np.asarray(predicted_survival, dtype=float)
    if s_hat.shape[0] != times.shape[0]:
        raise ValueError("one predicted survival probability per record required")
    if t < 0 or t > times.max():
        raise ValueError(f"horizon t={t} outside the observed time range")

    g = censoring_km(records).step
    total = 0.0
    for i in range(times.shape[0]):
        if events[i] and times[i] <= t:
            weight = g.left_limit(times[i])
            if weight <= 0.0:
                raise ValueError(f"censoring survival is 0 just before t={times[i]}; "
                                 f"IPCW weight undefined")
            total += (s_hat[i] ** 2) / weight
        elif times[i] > t:
            weight = g(t)
            if weight <= 0.0:
                raise ValueError(f"censoring survival is 0 at horizon t={t}; "
                                 f"IPCW weight undefined")
            total += ((1.0 - s_hat[i]) ** 2) / weight
    return float(total / times.shape[0])
