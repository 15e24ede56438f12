"""Synthetic cohorts with slide-level batch effects, plus embedding-file ingestion.

The generative model: every patient owns a mixture over K* latent tile clusters
(drawn from a symmetric Dirichlet), each tile draws its cluster from that
mixture, and the tile feature vector is

    features = cluster_mean + slide_offset + noise

where cluster means sit on the scaled unit basis vectors (so K* <= d), the
slide offset is a per-slide Normal(0, batch_effect_scale^2 I) draw shared by
all tiles in the slide, and the noise is i.i.d. Normal(0, noise_scale^2 I).
Recurrence times follow an exponential proportional-hazards model whose
log-hazard is the inner product of `true_hazard_coefficients` with the
patient's realized tile-cluster proportions; censoring is independent
Uniform(0, c_max) with c_max solved so the expected censored fraction matches
`censoring_rate`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq


@dataclass(eq=False)
class TileRecord:
    """One tile: feature vector plus tile/slide/patient identity."""

    tile_id: int
    slide_id: int
    patient_id: int
    features: np.ndarray
    true_cluster: int | None = None  # simulator-only ground truth


@dataclass(frozen=True)
class PatientOutcome:
    """Recurrence indicator and follow-up time in 6-month units."""

    patient_id: int
    event: bool
    time: int

    def __post_init__(self):
        if self.time < 0:
            raise ValueError(f"negative follow-up time for patient {self.patient_id}")


@dataclass(frozen=True)
class CohortConfig:
    n_patients: int = 60
    slides_per_patient: int = 1
    tiles_per_slide: int = 64
    feature_dim: int = 16
    n_true_clusters: int = 4
    batch_effect_scale: float = 1.0
    noise_scale: float = 0.1
    true_hazard_coefficients: tuple[float, ...] = (2.0, -2.0, 0.0, 0.0)
    censoring_rate: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 0:
            raise ValueError("n_patients must be >= 0")
        if self.n_patients > 0:
            if self.slides_per_patient <= 0 or self.tiles_per_slide <= 0:
                raise ValueError("slides_per_patient and tiles_per_slide must be positive")
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if self.n_true_clusters <= 0:
            raise ValueError("n_true_clusters must be positive")
        if self.n_true_clusters > self.feature_dim:
            raise ValueError(
                f"n_true_clusters={self.n_true_clusters} exceeds the "
                f"{self.feature_dim} clusters representable at feature_dim"
            )
        if not (math.isfinite(self.batch_effect_scale) and self.batch_effect_scale >= 0):
            raise ValueError("batch_effect_scale must be finite and >= 0")
        if not (math.isfinite(self.noise_scale) and self.noise_scale > 0):
            raise ValueError("noise_scale must be finite and > 0")
        if len(self.true_hazard_coefficients) != self.n_true_clusters:
            raise ValueError("true_hazard_coefficients must have length n_true_clusters")
        if not (0.0 <= self.censoring_rate < 1.0):
            raise ValueError("censoring_rate must be in [0, 1)")


@dataclass(frozen=True)
class SplitPlan:
    """Disjoint train/validation/test patient-id sets for one fold."""

    fold: int
    train: frozenset[int]
    validation: frozenset[int]
    test: frozenset[int]

    def __post_init__(self):
        if self.train & self.validation or self.train & self.test or self.validation & self.test:
            raise ValueError("split sets must be disjoint")

    @property
    def all_patients(self) -> frozenset[int]:
        return self.train | self.validation | self.test


def cluster_means(config: CohortConfig) -> np.ndarray:
    """Cluster centers: the first K* unit basis vectors of R^d (separation sqrt(2))."""
    means = np.zeros((config.n_true_clusters, config.feature_dim))
    means[np.arange(config.n_true_clusters), np.arange(config.n_true_clusters)] = 1.0
    return means


def _censor_horizon(rates: np.ndarray, censoring_rate: float) -> float:
    """Solve for c_max so that E[fraction censored] = censoring_rate.

    With T_i ~ Exp(rate_i) and C ~ Uniform(0, c_max) independent,
    P(C < T_i) = (1 - exp(-rate_i * c_max)) / (rate_i * c_max),
    which decreases monotonically from 1 (c_max -> 0) to 0 (c_max -> inf).
    """

    def expected_censored(c_max: float) -> float:
        x = rates * c_max
        return float(np.mean(-np.expm1(-x) / x))

    lo, hi = 1e-9, 1.0
    while expected_censored(hi) > censoring_rate:
        hi *= 2.0
        if hi > 1e12:
            break
    return brentq(lambda c: expected_censored(c) - censoring_rate, lo, hi, xtol=1e-10)


def generate_cohort(config: CohortConfig) -> tuple[list[TileRecord], list[PatientOutcome]]:
    """Draw a synthetic cohort; deterministic for a fixed config (incl. seed)."""
    if config.n_patients == 0:
        return [], []

    rng = np.random.default_rng(config.seed)
    means = cluster_means(config)
    k_star = config.n_true_clusters
    beta_star = np.asarray(config.true_hazard_coefficients, dtype=float)

    tiles: list[TileRecord] = []
    cluster_counts = np.zeros((config.n_patients, k_star))
    tile_id = 0
    slide_id = 0
    for patient_id in range(config.n_patients):
        mixture = rng.dirichlet(np.ones(k_star))
        for _ in range(config.slides_per_patient):
            offset = rng.normal(0.0, config.batch_effect_scale, size=config.feature_dim)
            clusters = rng.choice(k_star, size=config.tiles_per_slide, p=mixture)
            noise = rng.normal(0.0, config.noise_scale,
                               size=(config.tiles_per_slide, config.feature_dim))
            feats = means[clusters] + offset + noise
            for row, z in zip(feats, clusters):
                tiles.append(TileRecord(tile_id, slide_id, patient_id, row, int(z)))
                cluster_counts[patient_id, z] += 1
                tile_id += 1
            slide_id += 1

    proportions = cluster_counts / cluster_counts.sum(axis=1, keepdims=True)
    rates = np.exp(proportions @ beta_star)  # baseline hazard 1 per 6-month unit
    event_times = rng.exponential(1.0 / rates)

    if config.censoring_rate > 0.0:
        c_max = _censor_horizon(rates, config.censoring_rate)
        censor_times = rng.uniform(0.0, c_max, size=config.n_patients)
        observed = np.minimum(event_times, censor_times)
        events = event_times <= censor_times
    else:
        observed = event_times
        events = np.ones(config.n_patients, dtype=bool)

    outcomes = [
        PatientOutcome(pid, bool(events[pid]), int(math.floor(observed[pid])))
        for pid in range(config.n_patients)
    ]
    return tiles, outcomes


def split_by_patient(
    patient_ids,
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
    n_folds: int = 1,
) -> list[SplitPlan]:
    """Partition patients into train/validation/test, independently per fold.

    Each fold reshuffles the patient list with its own sub-seed and cuts it at
    the rounded fraction boundaries, so sizes match the fractions after
    rounding and the three sets always partition the cohort.
    """
    patient_ids = sorted(set(patient_ids))
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    if any(f < 0 for f in fractions):
        raise ValueError("fractions must be non-negative")
    if n_folds < 1:
        raise ValueError("n_folds must be >= 1")
    if len(patient_ids) < n_folds:
        raise ValueError(f"{len(patient_ids)} patients is fewer than {n_folds} folds")

    n = len(patient_ids)
    cut1 = round(fractions[0] * n)
    cut2 = round((fractions[0] + fractions[1]) * n)
    seeds = np.random.SeedSequence(seed).spawn(n_folds)
    plans = []
    for fold in range(n_folds):
        order = np.random.default_rng(seeds[fold]).permutation(n)
        shuffled = [patient_ids[i] for i in order]
        plans.append(SplitPlan(
            fold=fold,
            train=frozenset(shuffled[:cut1]),
            validation=frozenset(shuffled[cut1:cut2]),
            test=frozenset(shuffled[cut2:]),
        ))
    return plans


# ---------------------------------------------------------------------------
# Embedding / outcome CSV round trip.
#
# Embeddings: header ``tile_id,slide_id,patient_id,f0,...,f{d-1}``.
# Outcomes:   header ``patient_id,event,time_6mo``.
# UTF-8, '.' decimal separator, features written with 9 significant digits.
# ---------------------------------------------------------------------------

class EmbeddingParseError(ValueError):
    """Malformed embedding or outcome file; message carries the line number."""


def save_embeddings(tiles: list[TileRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        dim = len(tiles[0].features) if tiles else 0
        header = ["tile_id", "slide_id", "patient_id"] + [f"f{i}" for i in range(dim)]
        fh.write(",".join(header) + "\n")
        for t in tiles:
            feats = ",".join(format(x, ".9g") for x in t.features)
            fh.write(f"{t.tile_id},{t.slide_id},{t.patient_id},{feats}\n")


def save_outcomes(outcomes: list[PatientOutcome], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("patient_id,event,time_6mo\n")
        for o in outcomes:
            fh.write(f"{o.patient_id},{int(o.event)},{o.time}\n")


def load_outcomes(path) -> list[PatientOutcome]:
    outcomes = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header.split(",") != ["patient_id", "event", "time_6mo"]:
            raise EmbeddingParseError(f"{path}: line 1: unexpected outcomes header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise EmbeddingParseError(f"{path}: line {lineno}: expected 3 fields, got {len(parts)}")
            try:
                pid, event, time = int(parts[0]), int(parts[1]), int(parts[2])
            except ValueError as exc:
                raise EmbeddingParseError(f"{path}: line {lineno}: {exc}") from exc
            if event not in (0, 1):
                raise EmbeddingParseError(f"{path}: line {lineno}: event must be 0 or 1")
            if pid in seen:
                raise EmbeddingParseError(f"{path}: line {lineno}: duplicate patient_id {pid}")
            seen.add(pid)
            outcomes.append(PatientOutcome(pid, bool(event), time))
    return outcomes


def load_embeddings(path, outcomes_path=None) -> tuple[list[TileRecord], list[PatientOutcome]]:
    """Read precomputed tile embeddings (and, optionally, patient outcomes).

    Feature dimension is inferred from the header. Loaded records carry no
    ``true_cluster``. Raises :class:`EmbeddingParseError` naming the offending
    line for malformed rows, inconsistent dimensions, duplicate tile ids,
    slides claimed by two patients, or (when outcomes are given) tiles whose
    patient has no outcome row.
    """
    tiles: list[TileRecord] = []
    seen_tiles: set[int] = set()
    slide_owner: dict[int, int] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        if header[:3] != ["tile_id", "slide_id", "patient_id"]:
            raise EmbeddingParseError(f"{path}: line 1: unexpected header {header[:3]!r}")
        dim = len(header) - 3
        if [f"f{i}" for i in range(dim)] != header[3:]:
            raise EmbeddingParseError(f"{path}: line 1: feature columns must be f0..f{dim - 1}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3 + dim:
                raise EmbeddingParseError(
                    f"{path}: line {lineno}: expected {3 + dim} fields "
                    f"({dim} features per header), got {len(parts)}"
                )
            try:
                tile_id, slide_id, patient_id = (int(p) for p in parts[:3])
                features = np.array([float(p) for p in parts[3:]])
            except ValueError as exc:
                raise EmbeddingParseError(f"{path}: line {lineno}: {exc}") from exc
            if not np.all(np.isfinite(features)):
                raise EmbeddingParseError(f"{path}: line {lineno}: non-finite feature value")
            if tile_id in seen_tiles:
                raise EmbeddingParseError(f"{path}: line {lineno}: duplicate tile_id {tile_id}")
            seen_tiles.add(tile_id)
            if slide_owner.setdefault(slide_id, patient_id) != patient_id:
                raise EmbeddingParseError(
                    f"{path}: line {lineno}: slide {slide_id} assigned to both "
                    f"patients {slide_owner[slide_id]} and {patient_id}"
                )
            tiles.append(TileRecord(tile_id, slide_id, patient_id, features))

    outcomes: list[PatientOutcome] = []
    if outcomes_path is not None:
        outcomes = load_outcomes(outcomes_path)
        known = {o.patient_id for o in outcomes}
        for t in tiles:
            if t.patient_id not in known:
                raise EmbeddingParseError(
                    f"{path}: tile {t.tile_id}: patient {t.patient_id} has no outcome row"
                )
    return tiles, outcomes


def feature_matrix(tiles: list[TileRecord]) -> np.ndarray:
    """Stack tile features into an (n_tiles, d) array, in list order."""
    return np.stack([t.features for t in tiles]) if tiles else np.zeros((0, 0))


def slides_of(tiles: list[TileRecord]) -> dict[int, list[int]]:
    """Map slide_id -> indices into `tiles`, in stable order."""
    groups: dict[int, list[int]] = {}
    for i, t in enumerate(tiles):
        groups.setdefault(t.slide_id, []).append(i)
    return groups
