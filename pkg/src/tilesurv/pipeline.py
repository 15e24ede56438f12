"""End-to-end experiment orchestration and report emission.

Per fold: pretrain the contrastive encoder on train+validation tiles, fit the
mixture model on train-tile embeddings only, pool posteriors into slide then
patient features, fit the penalized Cox model on train patients, and score
held-out test patients. The validation split picks the cluster count and the
Cox penalty. Ablation arms and baseline methods reuse the same folds and the
same per-fold seeds so comparisons are paired.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import contrastive, gmm, metrics, sampling, survival, survnets
from .cohort import (CohortConfig, PatientOutcome, TileRecord, feature_matrix,
                     generate_cohort, load_embeddings, slides_of, split_by_patient)
from .contrastive import TrainConfig
from .sampling import BatchSpec
from .survival import SurvivalRecord

SSL_COX = "ssl_cox"
BASELINE_METHODS = ("e2e_deepsurv", "e2e_nnsurv", "mil_deepsurv", "mil_nnsurv", SSL_COX)


@dataclass(frozen=True)
class ClusteringConfig:
    k_values: tuple[int, ...] = (10, 50)
    tolerance: float = 1e-5
    max_iter: int = 100


@dataclass(frozen=True)
class SurvivalConfig:
    alpha_values: tuple[float, ...] = (0.01, 0.1, 1.0)
    brier_horizon: float = 4.0  # 2 years in 6-month units


@dataclass(frozen=True)
class BaselineConfig:
    hidden_dims: tuple[int, ...] = (16,)
    attn_dim: int = 8
    l2: float = 0.1
    max_iter: int = 200


@dataclass(frozen=True)
class ExperimentConfig:
    cohort: CohortConfig | None = field(default_factory=CohortConfig)
    embeddings_path: str | None = None  # alternative to the simulator
    outcomes_path: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    survival: SurvivalConfig = field(default_factory=SurvivalConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    n_folds: int = 5
    seed: int = 0
    shuffle_labels: bool = False  # permutation-null mode: outcomes reassigned at random
    null_mode: bool = False       # skip all fitting: untrained encoder, zero coefficients

    def __post_init__(self):
        if self.cohort is None and self.embeddings_path is None:
            raise ValueError("either a cohort config or an embeddings path is required")
        if self.n_folds < 1:
            raise ValueError("n_folds must be >= 1")


@dataclass
class ExperimentReport:
    """Everything the report files are generated from; plain JSON-able types."""

    metrics: list[dict] = field(default_factory=list)        # method, fold, c_index, brier
    aggregates: list[dict] = field(default_factory=list)     # method, means and ci95 half-widths
    hazard_ratios: list[dict] = field(default_factory=list)  # cluster, exp_beta (sorted desc)
    probe_accuracy: list[dict] = field(default_factory=list) # arm, fold, accuracy
    loss_traces: dict = field(default_factory=dict)          # "arm/foldJ" -> [loss per epoch]
    km_strata: list[dict] = field(default_factory=list)      # group, time, survival
    pca_points: list[dict] = field(default_factory=list)     # x, y, slide
    errors: list[dict] = field(default_factory=list)         # fold, arm, error
    manifest: dict = field(default_factory=dict)


def _seed_for(config_seed: int, fold: int, purpose: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([config_seed, fold, purpose])


def _seed_int(config_seed: int, fold: int, purpose: int) -> int:
    return int(_seed_for(config_seed, fold, purpose).generate_state(1)[0])


def load_cohort(config: ExperimentConfig) -> tuple[list[TileRecord], list[PatientOutcome]]:
    if config.embeddings_path is not None:
        return load_embeddings(config.embeddings_path, config.outcomes_path)
    return generate_cohort(config.cohort)


def _maybe_shuffle_outcomes(outcomes: list[PatientOutcome],
                            config: ExperimentConfig) -> list[PatientOutcome]:
    if not config.shuffle_labels:
        return outcomes
    rng = np.random.default_rng(_seed_for(config.seed, 0, 3))
    perm = rng.permutation(len(outcomes))
    return [PatientOutcome(o.patient_id, outcomes[j].event, outcomes[j].time)
            for o, j in zip(outcomes, perm)]


def _tiles_for(tiles: list[TileRecord], patients: frozenset[int]) -> list[TileRecord]:
    return [t for t in tiles if t.patient_id in patients]


def _assert_no_leakage(*tile_groups):
    seen: set[int] = set()
    for group in tile_groups:
        ids = {t.tile_id for t in group}
        if seen & ids:
            raise AssertionError("tile ids leak across split boundaries")
        seen |= ids


def _patient_cluster_features(model: gmm.GmmModel, embeddings: np.ndarray,
                              tiles: list[TileRecord]) -> dict[int, np.ndarray]:
    """Slide features from pooled posteriors, averaged per patient."""
    slide_rows = slides_of(tiles)
    patient_slides: dict[int, list[np.ndarray]] = {}
    for slide, rows in slide_rows.items():
        v = gmm.pool_slide(model, slide, embeddings[rows]).v
        patient_slides.setdefault(tiles[rows[0]].patient_id, []).append(v)
    return {pid: np.mean(vs, axis=0) for pid, vs in sorted(patient_slides.items())}


def _records_from_features(features: dict[int, np.ndarray],
                           outcomes: dict[int, PatientOutcome]) -> list[SurvivalRecord]:
    return [SurvivalRecord(pid, features[pid], outcomes[pid].event, outcomes[pid].time)
            for pid in sorted(features)]


def _null_cox(records: list[SurvivalRecord], alpha: float) -> survival.CoxModel:
    dim = records[0].covariates.shape[0]
    beta = np.zeros(dim)
    baseline = survival.breslow_baseline(records, beta)
    return survival.CoxModel(beta=beta, alpha=alpha, baseline=baseline,
                             n_iter=0, final_grad_norm=0.0)


def _clamped_horizon(horizon: float, records: list[SurvivalRecord]) -> float:
    max_t = max(r.time for r in records)
    if horizon > max_t:
        warnings.warn(f"Brier horizon {horizon} beyond the observed range; "
                      f"clamped to {max_t}")
        return float(max_t)
    return horizon


@dataclass
class _FoldArtifacts:
    """Outputs of one SSL->GMM->Cox fold, enough for metrics and extras."""

    c_index: float
    brier: float
    probe: float
    loss_trace: list[float]
    chosen_k: int
    chosen_alpha: float
    model: survival.CoxModel
    test_records: list[SurvivalRecord]
    test_risks: np.ndarray
    ssl_state: contrastive.EncoderState
    ssl_tiles: list[TileRecord]
    ssl_embeddings: np.ndarray


def _run_fold_ssl_cox(tiles, outcomes_by_pid, plan, config: ExperimentConfig,
                      batch_spec: BatchSpec) -> _FoldArtifacts:
    train_tiles = _tiles_for(tiles, plan.train)
    val_tiles = _tiles_for(tiles, plan.validation)
    test_tiles = _tiles_for(tiles, plan.test)
    _assert_no_leakage(train_tiles, val_tiles, test_tiles)
    ssl_tiles = train_tiles + val_tiles  # test tiles never seen in pretraining

    train_seed = _seed_int(config.seed, plan.fold, 0)
    train_cfg = dataclasses.replace(config.train, batch_spec=batch_spec, seed=train_seed)
    if config.null_mode:
        state = contrastive.init_encoder_state(
            feature_dim=tiles[0].features.shape[0], hidden_dim=train_cfg.hidden_dim,
            embedding_dim=train_cfg.embedding_dim, queue_size=train_cfg.queue_size,
            rng=np.random.default_rng(train_seed), temperature=train_cfg.temperature,
            momentum=train_cfg.momentum)
        trace: list[float] = []
    else:
        result = contrastive.train(ssl_tiles, train_cfg)
        state, trace = result.state, result.loss_trace

    emb_train = contrastive.embed_tiles(state, train_tiles)
    emb_val = contrastive.embed_tiles(state, val_tiles) if val_tiles else None
    emb_test = contrastive.embed_tiles(state, test_tiles)

    best = None  # (val_c, -position) maximization; first candidate wins ties
    position = 0
    for k in config.clustering.k_values:
        if k > emb_train.shape[0]:
            warnings.warn(f"skipping k={k}: more components than training tiles")
            continue
        gm = gmm.fit_gmm(emb_train, k, config.clustering.tolerance,
                         config.clustering.max_iter,
                         seed=_seed_int(config.seed, plan.fold, 1))
        feats_train = _patient_cluster_features(gm, emb_train, train_tiles)
        train_records = _records_from_features(feats_train, outcomes_by_pid)
        feats_val = (_patient_cluster_features(gm, emb_val, val_tiles)
                     if val_tiles else {})
        val_records = _records_from_features(feats_val, outcomes_by_pid)
        for alpha in config.survival.alpha_values:
            position += 1
            try:
                model = (_null_cox(train_records, alpha) if config.null_mode
                         else survival.cox_fit(train_records, alpha))
            except (RuntimeError, ValueError) as exc:
                warnings.warn(f"candidate k={k}, alpha={alpha} failed: {exc}")
                continue
            if val_records:
                try:
                    risks = survival.cox_predict_risk(
                        model, np.stack([r.covariates for r in val_records]))
                    val_c = metrics.c_index(val_records, risks)
                except ValueError:
                    val_c = 0.5  # no comparable validation pairs
            else:
                val_c = 0.5
            candidate = (val_c, -position, k, alpha, gm, model, train_records)
            if best is None or candidate[:2] > best[:2]:
                best = candidate
    if best is None:
        raise RuntimeError("every (k, alpha) candidate failed on this fold")
    _, _, k, alpha, gm, model, train_records = best

    feats_test = _patient_cluster_features(gm, emb_test, test_tiles)
    test_records = _records_from_features(feats_test, outcomes_by_pid)
    test_x = np.stack([r.covariates for r in test_records])
    test_risks = survival.cox_predict_risk(model, test_x)
    c = metrics.c_index(test_records, test_risks)
    horizon = _clamped_horizon(config.survival.brier_horizon, test_records)
    try:
        surv_at_h = survival.cox_predict_survival(model, test_x, horizon)
        brier = metrics.brier_score(test_records, surv_at_h, horizon)
    except ValueError as exc:
        warnings.warn(f"Brier score unavailable: {exc}")
        brier = float("nan")

    ssl_emb = contrastive.embed_tiles(state, ssl_tiles)
    probe = contrastive.slide_probe(ssl_emb, [t.slide_id for t in ssl_tiles],
                                    seed=_seed_int(config.seed, plan.fold, 2))

    return _FoldArtifacts(c_index=c, brier=brier, probe=probe, loss_trace=trace,
                          chosen_k=k, chosen_alpha=alpha, model=model,
                          test_records=test_records, test_risks=test_risks,
                          ssl_state=state, ssl_tiles=ssl_tiles, ssl_embeddings=ssl_emb)


def _km_strata_rows(test_records, test_risks) -> list[dict]:
    """Two Kaplan-Meier curves: top half by predicted risk vs bottom half."""
    order = np.argsort([-r for r in test_risks], kind="stable")
    n_high = (len(order) + 1) // 2
    rows = []
    for group, idx in (("high", order[:n_high]), ("low", order[n_high:])):
        subset = [test_records[i] for i in idx]
        if not subset:
            continue
        curve = survival.km_fit(subset)
        rows.append({"group": group, "time": 0.0, "survival": 1.0})
        for t, s in zip(curve.step.times, curve.step.values):
            rows.append({"group": group, "time": float(t), "survival": float(s)})
    return rows


def _pca_rows(embeddings: np.ndarray, slide_ids, seed: int,
              max_points: int = 1500) -> list[dict]:
    centered = embeddings - embeddings.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:2].T
    idx = np.arange(proj.shape[0])
    if idx.size > max_points:
        idx = np.sort(np.random.default_rng(seed).choice(idx.size, max_points, replace=False))
    return [{"x": float(proj[i, 0]), "y": float(proj[i, 1]), "slide": int(slide_ids[i])}
            for i in idx]


def _aggregate(rows: list[dict]) -> list[dict]:
    """Across-fold mean and 0.95 CI half-width (1.96 * sd of folds) per method."""
    methods = sorted({r["method"] for r in rows})
    out = []
    for method in methods:
        cs = np.array([r["c_index"] for r in rows if r["method"] == method], dtype=float)
        bs = np.array([r["brier"] for r in rows if r["method"] == method], dtype=float)

        def stats(vals):
            vals = vals[~np.isnan(vals)]
            if vals.size == 0:
                return float("nan"), float("nan")
            ci = 1.96 * float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
            return float(np.mean(vals)), ci

        c_mean, c_ci = stats(cs)
        b_mean, b_ci = stats(bs)
        out.append({"method": method, "c_index_mean": c_mean, "c_index_ci95": c_ci,
                    "brier_mean": b_mean, "brier_ci95": b_ci})
    return out


def _base_manifest(config: ExperimentConfig) -> dict:
    digest = hashlib.sha256(repr(config).encode("utf-8")).hexdigest()
    manifest = {"config_hash": digest, "seed": config.seed, "folds": config.n_folds}
    if config.embeddings_path is not None:
        manifest["embeddings"] = str(config.embeddings_path)
        if config.outcomes_path is not None:
            manifest["outcomes"] = str(config.outcomes_path)
    else:
        manifest["cohort_seed"] = config.cohort.seed
    return manifest


def _run_ssl_arms(config: ExperimentConfig, arms: dict[str, BatchSpec]) -> ExperimentReport:
    tiles, outcomes = load_cohort(config)
    outcomes = _maybe_shuffle_outcomes(outcomes, config)
    outcomes_by_pid = {o.patient_id: o for o in outcomes}
    plans = split_by_patient([o.patient_id for o in outcomes], seed=config.seed,
                             n_folds=config.n_folds)

    report = ExperimentReport(manifest=_base_manifest(config))
    extras_done = False
    for arm, spec in arms.items():
        for plan in plans:
            try:
                art = _run_fold_ssl_cox(tiles, outcomes_by_pid, plan, config, spec)
            except Exception as exc:  # a failed fold must not sink the others
                report.errors.append({"fold": plan.fold, "arm": arm, "error": str(exc)})
                continue
            report.metrics.append({"method": arm, "fold": plan.fold,
                                   "c_index": art.c_index, "brier": art.brier})
            report.probe_accuracy.append({"arm": arm, "fold": plan.fold,
                                          "accuracy": art.probe})
            report.loss_traces[f"{arm}/fold{plan.fold}"] = [float(x) for x in art.loss_trace]
            if not extras_done:
                report.hazard_ratios = [{"cluster": i, "exp_beta": r}
                                        for i, r in survival.hazard_ratios(art.model)]
                report.km_strata = _km_strata_rows(art.test_records, art.test_risks)
                report.pca_points = _pca_rows(
                    art.ssl_embeddings, [t.slide_id for t in art.ssl_tiles],
                    seed=_seed_int(config.seed, plan.fold, 4))
                extras_done = True
    if not report.metrics and report.errors:
        raise RuntimeError(f"all folds failed: {report.errors}")
    report.aggregates = _aggregate(report.metrics)
    return report


def run_pipeline(config: ExperimentConfig) -> ExperimentReport:
    """The full SSL -> GMM -> Cox flow over all folds, deterministic per seed."""
    return _run_ssl_arms(config, {SSL_COX: config.train.batch_spec})


def run_ablation(config: ExperimentConfig,
                 n_values=(1, 4, 16, 32, "random")) -> ExperimentReport:
    """One pipeline arm per slide count, sharing folds and per-fold seeds."""
    m = config.train.batch_spec.batch_size
    arms: dict[str, BatchSpec] = {}
    for n in n_values:
        if n == "random":
            arms["random"] = BatchSpec(m, sampling.RANDOM)
        else:
            spec = BatchSpec.from_string(f"cond:{int(n)}", m)
            arms[spec.label()] = spec
    return _run_ssl_arms(config, arms)


# ---------------------------------------------------------------------------
# Baselines: end-to-end tile supervision and attention MIL over frozen
# embeddings, each with both survival heads, next to the main method.
# ---------------------------------------------------------------------------

def _patient_mean(tiles: list[TileRecord], values: np.ndarray) -> dict[int, float]:
    """Tile values -> slide means -> patient means."""
    slide_rows = slides_of(tiles)
    patient_slides: dict[int, list[float]] = {}
    for slide, rows in slide_rows.items():
        patient_slides.setdefault(tiles[rows[0]].patient_id, []).append(
            float(np.mean(values[rows])))
    return {pid: float(np.mean(vals)) for pid, vals in sorted(patient_slides.items())}


def _tile_records(tiles: list[TileRecord], outcomes_by_pid) -> list[SurvivalRecord]:
    return [SurvivalRecord(t.tile_id, t.features, outcomes_by_pid[t.patient_id].event,
                           outcomes_by_pid[t.patient_id].time) for t in tiles]


def _slide_bags(tiles: list[TileRecord], embeddings: np.ndarray, outcomes_by_pid):
    """(bags, times, events, patient ids) per slide, slides sorted by id."""
    slide_rows = slides_of(tiles)
    bags, times, events, pids = [], [], [], []
    for slide in sorted(slide_rows):
        rows = slide_rows[slide]
        outcome = outcomes_by_pid[tiles[rows[0]].patient_id]
        bags.append(embeddings[rows])
        times.append(outcome.time)
        events.append(outcome.event)
        pids.append(tiles[rows[0]].patient_id)
    return bags, np.array(times, dtype=float), np.array(events, dtype=bool), pids


def _patient_metrics(outcomes_by_pid, patient_risk: dict[int, float],
                     patient_surv: dict[int, float], horizon: float):
    pids = sorted(patient_risk)
    records = [SurvivalRecord(pid, np.zeros(1), outcomes_by_pid[pid].event,
                              outcomes_by_pid[pid].time) for pid in pids]
    risks = np.array([patient_risk[pid] for pid in pids])
    c = metrics.c_index(records, risks)
    horizon = _clamped_horizon(horizon, records)
    try:
        brier = metrics.brier_score(
            records, np.array([patient_surv[pid] for pid in pids]), horizon)
    except ValueError as exc:
        warnings.warn(f"Brier score unavailable: {exc}")
        brier = float("nan")
    return c, brier


def _fold_baseline_rows(tiles, outcomes_by_pid, plan, config: ExperimentConfig,
                        art: _FoldArtifacts) -> list[dict]:
    train_tiles = _tiles_for(tiles, plan.train)
    test_tiles = _tiles_for(tiles, plan.test)
    horizon = config.survival.brier_horizon
    all_times = [o.time for o in outcomes_by_pid.values()]
    boundaries = survnets.six_month_grid(all_times)
    net_iter = 0 if config.null_mode else config.baselines.max_iter
    rows = []

    # (a) end-to-end: tile-level supervision with broadcast patient labels
    train_recs = _tile_records(train_tiles, outcomes_by_pid)
    test_x = feature_matrix(test_tiles)
    net_cfg = survnets.NetConfig(hidden_dims=config.baselines.hidden_dims,
                                 l2=config.baselines.l2, max_iter=net_iter,
                                 seed=_seed_int(config.seed, plan.fold, 5))
    ds = survnets.deepsurv_fit(train_recs, net_cfg)
    risk = _patient_mean(test_tiles, survnets.deepsurv_risk(ds, test_x))
    surv = _patient_mean(test_tiles, survnets.deepsurv_survival(ds, test_x, horizon))
    c, b = _patient_metrics(outcomes_by_pid, risk, surv, horizon)
    rows.append({"method": "e2e_deepsurv", "fold": plan.fold, "c_index": c, "brier": b})

    ns = survnets.nnsurv_fit(train_recs, boundaries, net_cfg)
    risk = _patient_mean(test_tiles, survnets.nnsurv_risk(ns, test_x))
    surv = _patient_mean(test_tiles, survnets.nnsurv_survival(ns, test_x, horizon))
    c, b = _patient_metrics(outcomes_by_pid, risk, surv, horizon)
    rows.append({"method": "e2e_nnsurv", "fold": plan.fold, "c_index": c, "brier": b})

    # (b) MIL: attention over frozen SSL embeddings, slide bags, patient labels
    emb_train = contrastive.embed_tiles(art.ssl_state, train_tiles)
    emb_test = contrastive.embed_tiles(art.ssl_state, test_tiles)
    bags_tr, times_tr, events_tr, _ = _slide_bags(train_tiles, emb_train, outcomes_by_pid)
    bags_te, _, _, pids_te = _slide_bags(test_tiles, emb_test, outcomes_by_pid)

    def slide_to_patient(values) -> dict[int, float]:
        acc: dict[int, list[float]] = {}
        for pid, v in zip(pids_te, values):
            acc.setdefault(pid, []).append(float(v))
        return {pid: float(np.mean(vs)) for pid, vs in sorted(acc.items())}

    for head, name in (("deepsurv", "mil_deepsurv"), ("nnsurv", "mil_nnsurv")):
        mil_cfg = survnets.NetConfig(hidden_dims=config.baselines.hidden_dims,
                                     l2=config.baselines.l2, max_iter=net_iter,
                                     seed=_seed_int(config.seed, plan.fold, 6))
        model = survnets.mil_fit(bags_tr, times_tr, events_tr, head, mil_cfg,
                                 attn_dim=config.baselines.attn_dim,
                                 boundaries=boundaries if head == "nnsurv" else None)
        risk = slide_to_patient(survnets.mil_risk(model, bags_te))
        surv = slide_to_patient(survnets.mil_survival(model, bags_te, horizon))
        c, b = _patient_metrics(outcomes_by_pid, risk, surv, horizon)
        rows.append({"method": name, "fold": plan.fold, "c_index": c, "brier": b})
    return rows


def run_baselines(config: ExperimentConfig) -> ExperimentReport:
    """Table of e2e_deepsurv, e2e_nnsurv, mil_deepsurv, mil_nnsurv, ssl_cox."""
    tiles, outcomes = load_cohort(config)
    outcomes = _maybe_shuffle_outcomes(outcomes, config)
    outcomes_by_pid = {o.patient_id: o for o in outcomes}
    plans = split_by_patient([o.patient_id for o in outcomes], seed=config.seed,
                             n_folds=config.n_folds)

    report = ExperimentReport(manifest=_base_manifest(config))
    extras_done = False
    for plan in plans:
        try:
            art = _run_fold_ssl_cox(tiles, outcomes_by_pid, plan, config,
                                    config.train.batch_spec)
        except Exception as exc:
            report.errors.append({"fold": plan.fold, "arm": SSL_COX, "error": str(exc)})
            continue
        report.metrics.append({"method": SSL_COX, "fold": plan.fold,
                               "c_index": art.c_index, "brier": art.brier})
        report.probe_accuracy.append({"arm": SSL_COX, "fold": plan.fold,
                                      "accuracy": art.probe})
        report.loss_traces[f"{SSL_COX}/fold{plan.fold}"] = [float(x) for x in art.loss_trace]
        if not extras_done:
            report.hazard_ratios = [{"cluster": i, "exp_beta": r}
                                    for i, r in survival.hazard_ratios(art.model)]
            report.km_strata = _km_strata_rows(art.test_records, art.test_risks)
            report.pca_points = _pca_rows(
                art.ssl_embeddings, [t.slide_id for t in art.ssl_tiles],
                seed=_seed_int(config.seed, plan.fold, 4))
            extras_done = True
        try:
            report.metrics.extend(
                _fold_baseline_rows(tiles, outcomes_by_pid, plan, config, art))
        except Exception as exc:
            report.errors.append({"fold": plan.fold, "arm": "baselines", "error": str(exc)})
    if not report.metrics and report.errors:
        raise RuntimeError(f"all folds failed: {report.errors}")
    report.aggregates = _aggregate(report.metrics)
    return report


# ---------------------------------------------------------------------------
# Report emission: CSVs, JSON, manifest, and static SVG plots, all written
# atomically (temp file + rename) with deterministic bytes.
# ---------------------------------------------------------------------------

def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if np.isnan(x) else format(x, ".9g")
    return str(x)


def _csv(header: list[str], rows: list[list]) -> str:
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def report_to_json(report: ExperimentReport) -> str:
    return json.dumps(dataclasses.asdict(report), sort_keys=True, indent=2) + "\n"


def report_from_json(text: str) -> ExperimentReport:
    return ExperimentReport(**json.loads(text))


def emit_report(report: ExperimentReport, out_dir) -> list[str]:
    """Write every report artifact under `out_dir`; returns the file names."""
    os.makedirs(out_dir, exist_ok=True)
    files: dict[str, str] = {}

    rows = [[r["method"], r["fold"], r["c_index"], r["brier"]]
            for r in sorted(report.metrics, key=lambda r: (r["method"], r["fold"]))]
    for agg in report.aggregates:
        rows.append([agg["method"], "mean", agg["c_index_mean"], agg["brier_mean"]])
    files["metrics.csv"] = _csv(["method", "fold", "c_index", "brier_2y"], rows)

    files["metrics_summary.csv"] = _csv(
        ["method", "c_index_mean", "c_index_ci95", "brier_mean", "brier_ci95"],
        [[a["method"], a["c_index_mean"], a["c_index_ci95"],
          a["brier_mean"], a["brier_ci95"]] for a in report.aggregates])

    files["hazard_ratios.csv"] = _csv(
        ["cluster", "exp_beta"],
        [[h["cluster"], h["exp_beta"]] for h in report.hazard_ratios])

    files["probe_accuracy.csv"] = _csv(
        ["arm", "fold", "accuracy"],
        [[p["arm"], p["fold"], p["accuracy"]]
         for p in sorted(report.probe_accuracy, key=lambda p: (p["arm"], p["fold"]))])

    trace_rows = []
    for key in sorted(report.loss_traces):
        trace_rows.extend([key, epoch, loss]
                          for epoch, loss in enumerate(report.loss_traces[key]))
    files["loss_traces.csv"] = _csv(["arm", "epoch", "loss"], trace_rows)

    files["km_strata.csv"] = _csv(
        ["group", "time", "survival"],
        [[r["group"], r["time"], r["survival"]] for r in report.km_strata])

    if report.errors:
        files["errors.csv"] = _csv(
            ["fold", "arm", "error"],
            [[e["fold"], e["arm"], e["error"].replace(",", ";")] for e in report.errors])

    files["report.json"] = report_to_json(report)

    manifest_lines = ["tilesurv-manifest 1"]
    manifest_lines.extend(f"{k}={report.manifest[k]}" for k in sorted(report.manifest))
    plot_names = _plot_names(report)
    manifest_lines.append("files=" + ",".join(sorted(list(files) + plot_names)))
    files["manifest.txt"] = "\n".join(manifest_lines) + "\n"

    for name, text in files.items():
        _atomic_write(os.path.join(out_dir, name), text)
    _emit_plots(report, out_dir)
    return sorted(list(files) + plot_names)


def _plot_names(report: ExperimentReport) -> list[str]:
    names = []
    if report.km_strata:
        names.append("km_strata.svg")
    if report.loss_traces and any(report.loss_traces.values()):
        names.append("loss_traces.svg")
    if report.pca_points:
        names.append("pca_slides.svg")
    return names


def _emit_plots(report: ExperimentReport, out_dir) -> None:
    import matplotlib
    from matplotlib.figure import Figure

    def save(fig: Figure, name: str) -> None:
        tmp = os.path.join(out_dir, name + ".tmp")
        with matplotlib.rc_context({"svg.hashsalt": "tilesurv"}):
            fig.savefig(tmp, format="svg", metadata={"Date": None})
        os.replace(tmp, os.path.join(out_dir, name))

    if report.km_strata:
        fig = Figure(figsize=(5, 4))
        ax = fig.add_subplot()
        for group, color in (("high", "tab:red"), ("low", "tab:blue")):
            pts = [(r["time"], r["survival"]) for r in report.km_strata
                   if r["group"] == group]
            if pts:
                t, s = zip(*pts)
                ax.step(t, s, where="post", label=f"{group} risk", color=color)
        ax.set_xlabel("time (6-month units)")
        ax.set_ylabel("recurrence-free fraction")
        ax.set_ylim(0, 1.05)
        ax.legend()
        save(fig, "km_strata.svg")

    if report.loss_traces and any(report.loss_traces.values()):
        fig = Figure(figsize=(5, 4))
        ax = fig.add_subplot()
        for key in sorted(report.loss_traces):
            trace = report.loss_traces[key]
            if trace:
                ax.plot(range(len(trace)), trace, label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("contrastive loss")
        ax.legend(fontsize=6)
        save(fig, "loss_traces.svg")

    if report.pca_points:
        fig = Figure(figsize=(5, 4))
        ax = fig.add_subplot()
        slides = sorted({p["slide"] for p in report.pca_points})
        cmap = matplotlib.colormaps["tab20"]
        for i, slide in enumerate(slides):
            xs = [p["x"] for p in report.pca_points if p["slide"] == slide]
            ys = [p["y"] for p in report.pca_points if p["slide"] == slide]
            ax.scatter(xs, ys, s=4, color=cmap(i % 20))
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        ax.set_title("tile embeddings by slide")
        save(fig, "pca_slides.svg")
