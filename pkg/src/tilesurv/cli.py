"""Command-line pipeline: generate, train, cluster, fit, evaluate, ablate, report.

Configuration files are plain ``key = value`` text; ``#`` starts a comment.
See README for the full key list. Staged subcommands read and write their
artifacts under the output directory, so a typical session is::

    tilesurv generate --config exp.cfg --out run/
    tilesurv train    --config exp.cfg --out run/ --sampler cond:4
    tilesurv cluster  --config exp.cfg --out run/
    tilesurv fit      --config exp.cfg --out run/
    tilesurv evaluate --config exp.cfg --out run/

`evaluate` and `ablate` run the whole nested cross-validation in one go.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import contrastive, gmm, pipeline, survival
from .cohort import (CohortConfig, generate_cohort, load_embeddings,
                     load_outcomes, save_embeddings, save_outcomes, slides_of)
from .contrastive import AugmentConfig, TrainConfig
from .sampling import BatchSpec
from .survival import SurvivalRecord

EMBEDDINGS = "embeddings.csv"
OUTCOMES = "outcomes.csv"
CHECKPOINT = "checkpoint.txt"
LOSS_TRACE = "loss_trace.csv"
GMM_MODEL = "gmm_model.txt"
SLIDE_FEATURES = "slide_features.csv"
COX_MODEL = "cox_model.txt"
HAZARD_RATIOS = "hazard_ratios.csv"


class ConfigError(ValueError):
    pass


def _parse_kv(text: str) -> dict[str, str]:
    kv: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in kv:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        kv[key] = value
    return kv


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(","))


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(","))


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"cannot parse boolean {text!r}")


def config_from_mapping(kv: dict[str, str]) -> pipeline.ExperimentConfig:
    kv = dict(kv)

    def pop(key, convert, default):
        return convert(kv.pop(key)) if key in kv else default

    cohort_keys = [k for k in kv if k.startswith("cohort.")]
    embeddings_path = kv.pop("embeddings", None)
    outcomes_path = kv.pop("outcomes", None)
    if embeddings_path is not None and cohort_keys:
        raise ConfigError("give either cohort.* keys or an embeddings path, not both")

    cohort = None
    if embeddings_path is None:
        base = CohortConfig()
        cohort = CohortConfig(
            n_patients=pop("cohort.n_patients", int, base.n_patients),
            slides_per_patient=pop("cohort.slides_per_patient", int, base.slides_per_patient),
            tiles_per_slide=pop("cohort.tiles_per_slide", int, base.tiles_per_slide),
            feature_dim=pop("cohort.feature_dim", int, base.feature_dim),
            n_true_clusters=pop("cohort.n_true_clusters", int, base.n_true_clusters),
            batch_effect_scale=pop("cohort.batch_effect_scale", float, base.batch_effect_scale),
            noise_scale=pop("cohort.noise_scale", float, base.noise_scale),
            true_hazard_coefficients=pop("cohort.hazard_coefficients", _floats,
                                         base.true_hazard_coefficients),
            censoring_rate=pop("cohort.censoring_rate", float, base.censoring_rate),
            seed=pop("cohort.seed", int, base.seed),
        )

    batch_size = pop("train.batch_size", int, 128)
    sampler = pop("sampler", str, "cond:4")
    augment = AugmentConfig(
        noise_scale=pop("augment.noise_scale", float, AugmentConfig().noise_scale),
        dropout_prob=pop("augment.dropout_prob", float, AugmentConfig().dropout_prob),
        scale_jitter=pop("augment.scale_jitter", lambda s: tuple(_floats(s)),
                         AugmentConfig().scale_jitter),
    )
    base_train = TrainConfig()
    train = TrainConfig(
        epochs=pop("train.epochs", int, base_train.epochs),
        learning_rate=pop("train.learning_rate", float, base_train.learning_rate),
        lr_schedule=pop("train.lr_schedule", str, base_train.lr_schedule),
        batch_spec=BatchSpec.from_string(sampler, batch_size),
        queue_size=pop("train.queue_size", int, base_train.queue_size),
        hidden_dim=pop("train.hidden_dim", int, base_train.hidden_dim),
        embedding_dim=pop("train.embedding_dim", int, base_train.embedding_dim),
        temperature=pop("train.temperature", float, base_train.temperature),
        momentum=pop("train.momentum", float, base_train.momentum),
        augment=augment,
    )
    clustering = pipeline.ClusteringConfig(
        k_values=pop("clustering.k_values", _ints, pipeline.ClusteringConfig().k_values),
        tolerance=pop("clustering.tolerance", float, pipeline.ClusteringConfig().tolerance),
        max_iter=pop("clustering.max_iter", int, pipeline.ClusteringConfig().max_iter),
    )
    surv = pipeline.SurvivalConfig(
        alpha_values=pop("survival.alpha_values", _floats,
                         pipeline.SurvivalConfig().alpha_values),
        brier_horizon=pop("survival.brier_horizon", float,
                          pipeline.SurvivalConfig().brier_horizon),
    )
    baselines = pipeline.BaselineConfig(
        hidden_dims=pop("baselines.hidden_dims", _ints, pipeline.BaselineConfig().hidden_dims),
        attn_dim=pop("baselines.attn_dim", int, pipeline.BaselineConfig().attn_dim),
        l2=pop("baselines.l2", float, pipeline.BaselineConfig().l2),
        max_iter=pop("baselines.max_iter", int, pipeline.BaselineConfig().max_iter),
    )
    config = pipeline.ExperimentConfig(
        cohort=cohort,
        embeddings_path=embeddings_path,
        outcomes_path=outcomes_path,
        train=train,
        clustering=clustering,
        survival=surv,
        baselines=baselines,
        n_folds=pop("folds", int, 5),
        seed=pop("seed", int, 0),
        shuffle_labels=pop("shuffle_labels", _bool, False),
        null_mode=pop("null_mode", _bool, False),
    )
    if kv:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(kv))}")
    return config


def load_config(path: str | None, args) -> pipeline.ExperimentConfig:
    kv = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            kv = _parse_kv(fh.read())
    config = config_from_mapping(kv)
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if getattr(args, "folds", None) is not None:
        config = dataclasses.replace(config, n_folds=args.folds)
    if getattr(args, "sampler", None) is not None:
        spec = BatchSpec.from_string(args.sampler, config.train.batch_spec.batch_size)
        config = dataclasses.replace(
            config, train=dataclasses.replace(config.train, batch_spec=spec))
    return config


def _tiles_path(config, out_dir):
    if config.embeddings_path is not None:
        return config.embeddings_path
    return os.path.join(out_dir, EMBEDDINGS)


def _outcomes_path(config, out_dir):
    if config.outcomes_path is not None:
        return config.outcomes_path
    return os.path.join(out_dir, OUTCOMES)


def cmd_generate(args) -> int:
    config = load_config(args.config, args)
    if config.cohort is None:
        raise ConfigError("generate needs a cohort.* simulator configuration")
    cohort_cfg = config.cohort
    if args.seed is not None:
        cohort_cfg = dataclasses.replace(cohort_cfg, seed=args.seed)
    tiles, outcomes = generate_cohort(cohort_cfg)
    os.makedirs(args.out, exist_ok=True)
    save_embeddings(tiles, os.path.join(args.out, EMBEDDINGS))
    save_outcomes(outcomes, os.path.join(args.out, OUTCOMES))
    print(f"wrote {len(tiles)} tiles and {len(outcomes)} outcomes under {args.out}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config, args)
    tiles, _ = load_embeddings(_tiles_path(config, args.out))
    result = contrastive.train(tiles, config.train)
    os.makedirs(args.out, exist_ok=True)
    contrastive.save_checkpoint(result.state, os.path.join(args.out, CHECKPOINT))
    contrastive.write_loss_trace(result.loss_trace, os.path.join(args.out, LOSS_TRACE))
    print(f"trained {result.steps} steps over {config.train.epochs} epochs; "
          f"final epoch loss {result.loss_trace[-1]:.4f}")
    return 0


def cmd_cluster(args) -> int:
    config = load_config(args.config, args)
    tiles, _ = load_embeddings(_tiles_path(config, args.out))
    state = contrastive.load_checkpoint(os.path.join(args.out, CHECKPOINT))
    embeddings = contrastive.embed_tiles(state, tiles)
    k = args.k if args.k is not None else config.clustering.k_values[0]
    model = gmm.fit_gmm(embeddings, k, config.clustering.tolerance,
                        config.clustering.max_iter, seed=config.seed)
    features = gmm.slide_features(model, embeddings, [t.slide_id for t in tiles])
    gmm.save_gmm(model, os.path.join(args.out, GMM_MODEL))
    gmm.save_slide_features(features, os.path.join(args.out, SLIDE_FEATURES))
    print(f"fit {k}-component mixture in {model.n_iter} iterations; "
          f"final log-likelihood {model.log_likelihood_trace[-1]:.2f}")
    return 0


def cmd_fit(args) -> int:
    config = load_config(args.config, args)
    tiles, _ = load_embeddings(_tiles_path(config, args.out))
    outcomes = load_outcomes(_outcomes_path(config, args.out))
    outcomes_by_pid = {o.patient_id: o for o in outcomes}

    slide_patient = {t.slide_id: t.patient_id for t in tiles}
    features: dict[int, list[np.ndarray]] = {}
    with open(os.path.join(args.out, SLIDE_FEATURES), encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            parts = line.strip().split(",")
            pid = slide_patient[int(parts[0])]
            features.setdefault(pid, []).append(np.array(parts[1:], dtype=float))
    records = [SurvivalRecord(pid, np.mean(vs, axis=0), outcomes_by_pid[pid].event,
                              outcomes_by_pid[pid].time)
               for pid, vs in sorted(features.items())]

    alpha = args.alpha if args.alpha is not None else config.survival.alpha_values[0]
    model = survival.cox_fit(records, alpha)
    survival.save_cox_model(model, os.path.join(args.out, COX_MODEL))
    ratios = survival.hazard_ratios(model)
    with open(os.path.join(args.out, HAZARD_RATIOS), "w", encoding="utf-8") as fh:
        fh.write("cluster,exp_beta\n")
        for idx, ratio in ratios:
            fh.write(f"{idx},{ratio:.9g}\n")
    print(f"Cox fit converged in {model.n_iter} Newton steps "
          f"(gradient norm {model.final_grad_norm:.2e}); top hazard ratio "
          f"cluster {ratios[0][0]} at {ratios[0][1]:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    config = load_config(args.config, args)
    report = pipeline.run_pipeline(config)
    files = pipeline.emit_report(report, args.out)
    for agg in report.aggregates:
        print(f"{agg['method']}: C-index {agg['c_index_mean']:.4f} "
              f"+/- {agg['c_index_ci95']:.4f}, Brier {agg['brier_mean']:.4f}")
    print(f"wrote {len(files)} report files under {args.out}")
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config, args)
    arms = []
    for token in args.arms.split(","):
        token = token.strip()
        arms.append("random" if token == "random" else int(token))
    report = pipeline.run_ablation(config, tuple(arms))
    files = pipeline.emit_report(report, args.out)
    for agg in report.aggregates:
        print(f"{agg['method']}: C-index {agg['c_index_mean']:.4f} "
              f"+/- {agg['c_index_ci95']:.4f}, Brier {agg['brier_mean']:.4f}")
    print(f"wrote {len(files)} report files under {args.out}")
    return 0


def cmd_baselines(args) -> int:
    config = load_config(args.config, args)
    report = pipeline.run_baselines(config)
    files = pipeline.emit_report(report, args.out)
    for agg in report.aggregates:
        print(f"{agg['method']}: C-index {agg['c_index_mean']:.4f} "
              f"+/- {agg['c_index_ci95']:.4f}, Brier {agg['brier_mean']:.4f}")
    print(f"wrote {len(files)} report files under {args.out}")
    return 0


def cmd_report(args) -> int:
    path = args.input if args.input is not None else os.path.join(args.out, "report.json")
    with open(path, encoding="utf-8") as fh:
        report = pipeline.report_from_json(fh.read())
    files = pipeline.emit_report(report, args.out)
    print(f"re-emitted {len(files)} report files under {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tilesurv",
                                     description="slide-conditional SSL + survival pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="plain-text key=value config file")
        p.add_argument("--out", default="out", help="artifact directory")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.add_argument("--sampler", help="random or cond:N")
        p.add_argument("--folds", type=int, help="number of splits")

    p = sub.add_parser("generate", help="simulate a cohort to embedding/outcome CSVs")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="contrastive pretraining to a checkpoint")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cluster", help="fit the mixture model and pool slide features")
    common(p)
    p.add_argument("--k", type=int, help="number of mixture components")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("fit", help="Cox regression on pooled slide features")
    common(p)
    p.add_argument("--alpha", type=float, help="L2 penalty weight")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="nested cross-validated pipeline + report")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="sampling ablation over n slides per batch")
    common(p)
    p.add_argument("--arms", default="1,4,16,32,random",
                   help="comma list of slide counts and/or 'random'")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("baselines", help="e2e / MIL / ssl_cox method comparison")
    common(p)
    p.set_defaults(func=cmd_baselines)

    p = sub.add_parser("report", help="re-emit report files from a saved report.json")
    common(p)
    p.add_argument("--input", help="path to report.json")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
