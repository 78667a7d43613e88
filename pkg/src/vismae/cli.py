"""Command-line entry point: ``vismae <subcommand> [options]``.

Every subcommand writes its artifacts plus the resolved ``run_config.yaml``
into ``--out``. Exit codes: 0 success, 2 configuration/contract error,
3 data error, 4 numeric divergence, 5 missing input artifact.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from vismae.attribution import background_vector, rank_features, shapley_static
from vismae.config import RunConfig, load_run_config
from vismae.data import PreparedData, generate_synthetic_cohort, prepare_dataset, read_cohort, write_cohort
from vismae.errors import (
    ConfigError,
    ContractError,
    DataError,
    DivergenceError,
    MissingArtifactError,
    VismaeError,
)
from vismae.evaluation import roc_text
from vismae.io import atomic_write_text, write_json
from vismae.model import load_checkpoint, save_checkpoint
from vismae.training import build_teacher, evaluate_model, pretrain_mae, run_ablation, train_student

log = logging.getLogger("vismae")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_MISSING = 5

COHORT_FILE = "cohort.jsonl"
MAE_CHECKPOINT = "mae.ckpt.json"
TEACHER_CHECKPOINT = "teacher.ckpt.json"
STUDENT_CHECKPOINT = "student.ckpt.json"


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, ContractError)):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, DivergenceError):
        return EXIT_DIVERGENCE
    if isinstance(exc, MissingArtifactError):
        return EXIT_MISSING
    return 1


def _require_file(path: str | Path | None, what: str, hint: str) -> Path:
    if path is None:
        raise MissingArtifactError(f"{what} not given; {hint}")
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"{what} not found: {p}; {hint}")
    return p


def _load_data(path: str | None) -> PreparedData:
    d = _require_file(path, "preprocessed data directory", "run `vismae preprocess` first")
    if not (d / "dataset.npz").is_file():
        raise MissingArtifactError(f"{d / 'dataset.npz'} not found; run `vismae preprocess` first")
    return PreparedData.load(d)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    return out


# -- subcommands ----------------------------------------------------------------


def cmd_generate(cfg: RunConfig, args) -> None:
    d = cfg.data
    records = generate_synthetic_cohort(
        d.n_patients,
        signal_strength=d.signal_strength,
        missingness_rate=d.missingness_rate,
        seed=cfg.seed,
        positive_rate=d.positive_rate,
    )
    out = _out_dir(cfg)
    write_cohort(records, out / COHORT_FILE)
    log.info("wrote %d patients to %s", len(records), out / COHORT_FILE)


def _prepare(cfg: RunConfig) -> PreparedData:
    cohort = _require_file(cfg.paths.cohort, "cohort file", "pass --cohort or run `vismae generate` first")
    return prepare_dataset(read_cohort(cohort), cfg.data.split_fractions, seed=cfg.seed)


def cmd_preprocess(cfg: RunConfig, args) -> None:
    data = _prepare(cfg)
    out = _out_dir(cfg)
    data.save(out)
    log.info("preprocessed %d patients into %s", len(data.labels), out)


def cmd_pretrain(cfg: RunConfig, args) -> None:
    data = _load_data(args.data)
    model, tlog = pretrain_mae(data, cfg.model, cfg.train_config())
    out = _out_dir(cfg)
    save_checkpoint(model, out / MAE_CHECKPOINT, {"seed": cfg.seed, "split_digest": data.splits.digest()})
    tlog.save(out / "mae_log.csv")
    log.info("pretrained for %d epochs; checkpoint %s", len(tlog), out / MAE_CHECKPOINT)


def cmd_train(cfg: RunConfig, args) -> None:
    data = _load_data(args.data)
    tcfg = cfg.train_config()
    mae = None
    if tcfg.warm_start or tcfg.kd_enabled:
        path = _require_file(args.mae, "MAE checkpoint", "run `vismae pretrain` first or pass --mae")
        mae, _ = load_checkpoint(path)
    teacher = build_teacher(mae, tcfg, data) if tcfg.kd_enabled else None
    student, tlog = train_student(data, teacher, tcfg, mae=mae, encoder_config=cfg.model)
    out = _out_dir(cfg)
    meta = {"seed": cfg.seed, "split_digest": data.splits.digest()}
    if teacher is not None:
        save_checkpoint(teacher, out / TEACHER_CHECKPOINT, meta)
    save_checkpoint(student, out / STUDENT_CHECKPOINT, meta)
    tlog.save(out / "student_log.csv")
    log.info("trained student for %d epochs; checkpoint %s", len(tlog), out / STUDENT_CHECKPOINT)


def cmd_evaluate(cfg: RunConfig, args) -> None:
    data = _load_data(args.data)
    model, _ = load_checkpoint(_require_file(args.checkpoint, "checkpoint", "run `vismae train` first"))
    tcfg = cfg.train_config()
    report = evaluate_model(
        model,
        data,
        config_name=args.name,
        kd_enabled=tcfg.kd_enabled,
        mt_enabled=tcfg.mt_enabled,
        n_resamples=cfg.evaluation.n_resamples,
        seed=cfg.seed,
    )
    out = _out_dir(cfg)
    report.save(out)
    te = data.split("test")
    probs, _, _ = model.predict(data.vis[te], data.static_full[te])
    atomic_write_text(out / "roc.csv", roc_text(probs, data.labels[te]))
    log.info("test AUROC %s", report.metrics["AUROC"].fmt())


def cmd_explain(cfg: RunConfig, args) -> None:
    data = _load_data(args.data)
    model, _ = load_checkpoint(_require_file(args.checkpoint, "checkpoint", "run `vismae train` first"))
    tr, te = data.split("train"), data.split("test")
    idx = te[: cfg.attribution.max_patients]
    bg = background_vector(data.static_full[tr], data.manifest)
    result = shapley_static(
        model,
        data.static_full[idx],
        bg,
        n_samples=cfg.attribution.n_samples,
        seed=cfg.seed,
        vis=data.vis[idx],
        patient_ids=[data.patient_ids[i] for i in idx],
    )
    out = _out_dir(cfg)
    result.save(out)
    for name, v in rank_features(result, 5):
        log.info("%-32s %.4f", name, v)


def cmd_ablate(cfg: RunConfig, args) -> None:
    data = _load_data(args.data) if args.data else _prepare(cfg)
    result = run_ablation(data, cfg.train_config(), cfg.model, n_resamples=cfg.evaluation.n_resamples)
    out = _out_dir(cfg)
    write_json(out / "splits.json", data.splits.to_dict())
    result.mae_log.save(out / "mae_log.csv")
    for name, arm in result.arms.items():
        arm.report.save(out, stem=f"metrics_{name}")
        arm.student_log.save(out / f"student_log_{name}.csv")
        if arm.teacher is not None:
            write_json(out / f"teacher_digest_{name}.json",
                       {"before": arm.teacher_digest_before, "after": arm.teacher_digest_after})
    atomic_write_text(out / "ablation.csv", result.table())
    sys.stdout.write(result.table())


# -- argument parsing -------------------------------------------------------------


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=default, help="root seed (overrides the config)")
    parser.add_argument("--out", default=default, help="output directory (overrides the config)")
    parser.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="only log warnings and errors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vismae", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = add("generate", cmd_generate, "write a synthetic cohort")
    p.add_argument("--n", type=int, dest="n_patients")
    p.add_argument("--signal", type=float, dest="signal_strength")
    p.add_argument("--missingness", type=float, dest="missingness_rate")
    p.add_argument("--positive-rate", type=float, dest="positive_rate")

    p = add("preprocess", cmd_preprocess, "impute, normalize, encode and split a cohort")
    p.add_argument("--cohort")

    p = add("pretrain", cmd_pretrain, "masked-autoencoder pretraining")
    p.add_argument("--data", help="preprocessed data directory")

    p = add("train", cmd_train, "teacher setup and student training")
    p.add_argument("--data", help="preprocessed data directory")
    p.add_argument("--mae", help="MAE checkpoint")
    p.add_argument("--no-kd", action="store_true", help="disable distillation")
    p.add_argument("--no-mt", action="store_true", help="disable the regression task")

    p = add("evaluate", cmd_evaluate, "test-split metrics with bootstrap intervals and ROC data")
    p.add_argument("--data", help="preprocessed data directory")
    p.add_argument("--checkpoint", help="student checkpoint")
    p.add_argument("--name", default="baseline", help="row label in the metrics table")

    p = add("explain", cmd_explain, "Shapley attribution of the static features")
    p.add_argument("--data", help="preprocessed data directory")
    p.add_argument("--checkpoint", help="student checkpoint")
    p.add_argument("--n-samples", type=int, dest="shap_samples")
    p.add_argument("--max-patients", type=int)

    p = add("ablate", cmd_ablate, "baseline / no_kd / no_mt comparison on shared splits")
    p.add_argument("--cohort")
    p.add_argument("--data", help="preprocessed data directory (instead of --cohort)")
    return parser


def resolve_config(args) -> RunConfig:
    """Defaults < config file < flags."""
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    paths = cfg.paths
    if args.out is not None:
        paths = replace(paths, out=args.out)
    if getattr(args, "cohort", None) is not None:
        paths = replace(paths, cohort=args.cohort)
    data_over = {k: getattr(args, k) for k in ("n_patients", "signal_strength", "missingness_rate", "positive_rate")
                 if getattr(args, k, None) is not None}
    training = cfg.training
    if getattr(args, "no_kd", False):
        training = replace(training, kd_enabled=False)
    if getattr(args, "no_mt", False):
        training = replace(training, mt_enabled=False)
    attribution = cfg.attribution
    if getattr(args, "shap_samples", None) is not None:
        attribution = replace(attribution, n_samples=args.shap_samples)
    if getattr(args, "max_patients", None) is not None:
        attribution = replace(attribution, max_patients=args.max_patients)
    return replace(cfg, paths=paths, data=replace(cfg.data, **data_over), training=training, attribution=attribution)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    try:
        cfg = resolve_config(args)
        args.func(cfg, args)
    except VismaeError as exc:
        log.error("%s", exc)
        return exit_code_for(exc)
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_MISSING if isinstance(exc, FileNotFoundError) else 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
