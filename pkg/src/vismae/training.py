"""MAE pretraining, frozen-teacher setup, student training and the ablation grid."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from vismae.data.preprocess import PreparedData
from vismae.errors import ConfigError, ContractError, DivergenceError, NumericInputError
from vismae.evaluation import MetricsReport, auroc, build_report, choose_threshold, report_table
from vismae.io import atomic_write_text
from vismae.model import ENCODER_PREFIXES, HEAD_PREFIXES, EncoderConfig, SepsisModel, init_params, make_mask
from vismae.numerics import (
    AdamWState,
    Tensor,
    adamw_step,
    backward,
    mse,
    no_grad,
    softmax,
    weighted_cross_entropy,
)
from vismae.rng import derive_seed, substream

log = logging.getLogger(__name__)

# keys mixed into substreams so the stages never share random draws
_STAGE_KEYS = {"mae": 0, "student": 1, "teacher": 2}


@dataclass(frozen=True)
class TrainConfig:
    lambda_cls: float = 1.0
    lambda_reg: float = 0.1
    lambda_kd: float = 0.05
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    max_epochs_pretrain: int = 20
    max_epochs_student: int = 30
    patience: int = 5
    kd_enabled: bool = True
    mt_enabled: bool = True
    seed: int = 0
    # train the teacher heads (encoder fixed) before freezing; off by default
    teacher_finetune: bool = False
    # start the student encoder from the pretrained MAE weights
    warm_start: bool = True

    def __post_init__(self):
        for name in ("lambda_cls", "lambda_reg", "lambda_kd", "learning_rate", "weight_decay"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be a finite number >= 0, got {v!r}")
        for name in ("batch_size", "patience", "max_epochs_pretrain", "max_epochs_student"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {v!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    """One row per completed epoch."""

    stage: str
    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        expected = len(self.rows) + 1
        if row["epoch"] != expected:
            raise ContractError(f"epoch {row['epoch']} logged out of order (expected {expected})")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        return [r.get(name) for r in self.rows]

    def component_names(self) -> list[str]:
        names: list[str] = []
        for r in self.rows:
            for k in r["components"]:
                if k not in names:
                    names.append(k)
        return names

    def comparable(self) -> list[dict]:
        """Rows without wall time, for run-to-run comparison."""
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in self.rows]

    def to_csv(self) -> str:
        comps = self.component_names()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_auroc", *comps, "wall_time"])
        for r in self.rows:
            auc = r["val_auroc"]
            w.writerow([
                r["epoch"],
                repr(r["train_loss"]),
                repr(r["val_loss"]),
                "" if auc is None else repr(auc),
                *(repr(r["components"][c]) if c in r["components"] else "" for c in comps),
                f"{r['wall_time']:.3f}",
            ])
        return buf.getvalue()

    def save(self, path: str | Path) -> Path:
        return atomic_write_text(path, self.to_csv())


# -- losses -------------------------------------------------------------------


def mae_loss(reconstruction, target, mask) -> Tensor:
    """Mean squared reconstruction error over the masked cells only."""
    m = mask.mask if hasattr(mask, "mask") else mask
    return mse(reconstruction, target, m)


def kd_loss(student_logits, teacher_logits) -> Tensor:
    """Batch mean of the squared distance between the two class distributions."""
    zs = student_logits if isinstance(student_logits, Tensor) else Tensor(np.asarray(student_logits, float))
    zt = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits, float)
    if zs.ndim != 2 or zs.shape != zt.shape:
        raise ContractError(f"student logits {zs.shape} and teacher logits {zt.shape} must match (B, C)")
    # the teacher side is a constant: no gradient flows into it
    diff = softmax(zs) - softmax(Tensor(zt)).data
    return (diff * diff).sum(axis=1).mean()


def student_total_loss(
    cls_logits,
    labels,
    reg_pred,
    reg_target,
    teacher_logits,
    class_weights,
    config: TrainConfig,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted multitask (+ distillation) loss and its unweighted components.

    Components present: ``cls`` always, ``reg`` iff multitask is on, ``kd``
    iff distillation is on. ``total == sum(weight[c] * components[c])``.
    """
    ce = weighted_cross_entropy(cls_logits, labels, class_weights)
    total = ce * config.lambda_cls
    comps = {"cls": float(ce.data)}
    if config.mt_enabled:
        r = mse(reg_pred, reg_target)
        total = total + r * config.lambda_reg
        comps["reg"] = float(r.data)
    if config.kd_enabled:
        if teacher_logits is None:
            raise ConfigError("distillation is enabled but no teacher logits were given")
        k = kd_loss(cls_logits, teacher_logits)
        total = total + k * config.lambda_kd
        comps["kd"] = float(k.data)
    return total, comps


def loss_weights(config: TrainConfig) -> dict[str, float]:
    return {"cls": config.lambda_cls, "reg": config.lambda_reg, "kd": config.lambda_kd}


# -- shared loop pieces -------------------------------------------------------


def _batches(n: int, batch_size: int, seed: int, stage: str, epoch: int) -> list[np.ndarray]:
    order = substream(seed, "shuffle", _STAGE_KEYS[stage], epoch).permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def _check_finite(value: float, where: str) -> float:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} at {where}")
    return value


def _require_finite_inputs(data: PreparedData) -> None:
    for name in ("vis", "static_full"):
        if not np.isfinite(getattr(data, name)).all():
            raise NumericInputError(f"prepared {name} contains non-finite values")


def _step(model: SepsisModel, names: list[str], loss: Tensor, opt: AdamWState, where: str) -> None:
    _check_finite(float(loss.data), where)
    grads = backward(loss)
    by_name = {}
    for name in names:
        t = model.params[name]
        if t in grads:
            by_name[name] = grads[t]
        t.grad = None
    new = adamw_step({n: model.params[n].data for n in names}, by_name, opt)
    for name in names:
        model.params[name].data = new[name]


# -- stage 1: masked-autoencoder pretraining ------------------------------------


def _mae_eval_loss(model: SepsisModel, x: np.ndarray, mask: np.ndarray, batch_size: int = 256) -> float:
    """Masked MSE over the whole set (cell-weighted, not batch-averaged)."""
    sq, count = 0.0, 0
    with no_grad():
        for s in range(0, len(x), batch_size):
            xb, mb = x[s:s + batch_size], mask[s:s + batch_size]
            rec = model.reconstruct(model.encode(xb, mb)).data
            d = rec[mb] - xb[mb]
            sq += float(np.dot(d, d))
            count += int(mb.sum())
    return sq / count


def pretrain_mae(
    data: PreparedData,
    encoder_config: EncoderConfig | None = None,
    config: TrainConfig | None = None,
) -> tuple[SepsisModel, TrainLog]:
    """Reconstruct masked cells of the training split; keep the best-validation weights.

    Labels are ignored. Validation masks are drawn once and reused every
    epoch so that validation losses are comparable; training masks are
    redrawn each epoch. Stops early after ``patience`` epochs without a
    strictly lower validation loss.
    """
    encoder_config = encoder_config or EncoderConfig()
    config = config or TrainConfig()
    seed = config.seed
    _require_finite_inputs(data)
    x_train = data.vis[data.split("train")]
    x_val = data.vis[data.split("validation")]
    if len(x_train) == 0 or len(x_val) == 0:
        raise ContractError("pretraining needs non-empty train and validation splits")

    model = SepsisModel.initialize(encoder_config, derive_seed(seed, "init", _STAGE_KEYS["mae"]), stage="mae")
    names = [n for n in model.trainable() if n.startswith(ENCODER_PREFIXES + ("decoder.",))]
    opt = AdamWState(lr=config.learning_rate, weight_decay=config.weight_decay)
    val_mask = make_mask(len(x_val), encoder_config, derive_seed(seed, "mask", 0)).mask

    log_ = TrainLog("mae")
    best_loss, best_params, stale = math.inf, None, 0
    for epoch in range(1, config.max_epochs_pretrain + 1):
        t0 = time.perf_counter()
        mask_seed = derive_seed(seed, "mask", epoch)
        drop_rng = substream(seed, "dropout", _STAGE_KEYS["mae"], epoch)
        total, seen = 0.0, 0
        for b, idx in enumerate(_batches(len(x_train), config.batch_size, seed, "mae", epoch)):
            xb = x_train[idx]
            plan = make_mask(len(idx), encoder_config, mask_seed, start_index=b * config.batch_size)
            try:
                latent = model.encode(xb, plan, train=True, rng=drop_rng)
                loss = mae_loss(model.reconstruct(latent), xb, plan)
            except NumericInputError as exc:
                raise DivergenceError(f"pretraining epoch {epoch} batch {b}: {exc}") from exc
            _step(model, names, loss, opt, f"pretraining epoch {epoch} batch {b}")
            total += float(loss.data) * len(idx)
            seen += len(idx)
        try:
            val_loss = _mae_eval_loss(model, x_val, val_mask)
        except NumericInputError as exc:
            raise DivergenceError(f"pretraining epoch {epoch} validation: {exc}") from exc
        val_loss = _check_finite(val_loss, f"pretraining epoch {epoch} validation")
        train_loss = total / seen
        log_.append(
            epoch=epoch,
            train_loss=train_loss,
            val_loss=val_loss,
            val_auroc=None,
            components={"mae": train_loss},
            wall_time=time.perf_counter() - t0,
        )
        log.info("mae epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if val_loss < best_loss:
            best_loss, stale = val_loss, 0
            best_params = {n: t.data.copy() for n, t in model.params.items()}
        else:
            stale += 1
            if stale >= config.patience:
                break
    for n, arr in best_params.items():
        model.params[n].data = arr
    return model, log_


# -- stage 2: teacher -----------------------------------------------------------


def build_teacher(
    mae: SepsisModel,
    config: TrainConfig | None = None,
    data: PreparedData | None = None,
) -> SepsisModel:
    """MAE encoder plus freshly initialized heads, frozen.

    With ``config.teacher_finetune`` the heads are first fit on the training
    split (encoder held fixed), which needs ``data``.
    """
    if mae.stage != "mae":
        raise ContractError(f"teacher must be built from an MAE checkpoint, got stage {mae.stage!r}")
    config = config or TrainConfig()
    teacher = mae.copy(stage="teacher")
    fresh = init_params(mae.config, derive_seed(config.seed, "init", _STAGE_KEYS["teacher"]), HEAD_PREFIXES)
    teacher.params.update(fresh)
    if config.teacher_finetune:
        if data is None:
            raise ConfigError("teacher_finetune needs the prepared data")
        head_names = [n for n in teacher.trainable() if n.startswith(HEAD_PREFIXES)]
        teacher_cfg = replace(config, kd_enabled=False)
        _supervised_fit(teacher, head_names, data, None, teacher_cfg, "teacher")
    return teacher.freeze()


def teacher_logits(teacher: SepsisModel, data: PreparedData) -> np.ndarray:
    """Eval-mode teacher logits for every patient (N, 2).

    The teacher is frozen and deterministic, so one pass replaces a forward
    per training step.
    """
    cls = teacher.cls_embedding(data.vis)
    return teacher.head_logits(cls, data.static_full)


# -- stage 3: student -----------------------------------------------------------


def _eval_student(
    model: SepsisModel,
    data: PreparedData,
    idx: np.ndarray,
    t_logits: np.ndarray | None,
    config: TrainConfig,
) -> tuple[float, float | None, np.ndarray]:
    try:
        probs, logits, regs = model.predict(data.vis[idx], data.static_full[idx])
    except NumericInputError as exc:
        raise DivergenceError(f"non-finite validation logits: {exc}") from None
    with no_grad():
        loss, _ = student_total_loss(
            Tensor(logits),
            data.labels[idx],
            Tensor(regs),
            data.targets[idx],
            None if t_logits is None else t_logits[idx],
            data.class_weights,
            config,
        )
    y = data.labels[idx]
    auc = auroc(probs, y) if 0 < y.sum() < len(y) else None
    return float(loss.data), auc, probs


def _supervised_fit(
    model: SepsisModel,
    names: list[str],
    data: PreparedData,
    t_logits: np.ndarray | None,
    config: TrainConfig,
    stage: str,
) -> TrainLog:
    """AdamW on the student loss with early stopping on validation AUROC.

    Restores the weights of the epoch with the best validation AUROC and
    stops once ``patience`` epochs in a row fail to beat it strictly.
    """
    seed = config.seed
    tr, va = data.split("train"), data.split("validation")
    if len(tr) == 0 or len(va) == 0:
        raise ContractError("training needs non-empty train and validation splits")
    opt = AdamWState(lr=config.learning_rate, weight_decay=config.weight_decay)
    log_ = TrainLog(stage)
    best_auc, best_params, stale = -math.inf, None, 0
    key = _STAGE_KEYS[stage]
    for epoch in range(1, config.max_epochs_student + 1):
        t0 = time.perf_counter()
        drop_rng = substream(seed, "dropout", key, epoch)
        total, seen = 0.0, 0
        comp_sums: dict[str, float] = {}
        for b, pos in enumerate(_batches(len(tr), config.batch_size, seed, stage, epoch)):
            idx = tr[pos]
            where = f"{stage} epoch {epoch} batch {b}"
            try:
                latent = model.encode(data.vis[idx], train=True, rng=drop_rng)
                z, r = model.heads(latent, data.static_full[idx], train=True, rng=drop_rng)
                loss, comps = student_total_loss(
                    z,
                    data.labels[idx],
                    r,
                    data.targets[idx],
                    None if t_logits is None else t_logits[idx],
                    data.class_weights,
                    config,
                )
            except NumericInputError as exc:
                # inputs were checked finite up front, so this is divergence
                raise DivergenceError(f"non-finite activations at {where}: {exc}") from None
            _step(model, names, loss, opt, where)
            total += float(loss.data) * len(idx)
            seen += len(idx)
            for k, v in comps.items():
                comp_sums[k] = comp_sums.get(k, 0.0) + v * len(idx)
        val_loss, val_auc, _ = _eval_student(model, data, va, t_logits, config)
        _check_finite(val_loss, f"{stage} epoch {epoch} validation")
        log_.append(
            epoch=epoch,
            train_loss=total / seen,
            val_loss=val_loss,
            val_auroc=val_auc,
            components={k: v / seen for k, v in comp_sums.items()},
            wall_time=time.perf_counter() - t0,
        )
        log.info("%s epoch %d train %.5f val %.5f auroc %s", stage, epoch, total / seen, val_loss, val_auc)
        # a single-class validation split has no AUROC; fall back to the loss
        score = val_auc if val_auc is not None else -val_loss
        if score > best_auc:
            best_auc, stale = score, 0
            best_params = {n: model.params[n].data.copy() for n in names}
        else:
            stale += 1
            if stale >= config.patience:
                break
    for n, arr in best_params.items():
        model.params[n].data = arr
    return log_


def init_student(encoder_config: EncoderConfig, config: TrainConfig, mae: SepsisModel | None = None) -> SepsisModel:
    student = SepsisModel.initialize(encoder_config, derive_seed(config.seed, "init", _STAGE_KEYS["student"]), "student")
    if config.warm_start:
        if mae is None:
            raise ConfigError("warm_start needs the pretrained MAE model")
        if mae.config != encoder_config:
            raise ConfigError("MAE and student encoder configurations differ")
        for name, t in mae.params.items():
            if name.startswith(ENCODER_PREFIXES):
                student.params[name].data = t.data.copy()
    return student


def train_student(
    data: PreparedData,
    teacher: SepsisModel | None,
    config: TrainConfig | None = None,
    mae: SepsisModel | None = None,
    encoder_config: EncoderConfig | None = None,
) -> tuple[SepsisModel, TrainLog]:
    """Train the student on classification (+ regression, + distillation).

    The teacher is only consulted when distillation is on; its parameter
    digest is checked after training and a change raises
    :class:`~vismae.errors.FreezeViolation`.
    """
    config = config or TrainConfig()
    _require_finite_inputs(data)
    encoder_config = encoder_config or (mae.config if mae is not None else None) \
        or (teacher.config if teacher is not None else EncoderConfig())
    t_logits = None
    digest = None
    if config.kd_enabled:
        if teacher is None:
            raise ConfigError("distillation is enabled but no teacher was given")
        if not teacher.frozen:
            raise ContractError("the teacher must be frozen before student training")
        digest = teacher.digest()
        t_logits = teacher_logits(teacher, data)
    student = init_student(encoder_config, config, mae)
    names = list(student.trainable())
    log_ = _supervised_fit(student, names, data, t_logits, config, "student")
    if teacher is not None and digest is not None:
        teacher.assert_digest(digest)
    return student, log_


# -- end-to-end pipeline and ablation ----------------------------------------------


@dataclass
class PipelineResult:
    student: SepsisModel
    teacher: SepsisModel | None
    report: MetricsReport
    student_log: TrainLog
    threshold: float
    teacher_digest_before: str | None = None
    teacher_digest_after: str | None = None


def evaluate_model(
    model: SepsisModel,
    data: PreparedData,
    config_name: str = "baseline",
    kd_enabled: bool = True,
    mt_enabled: bool = True,
    n_resamples: int = 1000,
    seed: int = 0,
    threshold: float | None = None,
) -> MetricsReport:
    """Test-split report; the threshold is chosen on validation unless given."""
    if threshold is None:
        va = data.split("validation")
        val_probs, _, _ = model.predict(data.vis[va], data.static_full[va])
        threshold = choose_threshold(val_probs, data.labels[va])
    te = data.split("test")
    probs, _, regs = model.predict(data.vis[te], data.static_full[te])
    report = build_report(
        probs,
        data.labels[te],
        threshold,
        reg_pred=regs,
        reg_target=data.targets[te],
        n_resamples=n_resamples,
        seed=seed,
        config_name=config_name,
        kd_enabled=kd_enabled,
        mt_enabled=mt_enabled,
    )
    report.split_digest = data.splits.digest()
    return report


def run_student_arm(
    data: PreparedData,
    mae: SepsisModel,
    config: TrainConfig,
    name: str,
    n_resamples: int = 1000,
) -> PipelineResult:
    teacher = build_teacher(mae, config, data) if config.kd_enabled else None
    before = teacher.digest() if teacher is not None else None
    student, slog = train_student(data, teacher, config, mae=mae)
    after = teacher.digest() if teacher is not None else None
    report = evaluate_model(
        student, data, name, config.kd_enabled, config.mt_enabled, n_resamples=n_resamples, seed=config.seed
    )
    return PipelineResult(student, teacher, report, slog, report.threshold, before, after)


def run_pipeline(
    data: PreparedData,
    config: TrainConfig | None = None,
    encoder_config: EncoderConfig | None = None,
    n_resamples: int = 1000,
) -> tuple[PipelineResult, TrainLog]:
    """Pretrain, build the teacher, train and evaluate one student."""
    config = config or TrainConfig()
    mae, mae_log = pretrain_mae(data, encoder_config, config)
    name = next((k for k, v in ABLATION_ARMS.items()
                 if v == {"kd_enabled": config.kd_enabled, "mt_enabled": config.mt_enabled}), "custom")
    return run_student_arm(data, mae, config, name, n_resamples), mae_log


ABLATION_ARMS = {
    "baseline": {"kd_enabled": True, "mt_enabled": True},
    "no_kd": {"kd_enabled": False, "mt_enabled": True},
    "no_mt": {"kd_enabled": True, "mt_enabled": False},
}


@dataclass
class AblationResult:
    arms: dict[str, PipelineResult]
    mae_log: TrainLog

    @property
    def reports(self) -> list[MetricsReport]:
        return [a.report for a in self.arms.values()]

    def table(self) -> str:
        return report_table(self.reports)


def run_ablation(
    data: PreparedData,
    config: TrainConfig | None = None,
    encoder_config: EncoderConfig | None = None,
    n_resamples: int = 1000,
    mae: SepsisModel | None = None,
) -> AblationResult:
    """Baseline, no-distillation and no-multitask arms on one split and one MAE.

    Every arm shares the seed, the splits and the pretrained encoder, so the
    arms differ only in their loss terms.
    """
    config = config or TrainConfig()
    mae_log = TrainLog("mae")
    if mae is None:
        mae, mae_log = pretrain_mae(data, encoder_config, config)
    arms = {}
    for name, flags in ABLATION_ARMS.items():
        arm_cfg = replace(config, **flags)
        arms[name] = run_student_arm(data, mae, arm_cfg, name, n_resamples)
    return AblationResult(arms, mae_log)
