"""Masked-autoencoder encoder/decoder and the multitask heads.

Layout of one forward pass::

    x (B, 48, 7) --mask--> zeroed cells --linear--> (B, 48, d) + sinusoidal PE
    [CLS] embedding prepended -> (B, 49, d) -> n_layers Transformer layers
    decoder: tokens 1..48 -> linear d->7
    heads:   CLS (B, d) ++ static -> linear -> act -> dropout -> linear

Weights live in a flat ``name -> Tensor`` dict so that checkpoints, the
optimizer and the freeze check can all treat them uniformly.
"""

from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from vismae.errors import ConfigError, ContractError, FreezeViolation, ValidationError
from vismae.io import atomic_write_text
from vismae.numerics import (
    Tensor,
    activation,
    concat,
    dropout,
    embedding,
    feed_forward,
    layer_norm,
    linear,
    multi_head_attention,
    no_grad,
    softmax,
)

CHECKPOINT_FORMAT_VERSION = 1
STAGES = ("mae", "teacher", "student")


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    ffn_dim: int = 256
    n_heads: int = 8
    n_layers: int = 2
    dropout: float = 0.1
    seq_len: int = 48
    n_features: int = 7
    mask_ratio: float = 0.05
    head_dropout: float = 0.2
    head_hidden: int = 64
    static_full_dim: int = 51
    static_scorefree_dim: int = 47
    n_targets: int = 4
    n_classes: int = 2
    activation: str = "relu"
    norm_position: str = "post"
    mask_granularity: str = "cell"
    positional_encoding: bool = True
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ConfigError(f"d_model={self.d_model} must be even for sinusoidal encoding")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        for name in ("dropout", "head_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"activation must be relu or gelu, got {self.activation!r}")
        if self.norm_position not in ("post", "pre"):
            raise ConfigError(f"norm_position must be post or pre, got {self.norm_position!r}")
        if self.mask_granularity not in ("cell", "timestep"):
            raise ConfigError(f"mask_granularity must be cell or timestep, got {self.mask_granularity!r}")
        if min(self.n_layers, self.seq_len, self.n_features, self.head_hidden, self.ffn_dim) < 1:
            raise ConfigError("layer counts and widths must be positive")
        if self.static_scorefree_dim > self.static_full_dim:
            raise ConfigError("score-free static width cannot exceed the full width")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EncoderConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# -- fixed tables and masks ---------------------------------------------------------


def positional_encoding(seq_len: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: sin on even dims, cos on odd dims."""
    if d_model % 2:
        raise ConfigError(f"d_model must be even, got {d_model}")
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d_model)
    table = np.zeros((seq_len, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


@dataclass
class MaskPlan:
    mask: np.ndarray  # (B, seq_len, n_features) bool, True = hidden
    seed: int


def n_masked(config: EncoderConfig) -> int:
    """Cells (or time steps, for timestep granularity) hidden per sample."""
    units = config.seq_len * config.n_features if config.mask_granularity == "cell" else config.seq_len
    # round first so e.g. 0.05 * 336 = 16.8000000001 does not ceil past its true value
    k = math.ceil(round(config.mask_ratio * units, 9))
    if k < 1:
        raise ConfigError(f"mask_ratio {config.mask_ratio} masks no cells")
    if k >= units:
        raise ConfigError(f"mask_ratio {config.mask_ratio} masks every cell")
    return k


def make_mask(batch_size: int, config: EncoderConfig, seed: int, start_index: int = 0) -> MaskPlan:
    """Uniform random cells (without replacement), one independent draw per sample.

    Sample ``i`` of the plan depends only on ``seed`` and ``start_index + i``.
    """
    k = n_masked(config)
    t, f = config.seq_len, config.n_features
    mask = np.zeros((batch_size, t, f), dtype=bool)
    for i in range(batch_size):
        rng = np.random.default_rng([int(seed), start_index + i])
        if config.mask_granularity == "cell":
            flat = mask[i].reshape(-1)
            flat[rng.choice(t * f, size=k, replace=False)] = True
        else:
            mask[i, rng.choice(t, size=k, replace=False), :] = True
    return MaskPlan(mask=mask, seed=seed)


# -- parameters ---------------------------------------------------------------------


def parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d_model, config.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "input_proj.weight": (config.n_features, d),
        "input_proj.bias": (d,),
        "cls_token": (1, d),
        "pos_table": (config.seq_len, d),
    }
    for layer in range(config.n_layers):
        p = f"layers.{layer}."
        for proj in ("q", "k", "v", "out"):
            shapes[p + f"attn.{proj}.weight"] = (d, d)
            shapes[p + f"attn.{proj}.bias"] = (d,)
        shapes[p + "norm1.weight"] = (d,)
        shapes[p + "norm1.bias"] = (d,)
        shapes[p + "ffn.lin1.weight"] = (d, f)
        shapes[p + "ffn.lin1.bias"] = (f,)
        shapes[p + "ffn.lin2.weight"] = (f, d)
        shapes[p + "ffn.lin2.bias"] = (d,)
        shapes[p + "norm2.weight"] = (d,)
        shapes[p + "norm2.bias"] = (d,)
    shapes["decoder.weight"] = (d, config.n_features)
    shapes["decoder.bias"] = (config.n_features,)
    h = config.head_hidden
    shapes["cls_head.hidden.weight"] = (d + config.static_full_dim, h)
    shapes["cls_head.hidden.bias"] = (h,)
    shapes["cls_head.out.weight"] = (h, config.n_classes)
    shapes["cls_head.out.bias"] = (config.n_classes,)
    shapes["reg_head.hidden.weight"] = (d + config.static_scorefree_dim, h)
    shapes["reg_head.hidden.bias"] = (h,)
    shapes["reg_head.out.weight"] = (h, config.n_targets)
    shapes["reg_head.out.bias"] = (config.n_targets,)
    return shapes


# names that are fixed tables rather than learned weights
BUFFERS = frozenset({"pos_table"})
ENCODER_PREFIXES = ("input_proj.", "cls_token", "pos_table", "layers.")
HEAD_PREFIXES = ("cls_head.", "reg_head.")


def _fan_in(name: str, shape: tuple[int, ...], shapes: dict) -> int:
    if name.endswith(".bias"):
        return shapes[name[: -len(".bias")] + ".weight"][0]
    return shape[0] if len(shape) > 1 else shape[-1]


def init_params(config: EncoderConfig, seed: int, prefixes: tuple[str, ...] | None = None) -> dict[str, Tensor]:
    """Uniform(+-1/sqrt(fan_in)) weights; layer norms start at identity.

    Every tensor draws from its own generator keyed by its name, so
    initializing a subset (``prefixes``) gives the same values as the full set.
    """
    shapes = parameter_shapes(config)
    params: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        if prefixes is not None and not name.startswith(prefixes):
            continue
        if name == "pos_table":
            data = positional_encoding(config.seq_len, config.d_model) if config.positional_encoding \
                else np.zeros(shape)
            params[name] = Tensor(data, requires_grad=False, name=name)
            continue
        if ".norm" in name:
            data = np.ones(shape) if name.endswith(".weight") else np.zeros(shape)
        else:
            rng = np.random.default_rng([int(seed), zlib.crc32(name.encode())])
            bound = 1.0 / math.sqrt(_fan_in(name, shape, shapes) if name != "cls_token" else config.d_model)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


# -- forward pieces ------------------------------------------------------------------


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def embed_tokens(x, mask: MaskPlan | np.ndarray | None, config: EncoderConfig, params: dict[str, Tensor]) -> Tensor:
    """Masked cells zeroed, projected to d_model, positional table added: (B, T, d)."""
    x = _as_input(x)
    if x.ndim != 3 or x.shape[1:] != (config.seq_len, config.n_features):
        raise ContractError(f"expected input (B, {config.seq_len}, {config.n_features}), got {x.shape}")
    if mask is not None:
        m = mask.mask if isinstance(mask, MaskPlan) else np.asarray(mask, dtype=bool)
        if m.shape != x.shape:
            raise ContractError(f"mask shape {m.shape} != input shape {x.shape}")
        x = x * (~m).astype(np.float64)
    tokens = linear(x, params["input_proj.weight"], params["input_proj.bias"])
    return tokens + params["pos_table"]


def _encoder_layer(h: Tensor, layer: int, config: EncoderConfig, params, train: bool, rng) -> Tensor:
    p = f"layers.{layer}."
    eps = config.layer_norm_eps

    def attn(z):
        return multi_head_attention(
            z,
            params[p + "attn.q.weight"], params[p + "attn.q.bias"],
            params[p + "attn.k.weight"], params[p + "attn.k.bias"],
            params[p + "attn.v.weight"], params[p + "attn.v.bias"],
            params[p + "attn.out.weight"], params[p + "attn.out.bias"],
            n_heads=config.n_heads, dropout_p=config.dropout, train=train, rng=rng,
        )

    def ffn(z):
        return feed_forward(
            z,
            params[p + "ffn.lin1.weight"], params[p + "ffn.lin1.bias"],
            params[p + "ffn.lin2.weight"], params[p + "ffn.lin2.bias"],
            act=config.activation, dropout_p=config.dropout, train=train, rng=rng,
        )

    def norm(z, which):
        return layer_norm(z, params[p + f"{which}.weight"], params[p + f"{which}.bias"], eps)

    drop = config.dropout
    if config.norm_position == "post":
        h = norm(h + dropout(attn(h), drop, train, rng), "norm1")
        return norm(h + dropout(ffn(h), drop, train, rng), "norm2")
    h = h + dropout(attn(norm(h, "norm1")), drop, train, rng)
    return h + dropout(ffn(norm(h, "norm2")), drop, train, rng)


def encoder_forward(
    x,
    mask: MaskPlan | np.ndarray | None,
    config: EncoderConfig,
    params: dict[str, Tensor],
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Latent tokens (B, 1 + seq_len, d); position 0 is the CLS representation."""
    tokens = embed_tokens(x, mask, config, params)
    b = tokens.shape[0]
    cls = embedding(params["cls_token"], np.zeros(b, dtype=np.int64)).reshape(b, 1, config.d_model)
    h = concat([cls, tokens], axis=1)
    for layer in range(config.n_layers):
        h = _encoder_layer(h, layer, config, params, train, rng)
    return h


def decoder_forward(latent: Tensor, params: dict[str, Tensor], config: EncoderConfig | None = None) -> Tensor:
    """Per-token linear map back to feature space, CLS excluded: (B, seq_len, n_features)."""
    if latent.ndim != 3 or latent.shape[-1] != params["decoder.weight"].shape[0]:
        raise ContractError(f"decoder expects (B, T+1, {params['decoder.weight'].shape[0]}), got {latent.shape}")
    if config is not None and latent.shape[1] != config.seq_len + 1:
        raise ContractError(f"decoder expects {config.seq_len + 1} tokens, got {latent.shape[1]}")
    return linear(latent[:, 1:, :], params["decoder.weight"], params["decoder.bias"])


def _head(prefix: str, cls, static, width: int, config: EncoderConfig, params, train: bool, rng) -> Tensor:
    cls = _as_input(cls)
    static = _as_input(static)
    if cls.ndim != 2 or cls.shape[1] != config.d_model:
        raise ContractError(f"{prefix}: CLS input must be (B, {config.d_model}), got {cls.shape}")
    if static.ndim != 2 or static.shape != (cls.shape[0], width):
        raise ContractError(f"{prefix}: static input must be ({cls.shape[0]}, {width}), got {static.shape}")
    h = linear(concat([cls, static], axis=1), params[f"{prefix}.hidden.weight"], params[f"{prefix}.hidden.bias"])
    h = dropout(activation(config.activation)(h), config.head_dropout, train, rng)
    return linear(h, params[f"{prefix}.out.weight"], params[f"{prefix}.out.bias"])


def classify_head(cls, static_full, config: EncoderConfig, params, train: bool = False, rng=None) -> Tensor:
    """Mortality logits (B, 2) from CLS and the full 51-dim static vector."""
    return _head("cls_head", cls, static_full, config.static_full_dim, config, params, train, rng)


def regress_head(cls, static_scorefree, config: EncoderConfig, params, train: bool = False, rng=None) -> Tensor:
    """Normalized severity-score predictions (B, 4) from CLS and the score-free static vector."""
    return _head("reg_head", cls, static_scorefree, config.static_scorefree_dim, config, params, train, rng)


# -- model container --------------------------------------------------------------------


class SepsisModel:
    """Encoder, decoder and both heads with a stage tag (mae | teacher | student)."""

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor], stage: str = "mae"):
        if stage not in STAGES:
            raise ContractError(f"stage must be one of {STAGES}, got {stage!r}")
        check_shapes(params, config)
        self.config = config
        self.params = params
        self.stage = stage
        self.frozen = False

    @classmethod
    def initialize(cls, config: EncoderConfig, seed: int, stage: str = "mae") -> SepsisModel:
        return cls(config, init_params(config, seed), stage)

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in BUFFERS}

    def copy(self, stage: str | None = None) -> SepsisModel:
        params = {k: Tensor(v.data.copy(), requires_grad=k not in BUFFERS, name=k) for k, v in self.params.items()}
        return SepsisModel(self.config, params, stage or self.stage)

    def freeze(self) -> SepsisModel:
        """Stop gradients and make every weight array read-only."""
        for t in self.params.values():
            t.requires_grad = False
            t.data.flags.writeable = False
        self.frozen = True
        return self

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def assert_digest(self, expected: str) -> None:
        if self.digest() != expected:
            raise FreezeViolation("frozen model parameters changed")

    # -- forward ------------------------------------------------------------------

    def encode(self, x, mask=None, train: bool = False, rng=None) -> Tensor:
        return encoder_forward(x, mask, self.config, self.params, train and not self.frozen, rng)

    def reconstruct(self, latent: Tensor) -> Tensor:
        return decoder_forward(latent, self.params, self.config)

    def heads(self, latent: Tensor, static_full, train: bool = False, rng=None) -> tuple[Tensor, Tensor]:
        train = train and not self.frozen
        cls = latent[:, 0, :]
        static_full = _as_input(static_full)
        sf = static_full[:, : self.config.static_scorefree_dim]
        return (
            classify_head(cls, static_full, self.config, self.params, train, rng),
            regress_head(cls, sf, self.config, self.params, train, rng),
        )

    def cls_embedding(self, vis: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode CLS representations (N, d)."""
        out = []
        with no_grad():
            for start in range(0, len(vis), batch_size):
                out.append(self.encode(vis[start:start + batch_size]).data[:, 0, :])
        return np.concatenate(out) if out else np.zeros((0, self.config.d_model))

    def head_logits(self, cls: np.ndarray, static_full: np.ndarray) -> np.ndarray:
        with no_grad():
            return classify_head(cls, static_full, self.config, self.params).data

    def predict(self, vis: np.ndarray, static_full: np.ndarray, batch_size: int = 256):
        """Eval-mode (positive-class probability (N,), logits (N, 2), regression (N, 4))."""
        probs, logits, regs = [], [], []
        with no_grad():
            for s in range(0, len(vis), batch_size):
                latent = self.encode(vis[s:s + batch_size])
                z, r = self.heads(latent, static_full[s:s + batch_size])
                logits.append(z.data)
                regs.append(r.data)
                probs.append(softmax(z).data[:, 1])
        if not probs:
            return np.zeros(0), np.zeros((0, self.config.n_classes)), np.zeros((0, self.config.n_targets))
        return np.concatenate(probs), np.concatenate(logits), np.concatenate(regs)

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())


def check_shapes(params: dict[str, Tensor], config: EncoderConfig) -> None:
    expected = parameter_shapes(config)
    missing = set(expected) - set(params)
    extra = set(params) - set(expected)
    if missing or extra:
        raise ContractError(f"parameter names mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ContractError(f"{name}: shape {params[name].shape} != expected {shape}")


# -- checkpoints ------------------------------------------------------------------------


def checkpoint_text(model: SepsisModel, meta: dict | None = None) -> str:
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "stage": model.stage,
        "frozen": model.frozen,
        "config": model.config.to_dict(),
        "meta": meta or {},
        "tensors": {
            name: {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
            for name, t in model.params.items()
        },
    }
    # float repr round-trips exactly, so save -> load -> save is byte-identical
    return json.dumps(doc, separators=(",", ":")) + "\n"


def save_checkpoint(model: SepsisModel, path: str | Path, meta: dict | None = None) -> Path:
    return atomic_write_text(path, checkpoint_text(model, meta))


def load_checkpoint(path: str | Path) -> tuple[SepsisModel, dict]:
    """Return the model and the checkpoint's free-form metadata."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not a checkpoint ({exc.msg} at line {exc.lineno})") from None
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint format_version {doc.get('format_version')}")
    config = EncoderConfig.from_dict(doc["config"])
    params = {}
    for name, entry in doc["tensors"].items():
        data = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        params[name] = Tensor(data, requires_grad=name not in BUFFERS, name=name)
    model = SepsisModel(config, params, doc["stage"])
    if doc.get("frozen", False):
        model.freeze()
    return model, doc.get("meta", {})
