"""Two-tower encoders, manual backprop training loop, and checkpoints.

Each encoder is a fully connected net: affine then rectifier per hidden
layer, final affine into the shared h-dimensional space.  Training pairs
the towers with the contrastive loss and updates every parameter with
AdamW.  Checkpoints round-trip bit-exactly through the BLPC container.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .contrastive import LossConfig, OBJECTIVES, SMOOTHED, contrastive_loss
from .data import PairedDataset
from .errors import NumericalError, ShapeError, ValidationError
from .io import container_content_hash, read_container, write_container
from .linalg import AdamWState, F32, F64, Matrix, adamw_step, matmul

BLPC_MAGIC = b"BLPC"
RELU = "relu"

Params = list[tuple[Matrix, Matrix]]


@dataclass(frozen=True)
class EncoderSpec:
    """Layer widths for one tower; both towers must share output_dim."""

    input_dim: int
    hidden_dims: tuple[int, ...] = (512,)
    output_dim: int = 256
    activation: str = RELU

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValidationError(f"encoder dims must all be >= 1, got {dims}")
        if self.activation != RELU:
            raise ValidationError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @staticmethod
    def from_dict(doc: dict) -> "EncoderSpec":
        return EncoderSpec(
            input_dim=int(doc["input_dim"]),
            hidden_dims=tuple(int(d) for d in doc["hidden_dims"]),
            output_dim=int(doc["output_dim"]),
            activation=doc["activation"],
        )


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    batch_size: int = 512
    learning_rate: float = 0.001
    epochs: int = 150
    temperature: float = 1.0
    objective: str = SMOOTHED

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValidationError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.temperature <= 0:
            raise ValidationError(f"temperature must be positive, got {self.temperature}")
        if self.objective not in OBJECTIVES:
            raise ValidationError(f"objective {self.objective!r} not in {OBJECTIVES}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "temperature": self.temperature,
            "objective": self.objective,
        }

    @staticmethod
    def from_dict(doc: dict) -> "TrainConfig":
        return TrainConfig(
            seed=int(doc["seed"]),
            batch_size=int(doc["batch_size"]),
            learning_rate=float(doc["learning_rate"]),
            epochs=int(doc["epochs"]),
            temperature=float(doc["temperature"]),
            objective=doc["objective"],
        )


def init_params(spec: EncoderSpec, rng: np.random.Generator) -> Params:
    """He-style fan-in uniform weights, zero biases."""
    params: Params = []
    dims = spec.layer_dims
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weight = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(F32)
        bias = np.zeros((1, fan_out), dtype=F32)
        params.append((weight, bias))
    return params


def _forward_cached(params: Params, x: Matrix, workers: int = 1):
    """Forward pass keeping per-layer inputs and pre-activations."""
    inputs = [x]
    pre: list[Matrix] = []
    h = x
    last = len(params) - 1
    for i, (weight, bias) in enumerate(params):
        z = matmul(h, weight, workers=workers) + bias
        pre.append(z)
        h = z if i == last else np.maximum(z, np.float32(0.0))
        inputs.append(h)
    return h, inputs, pre


def _backward(params: Params, inputs, pre, grad_out: Matrix, workers: int = 1) -> Params:
    """Gradients for every (weight, bias), same nesting as params."""
    grads: list = [None] * len(params)
    g = grad_out
    for i in reversed(range(len(params))):
        grad_w = matmul(inputs[i].T, g, workers=workers)
        grad_b = g.astype(F64).sum(axis=0, keepdims=True).astype(F32)
        grads[i] = (grad_w, grad_b)
        if i > 0:
            g = matmul(g, params[i][0].T, workers=workers)
            g = g * (pre[i - 1] > 0)
    return grads


def _forward(spec: EncoderSpec, params: Params, x: Matrix, name: str, workers: int) -> Matrix:
    x = np.asarray(x, dtype=F32)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(
            f"{name} expects (*, {spec.input_dim}) input, got {x.shape}"
        )
    out, _, _ = _forward_cached(params, x, workers=workers)
    return out


@dataclass
class ModelCheckpoint:
    image_spec: EncoderSpec
    expr_spec: EncoderSpec
    image_params: Params
    expr_params: Params
    train_config: TrainConfig
    loss_trace: list[float]
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.image_spec.output_dim != self.expr_spec.output_dim:
            raise ValidationError(
                f"encoder output dims differ: image {self.image_spec.output_dim}, "
                f"expression {self.expr_spec.output_dim}"
            )
        for name, spec, params in (
            ("image encoder", self.image_spec, self.image_params),
            ("expression encoder", self.expr_spec, self.expr_params),
        ):
            dims = spec.layer_dims
            if len(params) != len(dims) - 1:
                raise ValidationError(
                    f"{name}: {len(params)} layers for dims {dims}"
                )
            for i, (weight, bias) in enumerate(params):
                want = (dims[i], dims[i + 1])
                if weight.shape != want or bias.shape != (1, dims[i + 1]):
                    raise ValidationError(
                        f"{name} layer {i}: weight {weight.shape} bias {bias.shape}, "
                        f"expected weight {want}"
                    )

    def _payload(self) -> tuple[dict, list[tuple[str, Matrix]]]:
        header = {
            "kind": "checkpoint",
            "image_spec": self.image_spec.to_dict(),
            "expr_spec": self.expr_spec.to_dict(),
            "train_config": self.train_config.to_dict(),
            "loss_trace": self.loss_trace,
            "warnings": self.warnings,
        }
        blobs: list[tuple[str, Matrix]] = []
        for tower, params in (("image", self.image_params), ("expr", self.expr_params)):
            for i, (weight, bias) in enumerate(params):
                blobs.append((f"{tower}_w{i}", weight))
                blobs.append((f"{tower}_b{i}", bias))
        return header, blobs

    @property
    def content_hash(self) -> str:
        header, blobs = self._payload()
        header["blobs"] = [name for name, _ in blobs]
        return container_content_hash(header, blobs)


def save_checkpoint(path: str | Path, ckpt: ModelCheckpoint, created: str | None = None) -> str:
    header, blobs = ckpt._payload()
    if created is not None:
        header["created"] = created
    return write_container(path, BLPC_MAGIC, header, blobs)


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    header, blobs = read_container(path, BLPC_MAGIC)
    image_spec = EncoderSpec.from_dict(header["image_spec"])
    expr_spec = EncoderSpec.from_dict(header["expr_spec"])

    def tower(name: str, spec: EncoderSpec) -> Params:
        params: Params = []
        for i in range(len(spec.layer_dims) - 1):
            params.append((blobs[f"{name}_w{i}"], blobs[f"{name}_b{i}"]))
        return params

    return ModelCheckpoint(
        image_spec=image_spec,
        expr_spec=expr_spec,
        image_params=tower("image", image_spec),
        expr_params=tower("expr", expr_spec),
        train_config=TrainConfig.from_dict(header["train_config"]),
        loss_trace=[float(v) for v in header["loss_trace"]],
        warnings=list(header.get("warnings", [])),
    )


def encode_image(ckpt: ModelCheckpoint, feats: Matrix, workers: int = 1) -> Matrix:
    return _forward(ckpt.image_spec, ckpt.image_params, feats, "image encoder", workers)


def encode_expression(ckpt: ModelCheckpoint, expr: Matrix, workers: int = 1) -> Matrix:
    return _forward(ckpt.expr_spec, ckpt.expr_params, expr, "expression encoder", workers)


def train(
    dataset: PairedDataset,
    cfg: TrainConfig,
    image_spec: EncoderSpec | None = None,
    expr_spec: EncoderSpec | None = None,
    workers: int = 1,
) -> ModelCheckpoint:
    """Contrastive training of both towers over the paired dataset.

    Deterministic per (dataset, cfg) at workers=1: one seeded generator
    drives initialization then per-epoch shuffles.  Trailing batches of
    size 1 are dropped (they contribute zero gradient).
    """
    n = dataset.n_spots
    if n < 2:
        raise ValidationError(f"training needs at least 2 spots, got {n}")
    if image_spec is None:
        image_spec = EncoderSpec(input_dim=dataset.features.shape[1])
    if expr_spec is None:
        expr_spec = EncoderSpec(input_dim=dataset.n_genes)
    if image_spec.input_dim != dataset.features.shape[1]:
        raise ShapeError(
            f"image encoder expects {image_spec.input_dim} features, "
            f"dataset has {dataset.features.shape[1]}"
        )
    if expr_spec.input_dim != dataset.n_genes:
        raise ShapeError(
            f"expression encoder expects {expr_spec.input_dim} genes, "
            f"dataset has {dataset.n_genes}"
        )

    warnings: list[str] = []
    batch = cfg.batch_size
    if batch > n:
        warnings.append(f"batch_size clamped from {batch} to {n} (dataset size)")
        batch = n

    rng = np.random.default_rng(cfg.seed)
    image_params = init_params(image_spec, rng)
    expr_params = init_params(expr_spec, rng)
    states = [
        AdamWState.fresh(p.shape, lr=cfg.learning_rate)
        for pair in (*image_params, *expr_params)
        for p in pair
    ]
    loss_cfg = LossConfig(temperature=cfg.temperature, objective=cfg.objective)

    loss_trace: list[float] = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        batch_losses: list[float] = []
        for start in range(0, n, batch):
            rows = perm[start : start + batch]
            if rows.size < 2:
                continue
            feats = dataset.features[rows]
            expr = dataset.expression[rows]
            img_emb, img_inputs, img_pre = _forward_cached(image_params, feats, workers)
            expr_emb, expr_inputs, expr_pre = _forward_cached(expr_params, expr, workers)
            out = contrastive_loss(img_emb, expr_emb, loss_cfg)
            if not np.isfinite(out.loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch + 1}, batch {start // batch + 1}"
                )
            batch_losses.append(out.loss)
            img_grads = _backward(image_params, img_inputs, img_pre, out.grad_img, workers)
            expr_grads = _backward(expr_params, expr_inputs, expr_pre, out.grad_expr, workers)

            flat_params = [p for pair in (*image_params, *expr_params) for p in pair]
            flat_grads = [g for pair in (*img_grads, *expr_grads) for g in pair]
            updated = [
                adamw_step(p, g, s) for p, g, s in zip(flat_params, flat_grads, states)
            ]
            image_params = [
                (updated[2 * i], updated[2 * i + 1]) for i in range(len(image_params))
            ]
            off = 2 * len(image_params)
            expr_params = [
                (updated[off + 2 * i], updated[off + 2 * i + 1])
                for i in range(len(expr_params))
            ]
        if not batch_losses:
            raise ValidationError("no trainable batches (all batches had size < 2)")
        loss_trace.append(float(np.mean(batch_losses)))

    return ModelCheckpoint(
        image_spec=image_spec,
        expr_spec=expr_spec,
        image_params=image_params,
        expr_params=expr_params,
        train_config=cfg,
        loss_trace=loss_trace,
        warnings=warnings,
    )
