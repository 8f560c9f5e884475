"""Optimisation loop, evaluation, metric files and checkpoints.

Checkpoint layout::

    penletters-checkpoint 1
    spec_digest <sha256 of the model spec JSON>
    spec <model spec JSON>
    meta <free-form JSON, e.g. preprocessing settings>
    tensor <name> <dim,dim,...> <byte offset> <element count>
    ...
    end
    <little-endian float32 payload><crc32 of the payload, little-endian uint32>
"""

from __future__ import annotations

import csv
import json
import logging
import zlib
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .autodiff import Tensor, backward, get_dtype, no_grad
from .dataset import Batch, make_batches
from .exceptions import CheckpointError, ChecksumError, NumericalError, SpecMismatchError
from .functional import cross_entropy
from .labels import LABELS
from .model import CNNLSTMNet, ModelSpec
from .preprocessing import ProcessedSample

__all__ = [
    "AdamState",
    "TrainConfig",
    "ConfusionMatrix",
    "MetricsRow",
    "EvalResult",
    "FitResult",
    "adam_step",
    "train_epoch",
    "evaluate",
    "fit",
    "checkpoint_save",
    "checkpoint_load",
    "read_checkpoint_header",
    "write_metrics_csv",
]

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "penletters-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class AdamState:
    """Adam moments and hyper-parameters.

    Weight decay is the coupled L2 form: ``weight_decay * param`` is added to
    the gradient before the moment updates.
    """

    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-3
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Optional[np.ndarray]],
              state: AdamState) -> AdamState:
    """One in-place Adam update of every tensor in ``params``.

    A missing gradient counts as zero.  Raises :class:`NumericalError` naming
    the parameter if a gradient is not finite; no parameter is touched then.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is not None:
            if np.shape(g) != p.shape:
                raise ValueError(f"gradient for {name} has shape {np.shape(g)}, parameter {p.shape}")
            if not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype)
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - state.lr * step).astype(p.dtype, copy=False)
    return state


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 64
    seed: int = 0
    checkpoint_every: int = 50
    eval_every: int = 1
    lr: float = 3e-5
    weight_decay: float = 1e-3
    final_epoch: Optional[int] = None

    def __post_init__(self) -> None:
        for name in ("epochs", "batch_size", "checkpoint_every", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if self.final_epoch is not None and not 1 <= self.final_epoch <= self.epochs:
            raise ValueError(f"final_epoch must lie in [1, {self.epochs}]")

    def adam(self) -> AdamState:
        return AdamState(lr=self.lr, weight_decay=self.weight_decay)


class ConfusionMatrix:
    """Counts indexed ``[true class, predicted class]``."""

    def __init__(self, n_classes: int = 52) -> None:
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, true: Sequence[int], pred: Sequence[int]) -> None:
        np.add.at(self.counts, (np.asarray(true), np.asarray(pred)), 1)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    def to_csv(self, path: str | PathLike) -> None:
        """Header of class letters, then one row of counts per true class."""
        n = self.counts.shape[0]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([LABELS.char(i) for i in range(n)])
            writer.writerows(self.counts.tolist())

    @classmethod
    def from_csv(cls, path: str | PathLike) -> "ConfusionMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        cm = cls(len(rows[0]))
        cm.counts[:] = np.array([[int(v) for v in r] for r in rows[1:]], dtype=np.int64)
        return cm


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: Optional[float] = None
    test_acc: Optional[float] = None


METRICS_HEADER = ["epoch", "train_loss", "train_acc", "test_loss", "test_acc"]


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else repr(float(v))


def _metrics_line(row: MetricsRow) -> list[str]:
    return [str(row.epoch), _fmt(row.train_loss), _fmt(row.train_acc), _fmt(row.test_loss), _fmt(row.test_acc)]


def write_metrics_csv(rows: Sequence[MetricsRow], path: str | PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        writer.writerows(_metrics_line(r) for r in rows)


def read_metrics_csv(path: str | PathLike) -> list[MetricsRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            def opt(key: str) -> Optional[float]:
                return float(rec[key]) if rec[key] else None

            rows.append(MetricsRow(int(rec["epoch"]), float(rec["train_loss"]), float(rec["train_acc"]),
                                   opt("test_loss"), opt("test_acc")))
    return rows


def train_epoch(model: CNNLSTMNet, batches: Sequence[Batch], state: AdamState) -> tuple[float, float]:
    """Forward, loss, backward and one Adam step per batch.

    Returns the sample-weighted mean loss and accuracy seen during the epoch
    (computed with the parameters in effect for each batch).
    """
    if not batches:
        raise ValueError("train_epoch needs at least one batch")
    model.train()
    params = dict(model.named_parameters())
    total_loss, correct, seen = 0.0, 0, 0
    for batch in batches:
        model.zero_grad()
        logits = model(batch.x)
        loss = cross_entropy(logits, batch.y)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(f"non-finite training loss {value}")
        backward(loss)
        adam_step(params, {n: p.grad for n, p in params.items()}, state)
        n = len(batch)
        total_loss += value * n
        correct += int((np.argmax(logits.data, axis=1) == batch.y).sum())
        seen += n
    model.zero_grad()
    return total_loss / seen, correct / seen


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    confusion: ConfusionMatrix


def predict_logits(model: CNNLSTMNet, x: Tensor) -> np.ndarray:
    model.eval()
    with no_grad():
        return model(x).data


def evaluate(model: CNNLSTMNet, batches: Sequence[Batch]) -> EvalResult:
    """Eval-mode loss, accuracy and confusion matrix; ties in argmax go to the
    lowest class index."""
    cm = ConfusionMatrix(model.spec.class_count)
    total_loss, seen = 0.0, 0
    model.eval()
    with no_grad():
        for batch in batches:
            logits = model(batch.x)
            total_loss += cross_entropy(logits, batch.y).item() * len(batch)
            cm.update(batch.y, np.argmax(logits.data, axis=1))
            seen += len(batch)
    return EvalResult(total_loss / seen if seen else float("nan"), cm.accuracy(), cm)


@dataclass
class FitResult:
    model: CNNLSTMNet
    metrics: list[MetricsRow]
    checkpoints: dict[int, Path]
    final_checkpoint: Optional[Path]
    final_epoch: int
    confusion: Optional[ConfusionMatrix] = None


def fit(
    train: Sequence[ProcessedSample],
    test: Sequence[ProcessedSample],
    spec: ModelSpec,
    config: TrainConfig,
    out_dir: Optional[str | PathLike] = None,
    meta: Optional[dict] = None,
) -> FitResult:
    """Train from a seeded initialisation and log one metrics row per epoch.

    ``train_loss``/``train_acc`` come from an eval-mode pass over the whole
    training set after the epoch's updates; test columns are filled every
    ``eval_every`` epochs and on the final epoch when ``test`` is non-empty
    (an empty ``test`` is the retrain-on-everything mode).  With ``out_dir``
    set, ``metrics.csv`` is rewritten each epoch, checkpoints go to
    ``out_dir/checkpoints`` every ``checkpoint_every`` epochs plus the final
    epoch, and the test confusion matrix of the final epoch is written to
    ``confusion_matrix.csv``.
    """
    if not train:
        raise ValueError("fit needs a non-empty training set")
    model = CNNLSTMNet(spec, seed=config.seed)
    state = config.adam()
    final_epoch = config.final_epoch or config.epochs
    eval_train = make_batches(train, config.batch_size)
    eval_test = make_batches(test, config.batch_size) if test else []
    out = Path(out_dir) if out_dir is not None else None
    ckpt_dir = None
    if out is not None:
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    metrics: list[MetricsRow] = []
    checkpoints: dict[int, Path] = {}
    confusion = None
    for epoch in range(1, config.epochs + 1):
        batches = make_batches(train, config.batch_size, shuffle_seed=[config.seed, epoch])
        train_epoch(model, batches, state)
        tr = evaluate(model, eval_train)
        row = MetricsRow(epoch, tr.loss, tr.accuracy)
        if eval_test and (epoch % config.eval_every == 0 or epoch == final_epoch):
            te = evaluate(model, eval_test)
            row.test_loss, row.test_acc = te.loss, te.accuracy
            if epoch == final_epoch:
                confusion = te.confusion
        if not np.isfinite(row.train_loss):
            raise NumericalError(f"non-finite loss at epoch {epoch}")
        metrics.append(row)
        logger.info("epoch %d train_loss %.5f train_acc %.4f test_acc %s", epoch, row.train_loss,
                    row.train_acc, "" if row.test_acc is None else f"{row.test_acc:.4f}")
        if out is not None:
            write_metrics_csv(metrics, out / "metrics.csv")
            if epoch % config.checkpoint_every == 0 or epoch in (final_epoch, config.epochs):
                path = ckpt_dir / f"epoch_{epoch:04d}.ckpt"
                checkpoint_save(model, path, meta)
                checkpoints[epoch] = path
            if epoch == final_epoch and confusion is not None:
                confusion.to_csv(out / "confusion_matrix.csv")
    return FitResult(model, metrics, checkpoints, checkpoints.get(final_epoch), final_epoch, confusion)


# -- checkpoints -----------------------------------------------------------------


def _state_arrays(model: CNNLSTMNet) -> list[tuple[str, np.ndarray]]:
    items = [(name, p.data) for name, p in model.named_parameters()]
    items += list(model.named_buffers())
    return items


def checkpoint_save(model: CNNLSTMNet, path: str | PathLike, meta: Optional[dict] = None) -> None:
    """Write every parameter and running statistic as float32."""
    arrays = _state_arrays(model)
    lines = [
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
        f"spec_digest {model.spec.digest()}",
        f"spec {model.spec.to_json()}",
        f"meta {json.dumps(meta or {}, sort_keys=True, separators=(',', ':'))}",
    ]
    chunks = []
    offset = 0
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        dims = ",".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {dims} {offset} {arr.size}")
        chunks.append(data)
        offset += len(data)
    lines.append("end")
    payload = b"".join(chunks)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        fh.write(payload)
        fh.write(crc.to_bytes(4, "little"))
    tmp.replace(path)


@dataclass
class CheckpointHeader:
    spec: ModelSpec
    digest: str
    meta: dict
    tensors: list[tuple[str, tuple[int, ...], int, int]]
    payload_start: int


def read_checkpoint_header(path: str | PathLike) -> CheckpointHeader:
    with open(path, "rb") as fh:
        raw = fh.read()
    return _parse_header(raw, path)


def _parse_header(raw: bytes, path) -> CheckpointHeader:
    end = raw.find(b"\nend\n")
    if end < 0:
        raise CheckpointError(f"{path}: truncated or malformed checkpoint header")
    try:
        lines = raw[:end].decode("utf-8").split("\n")
        magic, version = lines[0].split(" ")
        if magic != CHECKPOINT_MAGIC or int(version) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported format {lines[0]!r}")
        fields = {}
        tensors = []
        for line in lines[1:]:
            key, _, rest = line.partition(" ")
            if key == "tensor":
                name, dims, offset, count = rest.split(" ")
                shape = tuple(int(d) for d in dims.split(",")) if dims else ()
                tensors.append((name, shape, int(offset), int(count)))
            else:
                fields[key] = rest
        spec = ModelSpec.from_dict(json.loads(fields["spec"]))
        meta = json.loads(fields.get("meta", "{}"))
        digest = fields["spec_digest"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint header ({exc})") from None
    if spec.digest() != digest:
        raise CheckpointError(f"{path}: header spec does not match its digest")
    return CheckpointHeader(spec, digest, meta, tensors, end + len(b"\nend\n"))


def checkpoint_load(path: str | PathLike, spec: Optional[ModelSpec] = None) -> CNNLSTMNet:
    """Rebuild a model from ``path``; ``spec`` (if given) must match the stored one."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    header = _parse_header(raw, path)
    if spec is not None and spec.digest() != header.digest:
        raise SpecMismatchError(f"{path}: checkpoint was written for a different model spec")
    payload_len = sum(count * 4 for _, _, _, count in header.tensors)
    body = raw[header.payload_start:]
    if len(body) != payload_len + 4:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(body)} of {payload_len + 4} payload bytes)")
    payload = body[:payload_len]
    if zlib.crc32(payload) & 0xFFFFFFFF != int.from_bytes(body[payload_len:], "little"):
        raise ChecksumError(f"{path}: payload checksum mismatch")

    model = CNNLSTMNet(header.spec)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = set(params) | set(buffers)
    stored = {name for name, *_ in header.tensors}
    if stored != expected:
        raise SpecMismatchError(f"{path}: tensor names differ from the model ({sorted(stored ^ expected)})")
    dtype = get_dtype()
    for name, shape, offset, count in header.tensors:
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        if name in params:
            if params[name].shape != shape:
                raise SpecMismatchError(f"{path}: tensor {name} has shape {shape}, model expects {params[name].shape}")
            params[name].data = arr.astype(dtype)
        else:
            buffers[name][...] = arr
    return model
