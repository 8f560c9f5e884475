"""Sample/manifest files, writer-exclusive splitting, batching and a synthetic
pen-stroke generator.

File formats
------------
manifest
    CSV with header ``sample_path,label,writer_id``; relative sample paths are
    resolved against the manifest's directory.
sample
    CSV whose header row holds the channel names, followed by one row of
    decimal values per 100 Hz tick.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from os import PathLike
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .exceptions import ManifestError
from .labels import LABELS, LETTERS
from .preprocessing import ALL_CHANNELS, CalibrationTable, ProcessedSample, RawSample

__all__ = [
    "ManifestEntry",
    "SplitConfig",
    "Batch",
    "load_manifest",
    "write_manifest",
    "read_sample_csv",
    "write_sample_csv",
    "load_samples",
    "writer_exclusive_split",
    "make_batches",
    "synth_channel_names",
    "synth_calibration",
    "synth_generate",
]

MANIFEST_HEADER = ["sample_path", "label", "writer_id"]


@dataclass(frozen=True)
class ManifestEntry:
    sample_path: str
    label: str
    writer_id: str

    def __post_init__(self) -> None:
        if not self.sample_path:
            raise ValueError("sample_path must not be empty")
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")


def load_manifest(path: str | PathLike) -> list[ManifestEntry]:
    """Read a manifest; relative sample paths become paths next to the manifest."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestError(f"{path}: empty file, expected header {','.join(MANIFEST_HEADER)}")
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(f"{path}: expected header {','.join(MANIFEST_HEADER)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            sample_path, label, writer_id = (field.strip() for field in row)
            if label not in LABELS:
                raise ManifestError(f"{path}:{lineno}: unknown label {label!r}")
            if not sample_path or not writer_id:
                raise ManifestError(f"{path}:{lineno}: empty sample_path or writer_id")
            if not Path(sample_path).is_absolute():
                sample_path = str(path.parent / sample_path)
            entries.append(ManifestEntry(sample_path, label, writer_id))
    return entries


def write_manifest(entries: Iterable[ManifestEntry], path: str | PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for e in entries:
            writer.writerow([e.sample_path, e.label, e.writer_id])


def read_sample_csv(path: str | PathLike, writer_id: str = "unknown", label: str = "a") -> RawSample:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ManifestError(f"{path}: missing channel header")
        names = [h.strip() for h in header]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(names):
                raise ManifestError(f"{path}:{lineno}: expected {len(names)} values, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
    if len(rows) < 2:
        raise ManifestError(f"{path}: need at least 2 ticks, got {len(rows)}")
    values = np.array(rows, dtype=np.float64)
    if not np.isfinite(values).all():
        raise ManifestError(f"{path}: non-finite values")
    return RawSample({n: values[:, i] for i, n in enumerate(names)}, writer_id, label)


def write_sample_csv(sample: RawSample, path: str | PathLike) -> None:
    names = list(sample.channels)
    values = np.stack([sample.channels[n] for n in names], axis=1)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(names) + "\n")
        for row in values:
            fh.write(",".join(f"{v:.10g}" for v in row) + "\n")


def load_samples(entries: Sequence[ManifestEntry]) -> list[RawSample]:
    return [read_sample_csv(e.sample_path, e.writer_id, e.label) for e in entries]


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")


def writer_exclusive_split(entries: Sequence, config: SplitConfig = SplitConfig()) -> tuple[list, list]:
    """Partition items by ``writer_id`` so that no writer appears on both sides.

    Writers are sorted, shuffled with ``config.seed`` and the first
    ``round(train_fraction * n_writers)`` (half rounded up, clamped so each
    side keeps a writer) go to the training side.  Item order is preserved
    within each side.
    """
    writers = sorted({e.writer_id for e in entries})
    if len(writers) < 2:
        raise ValueError(f"need at least 2 distinct writers to split, got {len(writers)}")
    n_train = int(math.floor(config.train_fraction * len(writers) + 0.5))
    n_train = min(max(n_train, 1), len(writers) - 1)
    order = np.random.default_rng(config.seed).permutation(len(writers))
    train_writers = {writers[i] for i in order[:n_train]}
    train = [e for e in entries if e.writer_id in train_writers]
    test = [e for e in entries if e.writer_id not in train_writers]
    return train, test


@dataclass
class Batch:
    x: Tensor
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


def make_batches(samples: Sequence[ProcessedSample], batch_size: int,
                 shuffle_seed: Optional[int] = None) -> list[Batch]:
    """Group samples into ``[B, C, T]`` batches; the last batch may be short.

    ``shuffle_seed=None`` keeps the input order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not samples:
        raise ValueError("cannot batch an empty sample list")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    batches = []
    for start in range(0, len(samples), batch_size):
        chosen = [samples[i] for i in order[start : start + batch_size]]
        x = Tensor(np.stack([s.data for s in chosen]))
        y = np.array([s.label_index for s in chosen], dtype=np.int64)
        batches.append(Batch(x, y))
    return batches


# -- synthetic data ------------------------------------------------------------

# typical amplitude per channel group, in the units a pen would report
_GROUP_SCALE = {"a": 1.5, "g": 90.0, "m": 20.0, "force": 250.0, "aux": 0.5}


def synth_channel_names(channels: int = 15) -> list[str]:
    if channels < 1:
        raise ValueError("channels must be >= 1")
    names = list(ALL_CHANNELS[:channels])
    names += [f"aux{i}" for i in range(3, channels - len(ALL_CHANNELS) + 3)]
    return names


def _group_scale(name: str) -> float:
    if name.startswith("aux"):
        return _GROUP_SCALE["aux"]
    if name == "force":
        return _GROUP_SCALE["force"]
    return _GROUP_SCALE.get(name[0], 1.0)


def synth_calibration(channel_names: Sequence[str], seed: int) -> CalibrationTable:
    """Random per-channel bias and scale used to distort synthetic raw values."""
    rng = np.random.default_rng([seed, 7])
    entries = {}
    for name in channel_names:
        scale = float(rng.uniform(0.5, 2.0))
        bias = float(rng.normal(0.0, 0.2 * _group_scale(name)))
        entries[name] = (round(bias, 6), round(scale, 6))
    return CalibrationTable(entries)


def synth_generate(
    n_writers: int,
    samples_per_class_per_writer: int,
    channels: int = 15,
    length: int = 200,
    seed: int = 0,
    noise: bool = True,
    calibration: Optional[CalibrationTable] = None,
) -> tuple[list[RawSample], list[ManifestEntry]]:
    """Generate labelled pen-like recordings for all 52 letters.

    Every class gets a fixed per-channel pair of sinusoids (frequency, phase,
    amplitude) drawn from a class-seeded generator.  Every writer applies a
    per-channel gain and a slow offset drift.  White noise at 10% of each
    channel's RMS is added and lengths vary by up to 25% around ``length``.
    When ``calibration`` is given the values are stored uncalibrated, i.e.
    ``raw = v / scale + bias``, so applying the table recovers them.

    Manifest paths are relative: ``samples/<writer>_<class>_<i>.csv``.
    """
    if min(n_writers, samples_per_class_per_writer, channels, length) < 1:
        raise ValueError("all synth parameters must be >= 1")
    names = synth_channel_names(channels)
    scales = np.array([_group_scale(n) for n in names])
    n_cls = len(LETTERS)
    C = len(names)

    signatures = []
    for k in range(n_cls):
        rng = np.random.default_rng([seed, 1, k])
        freq = rng.uniform(0.5, 4.0, size=(C, 2))
        phase = rng.uniform(0.0, 2 * np.pi, size=(C, 2))
        amp = rng.uniform(0.3, 1.0, size=(C, 2)) * scales[:, None]
        signatures.append((freq, phase, amp))

    writers = []
    for w in range(n_writers):
        rng = np.random.default_rng([seed, 2, w])
        gain = rng.uniform(0.85, 1.15, size=C)
        drift_freq = rng.uniform(0.1, 0.5, size=C)
        drift_phase = rng.uniform(0.0, 2 * np.pi, size=C)
        drift_amp = 0.1 * scales * rng.uniform(0.0, 1.0, size=C)
        offset = 0.1 * scales * rng.normal(size=C)
        writers.append((gain, drift_freq, drift_phase, drift_amp, offset))

    samples, manifest = [], []
    for w, (gain, drift_freq, drift_phase, drift_amp, offset) in enumerate(writers):
        writer_id = f"w{w:03d}"
        for k in range(n_cls):
            freq, phase, amp = signatures[k]
            for i in range(samples_per_class_per_writer):
                rng = np.random.default_rng([seed, 3, w, k, i])
                n = max(2, int(round(length * rng.uniform(0.75, 1.25))))
                t = np.arange(n) / n
                clean = (amp[:, :, None] * np.sin(2 * np.pi * freq[:, :, None] * t + phase[:, :, None])).sum(axis=1)
                clean = gain[:, None] * clean
                clean += drift_amp[:, None] * np.sin(2 * np.pi * drift_freq[:, None] * t + drift_phase[:, None])
                clean += offset[:, None]
                if noise:
                    rms = np.sqrt((clean * clean).mean(axis=1, keepdims=True))
                    clean = clean + 0.1 * rms * rng.standard_normal(clean.shape)
                chans = {}
                for c, name in enumerate(names):
                    series = clean[c]
                    if calibration is not None:
                        bias, scale = calibration.get(name)
                        series = series / scale + bias
                    chans[name] = series
                label = LETTERS[k]
                samples.append(RawSample(chans, writer_id, label))
                manifest.append(ManifestEntry(f"samples/{writer_id}_{k:02d}_{i}.csv", label, writer_id))
    return samples, manifest
