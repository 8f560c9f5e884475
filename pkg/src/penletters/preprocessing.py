"""Turn raw pen recordings into fixed-shape arrays for the network.

The pipeline per sample is: calibrate (bias/scale) -> keep the configured
channels (the magnetometer is dropped by default) -> gyroscope degrees to
radians -> Fourier resampling to a common length -> signed-log scaling.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from os import PathLike
from typing import Optional, Sequence

import numpy as np

from .exceptions import ManifestError, ShapeError
from .labels import LETTERS

__all__ = [
    "ALL_CHANNELS",
    "DEFAULT_KEEP",
    "GYRO_CHANNELS",
    "RawSample",
    "CalibrationTable",
    "PreprocConfig",
    "ProcessedSample",
    "apply_calibration",
    "deg_to_rad",
    "fourier_resample",
    "signed_log",
    "signed_exp",
    "preprocess",
]

ACCEL_CHANNELS = ("a1x", "a1y", "a1z", "a2x", "a2y", "a2z")
GYRO_CHANNELS = ("gx", "gy", "gz")
MAG_CHANNELS = ("mx", "my", "mz")
# front/rear accelerometers, gyroscope, magnetometer, force and two auxiliary columns
ALL_CHANNELS = ACCEL_CHANNELS + GYRO_CHANNELS + MAG_CHANNELS + ("force", "aux1", "aux2")
DEFAULT_KEEP = tuple(c for c in ALL_CHANNELS if c not in MAG_CHANNELS)



@dataclass
class RawSample:
    """One recording: channel name -> series sampled at 100 Hz."""

    channels: dict[str, np.ndarray]
    writer_id: str
    label: str

    def __post_init__(self) -> None:
        if len(self.label) != 1 or self.label not in LETTERS:
            raise ValueError(f"label must be one of the 52 letters, got {self.label!r}")
        if not self.channels:
            raise ValueError("sample has no channels")
        self.channels = {k: np.asarray(v, dtype=np.float64) for k, v in self.channels.items()}
        lengths = {v.shape for v in self.channels.values()}
        if len(lengths) != 1 or len(next(iter(lengths))) != 1:
            raise ShapeError(f"channels must be 1-D series of one common length, got shapes {lengths}")
        if self.length < 2:
            raise ShapeError(f"sample needs at least 2 ticks, got {self.length}")

    @property
    def length(self) -> int:
        return next(iter(self.channels.values())).shape[0]


@dataclass
class CalibrationTable:
    """Per-channel ``(bias, scale)``; calibrated value is ``(v - bias) * scale``."""

    entries: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, (_, scale) in self.entries.items():
            if scale == 0:
                raise ValueError(f"calibration scale for channel {name!r} is zero")

    def get(self, channel: str) -> tuple[float, float]:
        return self.entries.get(channel, (0.0, 1.0))

    @classmethod
    def from_csv(cls, path: str | PathLike) -> "CalibrationTable":
        """Read a ``channel,bias,scale`` CSV file."""
        entries = {}
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["channel", "bias", "scale"]:
                raise ManifestError(f"{path}: expected header 'channel,bias,scale', got {header}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 3:
                    raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
                try:
                    bias, scale = float(row[1]), float(row[2])
                except ValueError as exc:
                    raise ManifestError(f"{path}:{lineno}: {exc}") from None
                if scale == 0:
                    raise ManifestError(f"{path}:{lineno}: scale for {row[0]!r} is zero")
                entries[row[0].strip()] = (bias, scale)
        return cls(entries)

    def to_csv(self, path: str | PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["channel", "bias", "scale"])
            for name, (bias, scale) in self.entries.items():
                writer.writerow([name, repr(float(bias)), repr(float(scale))])


@dataclass(frozen=True)
class PreprocConfig:
    keep_channels: tuple[str, ...] = DEFAULT_KEEP
    gyro_channels: tuple[str, ...] = GYRO_CHANNELS
    target_length: int = 256
    apply_log: bool = True
    calibration: Optional[CalibrationTable] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "keep_channels", tuple(self.keep_channels))
        object.__setattr__(self, "gyro_channels", tuple(self.gyro_channels))
        if not self.keep_channels:
            raise ValueError("keep_channels must not be empty")
        if len(set(self.keep_channels)) != len(self.keep_channels):
            raise ValueError("keep_channels contains duplicates")
        missing = set(self.gyro_channels) - set(self.keep_channels)
        if missing:
            raise ValueError(f"gyro channels {sorted(missing)} are not in keep_channels")
        if self.target_length < 2:
            raise ValueError("target_length must be >= 2")

    def to_dict(self) -> dict:
        return {
            "keep_channels": list(self.keep_channels),
            "gyro_channels": list(self.gyro_channels),
            "target_length": self.target_length,
            "apply_log": self.apply_log,
        }


@dataclass
class ProcessedSample:
    """Fixed-shape ``[len(keep_channels), target_length]`` array with its label."""

    data: np.ndarray
    label_index: int
    writer_id: str


def apply_calibration(raw: RawSample, calib: CalibrationTable) -> RawSample:
    """Return a new sample with ``(v - bias) * scale`` applied per channel.

    Channels absent from ``calib`` are passed through unchanged.
    """
    out = {}
    for name, series in raw.channels.items():
        bias, scale = calib.get(name)
        if scale == 0:
            raise ValueError(f"calibration scale for channel {name!r} is zero")
        out[name] = (series - bias) * scale
    return RawSample(out, raw.writer_id, raw.label)


def deg_to_rad(series: Sequence[float] | np.ndarray) -> np.ndarray:
    return np.asarray(series, dtype=np.float64) * (math.pi / 180.0)


def fourier_resample(series: Sequence[float] | np.ndarray, target: int) -> np.ndarray:
    """Resample along the last axis to ``target`` points by spectral truncation
    or zero-padding.

    The spectrum is cut (or padded) symmetrically around DC.  When the shorter
    of the two lengths is even its Nyquist bin is shared: on downsampling the
    two folded bins are merged, on upsampling the source Nyquist bin is split
    evenly over the positive and negative frequency.  Amplitudes are rescaled
    by ``target / n`` so a constant stays the same constant.
    """
    x = np.asarray(series, dtype=np.float64)
    n = x.shape[-1]
    if n < 2 or target < 2:
        raise ValueError(f"fourier_resample needs n >= 2 and target >= 2, got n={n}, target={target}")
    spec = np.fft.rfft(x, axis=-1)
    out = np.zeros(x.shape[:-1] + (target // 2 + 1,), dtype=spec.dtype)
    m = min(n, target)
    keep = m // 2 + 1
    out[..., :keep] = spec[..., :keep]
    if m % 2 == 0:
        if target < n:
            # irfft reads only the real part, which is the sum of the two folded bins
            out[..., m // 2] *= 2.0
        elif target > n:
            out[..., m // 2] *= 0.5
    return np.fft.irfft(out, n=target, axis=-1) * (target / n)


def signed_log(series: Sequence[float] | np.ndarray) -> np.ndarray:
    """``sign(x) * ln(|x| + 1)``."""
    x = np.asarray(series, dtype=np.float64)
    return np.sign(x) * np.log1p(np.abs(x))


def signed_exp(series: Sequence[float] | np.ndarray) -> np.ndarray:
    """Inverse of :func:`signed_log`."""
    x = np.asarray(series, dtype=np.float64)
    return np.sign(x) * np.expm1(np.abs(x))


def preprocess(raw: RawSample, config: PreprocConfig = PreprocConfig(),
               label_index: Optional[int] = None) -> ProcessedSample:
    """Run the full per-sample pipeline; output rows follow ``config.keep_channels``."""
    missing = [c for c in config.keep_channels if c not in raw.channels]
    if missing:
        raise KeyError(f"sample from writer {raw.writer_id!r} lacks channels {missing}")
    if raw.length < 2:
        raise ShapeError(f"sample needs at least 2 ticks, got {raw.length}")
    if config.calibration is not None:
        raw = apply_calibration(raw, config.calibration)
    gyro = set(config.gyro_channels)
    rows = []
    for name in config.keep_channels:
        series = raw.channels[name]
        rows.append(deg_to_rad(series) if name in gyro else series)
    data = fourier_resample(np.stack(rows), config.target_length)
    if config.apply_log:
        data = signed_log(data)
    if not np.isfinite(data).all():
        raise ValueError(f"non-finite values after preprocessing sample from writer {raw.writer_id!r}")
    if label_index is None:
        label_index = LETTERS.index(raw.label)
    return ProcessedSample(data, label_index, raw.writer_id)


def preprocess_many(samples: Sequence[RawSample], config: PreprocConfig = PreprocConfig()) -> list[ProcessedSample]:
    return [preprocess(s, config) for s in samples]

