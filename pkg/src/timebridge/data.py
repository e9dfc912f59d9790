"""Series ingestion, windowing, min-max scaling, masks and toy data."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

BATCH_MAGIC = b"TBDAT1"
BATCH_VERSION = 1
# magic(6) version(u16) n(u32) tau(u16) d(u16) -> 16 bytes
_HEADER = struct.Struct("<6sHIHH")


class DataError(ValueError):
    pass


@dataclass
class Normalization:
    min: np.ndarray
    max: np.ndarray

    def to_json(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Normalization":
        return cls(np.asarray(obj["min"], dtype=np.float64), np.asarray(obj["max"], dtype=np.float64))


@dataclass
class TimeSeriesBatch:
    values: np.ndarray  # (n, tau, d)
    norm: Normalization | None = None
    source: str = ""
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DataError(f"batch must be (n, tau, d), got {self.values.shape}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def window_shape(self) -> tuple[int, int]:
        return self.values.shape[1:]

    def __len__(self):
        return self.n


@dataclass(frozen=True)
class MaskSpec:
    kind: str = "random"
    ratio: float = 0.5
    mean_segment: float = 3.0
    seed: int = 0


def load_csv(path, skip_first_column: bool = False):
    """Read a header + numeric rows CSV into an (L, d) array and feature names."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if skip_first_column:
            header = header[1:]
        d = len(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if skip_first_column:
                row = row[1:]
            if len(row) != d:
                raise DataError(f"{path}:{lineno}: expected {d} fields, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64), [h.strip() for h in header]


def write_csv(path, series, feature_names=None):
    series = np.asarray(series, dtype=np.float64)
    names = feature_names or [f"feature_{j}" for j in range(series.shape[1])]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in series:
            w.writerow([repr(float(v)) for v in row])


def chrono_split(series, train_frac: float = 0.9):
    series = np.asarray(series)
    cut = int(round(train_frac * len(series)))
    return series[:cut], series[cut:]


def window(series, tau: int, stride: int = 1) -> np.ndarray:
    series = np.asarray(series, dtype=np.float64)
    L = series.shape[0]
    if tau < 1 or stride < 1:
        raise DataError("tau and stride must be positive")
    if L < tau:
        raise DataError(f"series length {L} shorter than window {tau}")
    starts = np.arange(0, L - tau + 1, stride)
    return np.stack([series[s : s + tau] for s in starts])


def fit_normalization(values, feature_names=None) -> Normalization:
    x = np.asarray(values, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    lo, hi = flat.min(axis=0), flat.max(axis=0)
    const = np.flatnonzero(~(lo < hi))
    if const.size:
        j = int(const[0])
        name = feature_names[j] if feature_names else f"feature_{j}"
        raise DataError(f"constant feature {name!r} cannot be min-max scaled")
    return Normalization(lo, hi)


def normalize(batch: TimeSeriesBatch, norm: Normalization | None = None) -> TimeSeriesBatch:
    """Scale to [0, 1]; ``norm`` defaults to statistics of ``batch`` itself."""
    if norm is None:
        norm = fit_normalization(batch.values, batch.feature_names)
    vals = (batch.values - norm.min) / (norm.max - norm.min)
    return replace(batch, values=vals, norm=norm)


def denormalize(batch: TimeSeriesBatch, norm: Normalization | None = None) -> TimeSeriesBatch:
    norm = norm or batch.norm
    if norm is None:
        raise DataError("batch carries no normalization")
    vals = batch.values * (norm.max - norm.min) + norm.min
    return replace(batch, values=vals, norm=None)


def make_mask(shape, spec: MaskSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Binary mask with 1 on cells to generate (missing) and 0 on kept cells.

    ``random`` is i.i.d. Bernoulli(ratio). ``geometric`` runs a two-state
    Markov chain down each feature column so that masked runs have mean
    length ``mean_segment`` and the stationary masked fraction is ``ratio``.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    r = spec.ratio
    if not 0.0 <= r < 1.0:
        raise ValueError("mask ratio must lie in [0, 1)")
    shape = tuple(shape)
    if r == 0.0:
        return np.zeros(shape)
    if spec.kind == "random":
        return (rng.random(shape) < r).astype(np.float64)
    if spec.kind != "geometric":
        raise ValueError(f"unknown mask kind {spec.kind!r}")

    lm = spec.mean_segment
    p_leave_masked = 1.0 / lm
    p_enter_masked = r / (lm * (1.0 - r))
    if not (0 < p_leave_masked <= 1 and 0 < p_enter_masked <= 1):
        raise ValueError(f"ratio={r}, mean_segment={lm} give transition probabilities outside (0, 1]")

    tau = shape[-2]
    cols = shape[:-2] + shape[-1:]
    state = rng.random(cols) < r
    u = rng.random((tau,) + cols)
    out = np.empty((tau,) + cols, dtype=bool)
    for k in range(tau):
        out[k] = state
        flip = np.where(state, u[k] < p_leave_masked, u[k] < p_enter_masked)
        state = state ^ flip
    return np.moveaxis(out, 0, -2).astype(np.float64)


def toy_sines(n: int, tau: int, d: int, rng: np.random.Generator) -> TimeSeriesBatch:
    """Sines with random frequency (1-5 cycles per window) and phase, in [0, 1]."""
    freq = rng.uniform(1.0, 5.0, size=(n, 1, d))
    phase = rng.uniform(0.0, 2 * np.pi, size=(n, 1, d))
    k = np.arange(tau)[None, :, None]
    x = 0.5 * (np.sin(2 * np.pi * freq * k / tau + phase) + 1.0)
    return TimeSeriesBatch(x, norm=None, source="toy_sines")


def save_batch(path, values):
    values = np.ascontiguousarray(values, dtype="<f8")
    n, tau, d = values.shape
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(BATCH_MAGIC, BATCH_VERSION, n, tau, d))
        fh.write(values.tobytes(order="C"))


def load_batch(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, n, tau, d = _HEADER.unpack_from(raw)
    if magic != BATCH_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != BATCH_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    body = raw[_HEADER.size :]
    if len(body) != 8 * n * tau * d:
        raise DataError(f"{path}: expected {n * tau * d} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(n, tau, d).copy()


def save_norm(path, norm: Normalization, feature_names=None):
    obj = norm.to_json()
    if feature_names:
        obj["features"] = list(feature_names)
    Path(path).write_text(json.dumps(obj, indent=2))


def load_norm(path) -> Normalization:
    return Normalization.from_json(json.loads(Path(path).read_text()))
