"""Data pipeline: ingestion, cleaning, windowing, splits, synthetic traffic.

Speed series are dense (T, N) float arrays with a boolean missing mask.
Window extraction follows the multi-granularity scheme: the raw stream keeps
the last Q slices, while the hourly, daily, and weekly streams keep t_X
blocks of H consecutive slices, one block per periodic offset.
"""

from __future__ import annotations

import csv
import datetime as _dt
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, ValidationError

MINUTES_PER_HOUR = 60
HOURS_PER_DAY = 24
DAYS_PER_WEEK = 7
GRANULARITIES = ("h", "d", "w")
WINDOW_STYLES = ("block", "stride")


@dataclass(frozen=True)
class SpeedSeries:
    """Gap-free series: `values[t, i]` is node i's speed in slice t."""

    timestamps: np.ndarray  # (T,) int64, strictly increasing, unit spacing
    values: np.ndarray      # (T, N) float64
    missing: np.ndarray     # (T, N) bool

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValidationError(
                f"values must be (T, N), got {self.values.shape}")
        if self.timestamps.shape != (self.values.shape[0],):
            raise ValidationError("timestamps and values disagree on length")
        if self.missing.shape != self.values.shape:
            raise ValidationError("missing mask and values disagree on shape")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) != 1):
            raise ValidationError("timestamps must be gap-free after cleaning")
        present = self.values[~self.missing]
        if present.size and not np.all(np.isfinite(present)):
            raise ValidationError("present values must be finite")

    @property
    def n_slices(self):
        return self.values.shape[0]

    @property
    def n_nodes(self):
        return self.values.shape[1]


def granularity_strides(p):
    """Slices per hour, day, and week for a p-minute sampling period."""
    if p < 1 or MINUTES_PER_HOUR % p != 0:
        raise ValidationError(
            f"p must divide {MINUTES_PER_HOUR} minutes, got {p}")
    s_h = MINUTES_PER_HOUR // p
    s_d = HOURS_PER_DAY * s_h
    s_w = DAYS_PER_WEEK * s_d
    return s_h, s_d, s_w


@dataclass(frozen=True)
class GranularitySpec:
    """Window geometry: sampling period, history length, enabled streams."""

    p: int
    q: int
    h: int
    mask: frozenset
    window_style: str = "block"

    def __post_init__(self):
        strides = dict(zip(GRANULARITIES, granularity_strides(self.p)))
        if self.q < 1 or self.h < 1:
            raise ValidationError("q and h must be positive")
        unknown = set(self.mask) - set(GRANULARITIES)
        if unknown:
            raise ValidationError(
                f"unknown granularities in mask: {sorted(unknown)}")
        if self.window_style not in WINDOW_STYLES:
            raise ValidationError(
                f"window_style must be one of {WINDOW_STYLES}, "
                f"got {self.window_style!r}")
        for tag in sorted(self.mask):
            stride = strides[tag]
            if self.q % stride != 0:
                raise ValidationError(
                    f"q={self.q} must be divisible by the {tag!r} stride "
                    f"{stride}")
            if self.window_style == "block" and self.h > stride:
                raise ValidationError(
                    f"h={self.h} exceeds the {tag!r} stride {stride}; "
                    f"blocks would leak future slices")

    @classmethod
    def build(cls, p, h, mask=("h", "d", "w"), q=None, window_style="block"):
        mask = frozenset(mask)
        if q is None:
            s_h, s_d, s_w = granularity_strides(p)
            q = 2 * s_w if "w" in mask else 2 * s_d
        return cls(p=p, q=q, h=h, mask=mask, window_style=window_style)

    @property
    def strides(self):
        s_h, s_d, s_w = granularity_strides(self.p)
        return {"h": s_h, "d": s_d, "w": s_w}

    def t_count(self, tag):
        if tag not in self.mask:
            return None
        return self.q // self.strides[tag]


@dataclass(frozen=True)
class WindowedSample:
    """One training sample anchored at slice t0 (all arrays time-major)."""

    t0: int
    x_m: np.ndarray            # (Q, N)
    x_h: np.ndarray | None     # (t_h, H, N)
    x_d: np.ndarray | None     # (t_d, H, N)
    x_w: np.ndarray | None     # (t_w, H, N)
    target: np.ndarray         # (H, N)

    def stream(self, tag):
        return {"m": self.x_m, "h": self.x_h, "d": self.x_d,
                "w": self.x_w}[tag]


@dataclass(frozen=True)
class NormStats:
    """Per-node normalization constants fitted on the training split."""

    mean: np.ndarray
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.std is not None and np.any(self.std <= 0):
            raise ValidationError("std must be positive where used")

    def apply(self, values):
        out = values - self.mean
        if self.std is not None:
            out = out / self.std
        return out

    def invert(self, values):
        out = values
        if self.std is not None:
            out = out * self.std
        return out + self.mean


# -- ingestion ----------------------------------------------------------------


def _parse_timestamp_column(raw, path):
    """Integer slice indices, or uniform ISO-8601 stamps mapped to indices."""
    try:
        return np.array([int(value) for value in raw], dtype=np.int64)
    except ValueError:
        pass
    try:
        stamps = [_dt.datetime.fromisoformat(value) for value in raw]
    except ValueError as exc:
        raise DataError(f"{path}: timestamps are neither integers nor "
                        f"ISO-8601: {exc}") from exc
    if len(stamps) < 2:
        return np.zeros(len(stamps), dtype=np.int64)
    deltas = np.array([(b - a).total_seconds()
                       for a, b in zip(stamps, stamps[1:])])
    if np.any(deltas <= 0):
        raise ValidationError(f"{path}: timestamps must be increasing")
    step = float(np.min(deltas))
    if np.any(np.abs(deltas / step - np.round(deltas / step)) > 1e-9):
        raise ValidationError(f"{path}: timestamp spacing is not uniform")
    offsets = np.concatenate([[0.0], np.cumsum(deltas)]) / step
    return np.round(offsets).astype(np.int64)


def load_speeds(path):
    """Read a `timestamp,node_0,...` CSV into a SpeedSeries.

    Empty fields are missing values. Gaps in the timestamp sequence are
    filled with all-missing rows so the result is gap-free.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        while header is not None and header and header[0].startswith("#"):
            header = next(reader, None)
        if not header or header[0].strip() != "timestamp":
            raise DataError(f"{path}: first header field must be 'timestamp'")
        names = [name.strip() for name in header[1:]]
        expected = [f"node_{i}" for i in range(len(names))]
        if not names or names != expected:
            raise DataError(
                f"{path}: node columns must be node_0..node_{{N-1}}, "
                f"got {names}")
        n = len(names)
        raw_ts, rows, masks = [], [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if row[0].startswith("#"):
                continue
            if len(row) != n + 1:
                raise DataError(
                    f"{path}:{line_no}: expected {n + 1} fields, "
                    f"got {len(row)}")
            raw_ts.append(row[0].strip())
            vals = np.zeros(n)
            miss = np.zeros(n, dtype=bool)
            for i, cell in enumerate(row[1:]):
                cell = cell.strip()
                if not cell:
                    miss[i] = True
                    continue
                try:
                    vals[i] = float(cell)
                except ValueError as exc:
                    raise DataError(
                        f"{path}:{line_no}: bad value {cell!r}") from exc
                if not np.isfinite(vals[i]):
                    raise DataError(f"{path}:{line_no}: non-finite value")
            rows.append(vals)
            masks.append(miss)
    if not rows:
        raise DataError(f"{path}: no data rows")
    ts = _parse_timestamp_column(raw_ts, path)
    if np.any(np.diff(ts) == 0):
        raise ValidationError(f"{path}: duplicated timestamp")
    if np.any(np.diff(ts) < 0):
        raise ValidationError(f"{path}: timestamps must be increasing")

    span = int(ts[-1] - ts[0]) + 1
    values = np.zeros((span, n))
    missing = np.ones((span, n), dtype=bool)
    pos = (ts - ts[0]).astype(np.int64)
    values[pos] = np.asarray(rows)
    missing[pos] = np.asarray(masks)
    return SpeedSeries(
        timestamps=np.arange(ts[0], ts[0] + span, dtype=np.int64),
        values=values, missing=missing)


def interpolate_missing(series: SpeedSeries) -> SpeedSeries:
    """Fill missing cells per node by linear interpolation over time.

    Edge gaps take the nearest present value. Present values are copied
    through bit-exactly.
    """
    t_len, n = series.values.shape
    values = np.array(series.values)
    grid = np.arange(t_len, dtype=np.float64)
    for i in range(n):
        present = ~series.missing[:, i]
        if not np.any(present):
            raise ValidationError(f"node {i} has no present values")
        if np.all(present):
            continue
        values[:, i] = np.interp(grid, grid[present],
                                 series.values[present, i])
        values[present, i] = series.values[present, i]
    return SpeedSeries(timestamps=series.timestamps, values=values,
                       missing=np.zeros_like(series.missing))


def fit_norm_stats(series: SpeedSeries, train_slices, standardize=False):
    """Per-node mean (and optional std) over the training slice range."""
    block = series.values[train_slices]
    if block.size == 0:
        raise ValidationError("training range is empty")
    mean = block.mean(axis=0)
    std = None
    if standardize:
        std = block.std(axis=0)
        floor = 1e-12
        if np.any(std <= floor):
            raise ValidationError(
                "a node is constant on the training split; standardize "
                "needs positive variance")
    return NormStats(mean=mean, std=std)


def zero_mean(series: SpeedSeries, stats: NormStats) -> SpeedSeries:
    """Apply the fitted normalization to every slice."""
    return replace(series, values=stats.apply(series.values))


# -- windowing ------------------------------------------------------------------


def window_indices(t0, spec: GranularitySpec):
    """Index sets for one sample, or None when history is insufficient.

    Returns {"m": [...], "h": [...], ..., "target": [...]} with 0-based
    slice positions; periodic streams are chronological block-major.
    """
    if t0 - spec.q + 1 < 0:
        return None
    out = {"m": list(range(t0 - spec.q + 1, t0 + 1)),
           "target": list(range(t0 + 1, t0 + spec.h + 1))}
    strides = spec.strides
    for tag in GRANULARITIES:
        if tag not in spec.mask:
            continue
        stride = strides[tag]
        t_count = spec.q // stride
        if spec.window_style == "block":
            idx = [t0 - b * stride + j
                   for b in range(t_count, 0, -1)
                   for j in range(1, spec.h + 1)]
        else:
            idx = [t0 - b * stride for b in range(t_count, -1, -1)]
        if idx[0] < 0:
            return None
        out[tag] = idx
    return out


def extract_windows(series: SpeedSeries, t0, spec: GranularitySpec):
    """Build the WindowedSample anchored at t0, or None to skip.

    Skips (returns None) when t0 lacks the Q slices of history or the H
    target slices; raises only on malformed geometry.
    """
    if np.any(series.missing):
        raise ValidationError("series still has missing values; interpolate "
                              "before windowing")
    t_len = series.n_slices
    if t0 + spec.h + 1 > t_len:
        return None
    idx = window_indices(t0, spec)
    if idx is None:
        return None
    values = series.values
    streams = {}
    for tag in GRANULARITIES:
        if tag not in idx:
            streams[tag] = None
            continue
        rows = values[idx[tag]]
        if spec.window_style == "block":
            t_count = spec.q // spec.strides[tag]
            rows = rows.reshape(t_count, spec.h, series.n_nodes)
        else:
            rows = rows.reshape(rows.shape[0], 1, series.n_nodes)
        streams[tag] = rows
    return WindowedSample(
        t0=t0,
        x_m=values[idx["m"]],
        x_h=streams["h"], x_d=streams["d"], x_w=streams["w"],
        target=values[idx["target"]])


def split_bounds(t_len, ratios=(0.7, 0.1, 0.2)):
    """Contiguous train/val/test slice ranges as (lo, hi) pairs."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValidationError("ratios must be three positive numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got {sum(ratios)}")
    # round-to-nearest: naive truncation turns 1000*(0.7+0.1) into 799
    b1 = int(round(t_len * ratios[0]))
    b2 = int(round(t_len * (ratios[0] + ratios[1])))
    return [(0, b1), (b1, b2), (b2, t_len)]


def chronological_split(series: SpeedSeries, spec: GranularitySpec,
                        ratios=(0.7, 0.1, 0.2)):
    """Eligible t0 lists for train/val/test contiguous slice ranges.

    A sample is eligible for a split only when its full input reach
    [t0-Q+1, t0] and target reach [t0+1, t0+H] lie inside that split, so no
    window crosses a boundary.
    """
    bounds = split_bounds(series.n_slices, ratios)
    splits = []
    for name, (lo, hi) in zip(("train", "val", "test"), bounds):
        eligible = [t0 for t0 in range(lo, hi)
                    if t0 - spec.q + 1 >= lo and t0 + spec.h <= hi - 1]
        if not eligible:
            raise ValidationError(
                f"{name} split has zero eligible windows "
                f"(range [{lo}, {hi}), q={spec.q}, h={spec.h})")
        splits.append(eligible)
    return tuple(splits)


# -- synthetic traffic -------------------------------------------------------------


def synth_distances(n_nodes, rng, spacing=1.0, jitter=0.25):
    """Ring-with-jitter sensor layout: connected, well-separated spectrum.

    The radius floor keeps distant node pairs beyond the adjacency kernel's
    sparsity threshold, so the graph stays a ring with short chords instead
    of collapsing into a near-complete (spectrally degenerate) clique.
    """
    radius = max(n_nodes * spacing / (2.0 * np.pi), 1.5)
    angles = 2.0 * np.pi * np.arange(n_nodes) / n_nodes
    angles = angles + rng.uniform(-jitter, jitter, size=n_nodes) / radius
    radii = radius + rng.uniform(-jitter, jitter, size=n_nodes)
    pts = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, 0.0)
    return d


def synth_generate(n_nodes, days, p, seed, daily_amp=10.0, weekly_amp=5.0,
                   noise_std=1.0, spatial_coupling=0.3, base_speed=60.0):
    """Deterministic synthetic traffic with daily and weekly structure.

    Per node: a base level, a phase-shifted daily sinusoid, a weekday and
    weekend square wave, and spatially smoothed noise. Returns the series
    and a matching distance matrix.
    """
    if n_nodes < 2:
        raise ValidationError("need at least 2 nodes")
    if days < 1:
        raise ValidationError("days must be positive")
    s_h, s_d, s_w = granularity_strides(p)
    t_len = days * s_d
    rng = np.random.default_rng(seed)

    distances = synth_distances(n_nodes, rng)
    from .graph import build_adjacency
    w = build_adjacency(distances)
    deg = w.sum(axis=1)
    smooth = np.divide(w, deg[:, None], out=np.zeros_like(w),
                       where=deg[:, None] > 0)

    t = np.arange(t_len)
    base = base_speed + rng.uniform(-5.0, 5.0, size=n_nodes)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n_nodes)
    daily = daily_amp * np.sin(
        2.0 * np.pi * (t[:, None] % s_d) / s_d + phase[None, :])
    weekday = (t[:, None] // s_d) % DAYS_PER_WEEK < 5
    weekly = np.where(weekday, weekly_amp, -weekly_amp) * np.ones((1, n_nodes))
    noise = rng.normal(size=(t_len, n_nodes)) * noise_std
    if spatial_coupling > 0:
        noise = (1.0 - spatial_coupling) * noise + (
            spatial_coupling * noise @ smooth.T)
    values = base[None, :] + daily + weekly + noise
    series = SpeedSeries(
        timestamps=np.arange(t_len, dtype=np.int64),
        values=values,
        missing=np.zeros((t_len, n_nodes), dtype=bool))
    return series, distances


# -- CSV output ---------------------------------------------------------------------


def write_speeds(path, series: SpeedSeries, comments=()):
    """Write a speeds CSV; masked cells become empty fields."""
    with open(path, "w", newline="") as fh:
        for comment in comments:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["timestamp"] + [f"node_{i}"
                                         for i in range(series.n_nodes)])
        for row in range(series.n_slices):
            cells = [str(int(series.timestamps[row]))]
            for i in range(series.n_nodes):
                cells.append("" if series.missing[row, i]
                             else repr(float(series.values[row, i])))
            writer.writerow(cells)


def write_distances(path, distances, comments=()):
    """Write the upper-triangle finite distances as from,to,distance rows."""
    d = np.asarray(distances)
    with open(path, "w", newline="") as fh:
        for comment in comments:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["from", "to", "distance"])
        for i in range(d.shape[0]):
            for j in range(i + 1, d.shape[1]):
                if np.isfinite(d[i, j]):
                    writer.writerow([i, j, repr(float(d[i, j]))])
