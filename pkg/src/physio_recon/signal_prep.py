"""Physiological signal derivation and the shared conditioning chain.

RV is the population standard deviation of the respiration waveform in a
window centered at each TR; HR is 60 over the mean inter-beat interval in the
same window. Both targets and every ROI time course then pass through the
same chain: linear detrend, zero-phase Butterworth band-pass, linear
resampling to a common sampling interval, and z-normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, filtfilt

from physio_recon import kernels
from physio_recon.errors import DataError, NumericError


@dataclass(frozen=True)
class SampledSeries:
    """A uniformly sampled 1-D signal.

    Attributes:
        values: sample values, arbitrary units.
        dt: seconds per sample (> 0).
        t0: time of the first sample in seconds.
    """

    values: np.ndarray
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 1:
            raise DataError(f"SampledSeries: values must be 1-D, got shape {self.values.shape}")
        if not self.dt > 0:
            raise DataError(f"SampledSeries: dt must be positive, got {self.dt}")
        if not np.isfinite(self.values).all():
            raise NumericError("SampledSeries: non-finite sample values")

    def __len__(self) -> int:
        return len(self.values)

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self.values)) * self.dt


@dataclass(frozen=True)
class BeatTrain:
    """Heartbeat event timestamps in seconds, strictly increasing."""

    timestamps: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "timestamps", np.asarray(self.timestamps, dtype=np.float64))
        if not np.isfinite(self.timestamps).all():
            raise NumericError("BeatTrain: non-finite timestamps")
        if len(self.timestamps) >= 2 and not (np.diff(self.timestamps) > 0).all():
            raise DataError("BeatTrain: timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.timestamps)


@dataclass(frozen=True)
class FilterSpec:
    """Band-pass edges in Hz and the Butterworth design order."""

    low_hz: float = 0.01
    high_hz: float = 0.15
    order: int = 2

    def __post_init__(self):
        if not (0 < self.low_hz < self.high_hz):
            raise DataError(f"FilterSpec: need 0 < low < high, got {self.low_hz}, {self.high_hz}")
        if self.order < 1:
            raise DataError(f"FilterSpec: order must be >= 1, got {self.order}")


@dataclass(frozen=True)
class TrGrid:
    """The fMRI volume grid: repetition time and number of volumes.

    Volume k is taken to sit at time k * tr_seconds on the same clock as the
    physiological series timestamps.
    """

    tr_seconds: float
    n_volumes: int

    def __post_init__(self):
        if not self.tr_seconds > 0:
            raise DataError(f"TrGrid: tr_seconds must be positive, got {self.tr_seconds}")
        if self.n_volumes < 2:
            raise DataError(f"TrGrid: n_volumes must be >= 2, got {self.n_volumes}")

    def times(self) -> np.ndarray:
        return np.arange(self.n_volumes) * self.tr_seconds


def compute_rv(resp: SampledSeries, grid: TrGrid, window_s: float = 6.0) -> SampledSeries:
    """Respiratory volume: windowed std of the respiration trace at each TR.

    Element k is the population standard deviation of all respiration samples
    with timestamps in [t_k - window_s/2, t_k + window_s/2]; windows are
    truncated at the recording boundaries. A window with fewer than two
    samples is an error naming the TR index.
    """
    if window_s <= 0:
        raise DataError(f"compute_rv: window_s must be positive, got {window_s}")
    times = resp.times()
    centers = grid.times()
    starts = np.searchsorted(times, centers - window_s / 2.0, side="left")
    stops = np.searchsorted(times, centers + window_s / 2.0, side="right")
    short = np.flatnonzero(stops - starts < 2)
    if len(short):
        raise DataError(
            f"compute_rv: window at TR index {short[0]} contains "
            f"{stops[short[0]] - starts[short[0]]} samples (need >= 2)"
        )
    out = kernels.windowed_std(resp.values, starts, stops)
    return SampledSeries(out, dt=grid.tr_seconds, t0=0.0)


def compute_hr(beats: BeatTrain, grid: TrGrid, window_s: float = 6.0) -> SampledSeries:
    """Heart rate in bpm: 60 over the mean inter-beat interval around each TR.

    Only intervals between consecutive beats that both fall inside the window
    count. Windows with fewer than two beats copy the value of the nearest TR
    with a valid estimate; if no window is valid the whole call fails.
    """
    if window_s <= 0:
        raise DataError(f"compute_hr: window_s must be positive, got {window_s}")
    if len(beats) < 2:
        raise DataError("compute_hr: need at least 2 beats")
    ts = beats.timestamps
    centers = grid.times()
    lo = np.searchsorted(ts, centers - window_s / 2.0, side="left")
    hi = np.searchsorted(ts, centers + window_s / 2.0, side="right")
    n = hi - lo
    valid = n >= 2
    if not valid.any():
        raise DataError("compute_hr: no TR window contains two or more beats")
    hr = np.zeros(grid.n_volumes)
    # mean IBI of beats[lo:hi] telescopes to (last - first) / (count - 1)
    vi = np.flatnonzero(valid)
    hr[vi] = 60.0 * (n[vi] - 1) / (ts[hi[vi] - 1] - ts[lo[vi]])
    invalid = np.flatnonzero(~valid)
    if len(invalid):
        nearest = vi[np.argmin(np.abs(vi[None, :] - invalid[:, None]), axis=1)]
        hr[invalid] = hr[nearest]
    return SampledSeries(hr, dt=grid.tr_seconds, t0=0.0)


def detrend_linear(x: SampledSeries) -> SampledSeries:
    """Subtract the least-squares best-fit line."""
    n = len(x)
    if n < 2:
        raise DataError(f"detrend_linear: need at least 2 samples, got {n}")
    idx = np.arange(n, dtype=np.float64)
    design = np.column_stack([np.ones(n), idx])
    coef, *_ = np.linalg.lstsq(design, x.values, rcond=None)
    return SampledSeries(x.values - design @ coef, dt=x.dt, t0=x.t0)


def bandpass(x: SampledSeries, spec: FilterSpec) -> SampledSeries:
    """Zero-phase Butterworth band-pass (forward-backward over reflection padding)."""
    nyquist = 0.5 / x.dt
    if not spec.high_hz < nyquist:
        raise DataError(
            f"bandpass: high edge {spec.high_hz} Hz must be below Nyquist {nyquist:.6g} Hz"
        )
    padlen = 3 * (2 * spec.order + 1)
    if len(x) <= padlen:
        raise DataError(f"bandpass: series of length {len(x)} too short for padding {padlen}")
    b, a = butter(spec.order, [spec.low_hz, spec.high_hz], btype="bandpass", fs=1.0 / x.dt)
    out = filtfilt(b, a, x.values, padtype="even", padlen=padlen)
    return SampledSeries(out, dt=x.dt, t0=x.t0)


def resample_linear(x: SampledSeries, dst_dt: float) -> SampledSeries:
    """Linear interpolation onto the grid {t0 + k * dst_dt}, never extrapolating."""
    if dst_dt <= 0:
        raise DataError(f"resample_linear: dst_dt must be positive, got {dst_dt}")
    if len(x) < 2:
        raise DataError(f"resample_linear: need at least 2 samples, got {len(x)}")
    span = (len(x) - 1) * x.dt
    ratio = span / dst_dt
    # snap to integer before flooring so dst_dt == dt is the exact identity
    if abs(ratio - round(ratio)) < 1e-9:
        ratio = round(ratio)
    n_out = int(math.floor(ratio)) + 1
    src_t = x.times()
    dst_t = x.t0 + np.arange(n_out) * dst_dt
    return SampledSeries(np.interp(dst_t, src_t, x.values), dt=dst_dt, t0=x.t0)


def znorm(x: SampledSeries, label: str = "series") -> SampledSeries:
    """Center to mean 0 and scale to population std 1."""
    std = float(x.values.std())
    if std < 1e-12:
        raise DataError(f"znorm: {label} is (near-)constant, std={std:.3g}")
    return SampledSeries((x.values - x.values.mean()) / std, dt=x.dt, t0=x.t0)


def preprocess_chain(
    x: SampledSeries, spec: FilterSpec, dst_dt: float, label: str = "series"
) -> SampledSeries:
    """detrend -> bandpass -> resample -> znorm, in exactly that order."""
    stages = (
        ("detrend", lambda s: detrend_linear(s)),
        ("bandpass", lambda s: bandpass(s, spec)),
        ("resample", lambda s: resample_linear(s, dst_dt)),
        ("znorm", lambda s: znorm(s, label)),
    )
    for name, fn in stages:
        try:
            x = fn(x)
        except (DataError, NumericError) as exc:
            raise DataError(f"{name} stage failed for {label}: {exc}") from exc
    return x


@dataclass(frozen=True)
class PrepSettings:
    """The conditioning-chain parameters shared by targets and ROI signals."""

    filter_spec: FilterSpec = field(default_factory=FilterSpec)
    dst_dt: float = 1.44
    rv_window_s: float = 6.0
    hr_window_s: float = 6.0

    def to_dict(self) -> dict:
        return {
            "low_hz": self.filter_spec.low_hz,
            "high_hz": self.filter_spec.high_hz,
            "order": self.filter_spec.order,
            "dst_dt": self.dst_dt,
            "rv_window_s": self.rv_window_s,
            "hr_window_s": self.hr_window_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrepSettings":
        return cls(
            filter_spec=FilterSpec(
                low_hz=d.get("low_hz", 0.01),
                high_hz=d.get("high_hz", 0.15),
                order=int(d.get("order", 2)),
            ),
            dst_dt=d.get("dst_dt", 1.44),
            rv_window_s=d.get("rv_window_s", 6.0),
            hr_window_s=d.get("hr_window_s", 6.0),
        )

    def content_hash(self) -> str:
        import hashlib
        import json

        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# series file formats


def write_series_csv(path, series: SampledSeries) -> None:
    """CSV with header t,value; t at 6 decimals, value at 9 significant digits."""
    with open(path, "w") as fh:
        fh.write("t,value\n")
        for k, v in enumerate(series.values):
            fh.write(f"{series.t0 + k * series.dt:.6f},{v:.9g}\n")


def read_series_csv(path) -> SampledSeries:
    """Read a t,value CSV; the sampling interval is inferred from the t column."""
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header.replace(" ", "") != "t,value":
            raise DataError(f"{path}: expected header 't,value', got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 fields, got {len(parts)}")
            try:
                rows.append((float(parts[0]), float(parts[1])))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    if len(rows) < 2:
        raise DataError(f"{path}: need at least 2 samples")
    t = np.array([r[0] for r in rows])
    v = np.array([r[1] for r in rows])
    steps = np.diff(t)
    dt = float(np.median(steps))
    if dt <= 0 or np.abs(steps - dt).max() > 5e-6:
        raise DataError(f"{path}: time column is not uniformly sampled")
    return SampledSeries(v, dt=dt, t0=float(t[0]))


def read_column_txt(path, hz: float) -> SampledSeries:
    """Read a single-column plain-text sample file recorded at `hz` Hz."""
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                values.append(float(line))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not values:
        raise DataError(f"{path}: empty sample file")
    return SampledSeries(np.array(values), dt=1.0 / hz)


def read_beats_txt(path) -> BeatTrain:
    """Read a single-column plain-text file of ascending beat timestamps."""
    stamps = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                stamps.append(float(line))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    if len(stamps) < 2:
        raise DataError(f"{path}: need at least 2 beat timestamps")
    return BeatTrain(np.array(stamps))
