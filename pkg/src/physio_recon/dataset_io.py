"""On-disk dataset formats, scan loading, and subject-level cross-validation.

A dataset is a JSON manifest naming per-scan ROI/physiology files. Loading a
scan runs every ROI column and both targets through the shared conditioning
chain onto the common grid. Cross-validation folds are built at subject level
with an age-balanced serpentine deal, and the validation carve-out moves whole
subjects until the requested scan fraction is reached.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from physio_recon.errors import DataError, HashMismatchError, NumericError
from physio_recon.signal_prep import (
    PrepSettings,
    SampledSeries,
    TrGrid,
    compute_hr,
    compute_rv,
    preprocess_chain,
    read_beats_txt,
    read_column_txt,
    read_series_csv,
)


@dataclass(frozen=True)
class ScanEntry:
    """One scan row of a dataset manifest; paths are resolved, absolute."""

    scan_id: str
    subject_id: str
    age: float
    roi_path: Path
    rv_path: Path | None = None
    hr_path: Path | None = None
    resp_path: Path | None = None
    beats_path: Path | None = None


@dataclass(frozen=True)
class Manifest:
    dataset_name: str
    tr_seconds: float
    physio_hz: float
    scans: tuple[ScanEntry, ...]


@dataclass(frozen=True)
class Scan:
    """A fully preprocessed scan on the common grid.

    roi is (T, R) with z-normalized columns; rv and hr are length-T targets.
    prep_hash identifies the preprocessing settings that produced it.
    """

    scan_id: str
    subject_id: str
    age: float
    roi: np.ndarray
    rv: np.ndarray
    hr: np.ndarray
    dt: float
    prep_hash: str
    roi_names: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    """Subject-level fold assignment: subject_id -> fold index in [0, k)."""

    k: int
    assignment: dict[str, int]

    def subjects_in(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.assignment.items() if f == fold)

    def fold_of(self, subject_id: str) -> int:
        return self.assignment[subject_id]


def load_manifest(path) -> Manifest:
    """Parse and validate a dataset manifest; file paths resolve against its directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc

    def need(obj, key, where, kind):
        if key not in obj:
            raise DataError(f"{path}: {where}: missing field '{key}'")
        val = obj[key]
        try:
            return kind(val)
        except (TypeError, ValueError) as exc:
            raise DataError(f"{path}: {where}.{key}: {exc}") from exc

    name = need(raw, "dataset_name", "$", str)
    tr = need(raw, "tr_seconds", "$", float)
    hz = need(raw, "physio_hz", "$", float)
    if tr <= 0 or hz <= 0:
        raise DataError(f"{path}: tr_seconds and physio_hz must be positive")
    if "scans" not in raw or not isinstance(raw["scans"], list):
        raise DataError(f"{path}: $: missing field 'scans'")

    base = path.parent
    entries = []
    seen = set()
    for i, s in enumerate(raw["scans"]):
        where = f"scans[{i}]"
        scan_id = need(s, "scan_id", where, str)
        if scan_id in seen:
            raise DataError(f"{path}: {where}: duplicate scan_id '{scan_id}'")
        seen.add(scan_id)
        age = need(s, "age", where, float)
        if not 0 <= age <= 130:
            raise DataError(f"{path}: {where}: age {age} outside [0, 130]")

        def opt(key, s=s, where=where):
            return (base / str(s[key])).resolve() if s.get(key) else None

        entries.append(
            ScanEntry(
                scan_id=scan_id,
                subject_id=need(s, "subject_id", where, str),
                age=age,
                roi_path=(base / need(s, "roi_path", where, str)).resolve(),
                rv_path=opt("rv_path"),
                hr_path=opt("hr_path"),
                resp_path=opt("resp_path"),
                beats_path=opt("beats_path"),
            )
        )
    return Manifest(dataset_name=name, tr_seconds=tr, physio_hz=hz, scans=tuple(entries))


def read_roi_csv(path) -> tuple[list[str], np.ndarray]:
    """ROI CSV: first row names, then one time point per row."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            names = [c.strip() for c in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty ROI file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(names):
                raise DataError(
                    f"{path}:{lineno}: ragged row ({len(row)} fields, expected {len(names)})"
                )
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    if len(rows) < 2:
        raise DataError(f"{path}: need at least 2 time points")
    data = np.asarray(rows, dtype=np.float64)
    if not np.isfinite(data).all():
        t, r = np.argwhere(~np.isfinite(data))[0]
        raise NumericError(f"{path}: non-finite value in column '{names[r]}' at row {t + 2}")
    return names, data


def _target_series(entry: ScanEntry, manifest: Manifest, grid: TrGrid, prep: PrepSettings, which: str) -> SampledSeries:
    if which == "rv":
        if entry.rv_path is not None:
            return read_series_csv(entry.rv_path)
        if entry.resp_path is not None:
            resp = read_column_txt(entry.resp_path, manifest.physio_hz)
            return compute_rv(resp, grid, prep.rv_window_s)
        raise DataError(f"scan '{entry.scan_id}': neither rv_path nor resp_path present")
    if entry.hr_path is not None:
        return read_series_csv(entry.hr_path)
    if entry.beats_path is not None:
        return compute_hr(read_beats_txt(entry.beats_path), grid, prep.hr_window_s)
    raise DataError(f"scan '{entry.scan_id}': neither hr_path nor beats_path present")


def load_scan(entry: ScanEntry, manifest: Manifest, prep: PrepSettings) -> Scan:
    """Load, derive, and condition one scan onto the common grid.

    All ROI columns and both targets are preprocessed with the same settings
    and truncated to the shortest shared length.
    """
    names, raw_roi = read_roi_csv(entry.roi_path)
    grid = TrGrid(manifest.tr_seconds, raw_roi.shape[0])

    cols = []
    for j, name in enumerate(names):
        series = SampledSeries(raw_roi[:, j], dt=manifest.tr_seconds)
        cols.append(preprocess_chain(series, prep.filter_spec, prep.dst_dt, label=f"column '{name}'"))

    rv = preprocess_chain(
        _target_series(entry, manifest, grid, prep, "rv"), prep.filter_spec, prep.dst_dt, label="rv"
    )
    hr = preprocess_chain(
        _target_series(entry, manifest, grid, prep, "hr"), prep.filter_spec, prep.dst_dt, label="hr"
    )

    t_common = min(min(len(c) for c in cols), len(rv), len(hr))
    roi = np.column_stack([c.values[:t_common] for c in cols])
    return Scan(
        scan_id=entry.scan_id,
        subject_id=entry.subject_id,
        age=entry.age,
        roi=roi,
        rv=rv.values[:t_common],
        hr=hr.values[:t_common],
        dt=prep.dst_dt,
        prep_hash=prep.content_hash(),
        roi_names=tuple(names),
    )


def make_age_balanced_folds(subjects, k: int, seed: int) -> FoldPlan:
    """Assign subjects to k folds, balancing the age distribution.

    Subjects are ordered by age (ties broken by a seeded shuffle) and dealt
    serpentine-fashion (0..k-1, k-1..0, ...) so fold mean ages stay close and
    fold sizes differ by at most one.
    """
    if k < 2:
        raise DataError(f"make_age_balanced_folds: k must be >= 2, got {k}")
    by_id: dict[str, float] = {}
    for sid, age in subjects:
        if sid in by_id and by_id[sid] != age:
            raise DataError(f"subject '{sid}' listed with conflicting ages")
        by_id[sid] = age
    ids = sorted(by_id)
    if len(ids) < k:
        raise DataError(f"make_age_balanced_folds: {len(ids)} subjects < {k} folds")
    rng = np.random.default_rng(seed)
    tiebreak = rng.permutation(len(ids))
    order = sorted(range(len(ids)), key=lambda i: (by_id[ids[i]], tiebreak[i]))
    cycle = list(range(k)) + list(range(k - 1, -1, -1))
    assignment = {ids[idx]: cycle[j % (2 * k)] for j, idx in enumerate(order)}
    return FoldPlan(k=k, assignment=assignment)


def select_validation(train_scans, frac: float = 0.15, seed: int = 0):
    """Split a training scan list into (train, validation) at subject level.

    Whole subjects move to validation, in a seeded random subject order, until
    the validation scan count first reaches frac of the input scan count.
    """
    if not 0 < frac < 1:
        raise DataError(f"select_validation: frac must be in (0, 1), got {frac}")
    scans = list(train_scans)
    subjects = sorted({s.subject_id for s in scans})
    if len(subjects) < 2:
        raise DataError("select_validation: need at least 2 subjects to split")
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    target = frac * len(scans)
    per_subject = {sid: sum(1 for s in scans if s.subject_id == sid) for sid in subjects}
    val_subjects, count = set(), 0
    for sid in order:
        if count >= target:
            break
        val_subjects.add(sid)
        count += per_subject[sid]
    if count == 0 or count == len(scans):
        raise DataError("select_validation: cannot form non-empty train and validation parts")
    train = [s for s in scans if s.subject_id not in val_subjects]
    val = [s for s in scans if s.subject_id in val_subjects]
    return train, val


# ---------------------------------------------------------------------------
# preprocessed scan cache

CACHE_MANIFEST = "prep_manifest.json"


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_scan_cache(scan: Scan, out_dir) -> tuple[str, str]:
    """Write one preprocessed scan CSV; returns (relative path, content hash)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rel = f"{scan.scan_id}.csv"
    path = out_dir / rel
    header = ",".join(["rv", "hr", *scan.roi_names])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for t in range(scan.roi.shape[0]):
            row = [f"{scan.rv[t]:.9g}", f"{scan.hr[t]:.9g}"]
            row += [f"{v:.9g}" for v in scan.roi[t]]
            fh.write(",".join(row) + "\n")
    return rel, _file_hash(path)


def write_cache_manifest(out_dir, dataset_name: str, prep: PrepSettings, entries: list[dict]) -> None:
    """entries: [{scan_id, subject_id, age, path, content_hash}]"""
    doc = {
        "dataset_name": dataset_name,
        "dt": prep.dst_dt,
        "settings": prep.to_dict(),
        "settings_hash": prep.content_hash(),
        "scans": entries,
    }
    (Path(out_dir) / CACHE_MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_cache(cache_dir) -> tuple[list[Scan], PrepSettings]:
    """Load every preprocessed scan from a cache directory, verifying hashes."""
    cache_dir = Path(cache_dir)
    mf_path = cache_dir / CACHE_MANIFEST
    if not mf_path.exists():
        raise DataError(f"{cache_dir}: no {CACHE_MANIFEST}; run the preprocess command first")
    doc = json.loads(mf_path.read_text())
    prep = PrepSettings.from_dict(doc["settings"])
    if prep.content_hash() != doc["settings_hash"]:
        raise HashMismatchError(f"{mf_path}: settings_hash does not match settings block")
    scans = []
    for e in doc["scans"]:
        path = cache_dir / e["path"]
        if _file_hash(path) != e["content_hash"]:
            raise HashMismatchError(f"{path}: content hash mismatch (cache is stale)")
        with open(path) as fh:
            names = fh.readline().strip().split(",")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        scans.append(
            Scan(
                scan_id=e["scan_id"],
                subject_id=e["subject_id"],
                age=float(e["age"]),
                roi=np.ascontiguousarray(data[:, 2:]),
                rv=np.ascontiguousarray(data[:, 0]),
                hr=np.ascontiguousarray(data[:, 1]),
                dt=float(doc["dt"]),
                prep_hash=doc["settings_hash"],
                roi_names=tuple(names[2:]),
            )
        )
    return scans, prep
