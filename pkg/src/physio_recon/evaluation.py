"""Per-scan correlation evaluation and report roll-ups.

pearson_r here is the plain numpy evaluation path, deliberately independent
of the differentiable training loss so each can serve as the other's oracle.
Reports carry per-scan results, per-fold and pooled medians (plus the median
of fold medians, since both readings of a cross-fold median are defensible),
and equal-count age-group summaries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from physio_recon.errors import DataError, HashMismatchError

TASKS = ("RV", "HR")


def pearson_r(a, b) -> float:
    """Pearson correlation; NaN when either side is (near-)constant."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise DataError(f"pearson_r: length mismatch {a.size} vs {b.size}")
    if a.size < 3:
        raise DataError(f"pearson_r: need at least 3 samples, got {a.size}")
    if a.std() < 1e-12 or b.std() < 1e-12:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


@dataclass(frozen=True)
class ScanResult:
    scan_id: str
    subject_id: str
    age: float
    task: str
    fold: int
    r: float

    def to_dict(self) -> dict:
        return {
            "scan_id": self.scan_id,
            "subject_id": self.subject_id,
            "age": self.age,
            "task": self.task,
            "fold": self.fold,
            "r": None if np.isnan(self.r) else self.r,
        }


def predictions_for_scan(checkpoint, scan, dtype=np.float32):
    """Forward pass without dropout; returns (time indices, (N, n_outputs) array)."""
    model = checkpoint.build_model(dtype)
    idx = model.prediction_time_indices(scan.roi.shape[0])
    out = model.forward(scan.roi, train=False, rng=None)
    return idx, out.data


def evaluate_scans(checkpoint, scans, task: str, fold: int = -1, dtype=np.float32,
                   model=None) -> list[ScanResult]:
    """One Pearson r per scan per task, with preprocessing-hash verification.

    For seq2one the measured series is cropped to the prediction's aligned
    time indices (window midpoints); seq2seq correlates over all T points.
    """
    tasks = TASKS if task == "joint" else (task,)
    ckpt_hash = checkpoint.provenance.get("prep_hash")
    if model is None:
        model = checkpoint.build_model(dtype)
    results = []
    for scan in scans:
        if ckpt_hash is not None and scan.prep_hash != ckpt_hash:
            raise HashMismatchError(
                f"scan '{scan.scan_id}': preprocessing hash {scan.prep_hash[:12]} does not "
                f"match the checkpoint's {str(ckpt_hash)[:12]}"
            )
        roi = scan.roi  # read once (strategy tests count target-data accesses)
        idx = model.prediction_time_indices(roi.shape[0])
        out = model.forward(roi, train=False, rng=None).data
        for col, name in enumerate(tasks):
            target = (scan.rv if name == "RV" else scan.hr)[idx]
            results.append(
                ScanResult(
                    scan_id=scan.scan_id,
                    subject_id=scan.subject_id,
                    age=scan.age,
                    task=name,
                    fold=fold,
                    r=pearson_r(out[:, col], target),
                )
            )
    return results


def _median(values) -> float:
    return float(np.median(values))


@dataclass
class MedianSummary:
    pooled: float
    per_fold: dict[int, float]
    median_of_fold_medians: float
    n_scans: int
    n_excluded: int


def median_summary(results: list[ScanResult]) -> MedianSummary:
    """Per-fold and pooled medians; degenerate (NaN) scans are excluded but counted."""
    if not results:
        raise DataError("median_summary: no results")
    ok = [s for s in results if not np.isnan(s.r)]
    excluded = len(results) - len(ok)
    if not ok:
        raise DataError("median_summary: every scan was degenerate")
    per_fold = {}
    for fold in sorted({s.fold for s in ok}):
        per_fold[fold] = _median([s.r for s in ok if s.fold == fold])
    return MedianSummary(
        pooled=_median([s.r for s in ok]),
        per_fold=per_fold,
        median_of_fold_medians=_median(list(per_fold.values())),
        n_scans=len(ok),
        n_excluded=excluded,
    )


@dataclass
class AgeGroup:
    index: int
    age_min: float
    age_max: float
    n_subjects: int
    n_scans: int
    median_r: float


def age_group_summary(results: list[ScanResult], n_groups: int = 3) -> list[AgeGroup]:
    """Equal-count subject age groups (ties broken by subject id), median r each."""
    if n_groups < 2:
        raise DataError(f"age_group_summary: n_groups must be >= 2, got {n_groups}")
    subjects = sorted({(s.subject_id, s.age) for s in results}, key=lambda p: (p[1], p[0]))
    if len(subjects) < n_groups:
        raise DataError(
            f"age_group_summary: {len(subjects)} subjects < {n_groups} groups"
        )
    groups = np.array_split(np.arange(len(subjects)), n_groups)
    out = []
    for gi, idxs in enumerate(groups):
        members = {subjects[i][0] for i in idxs}
        ages = [subjects[i][1] for i in idxs]
        rs = [s.r for s in results if s.subject_id in members and not np.isnan(s.r)]
        out.append(
            AgeGroup(
                index=gi,
                age_min=float(min(ages)),
                age_max=float(max(ages)),
                n_subjects=len(idxs),
                n_scans=len(rs),
                median_r=_median(rs) if rs else float("nan"),
            )
        )
    return out


@dataclass
class EvalReport:
    strategy: str
    model_name: str
    prep_hash: str
    results: list[ScanResult]
    summaries: dict[str, MedianSummary] = field(default_factory=dict)
    age_groups: dict[str, list[AgeGroup]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {
            "strategy": self.strategy,
            "model": self.model_name,
            "prep_hash": self.prep_hash,
            "per_scan": [s.to_dict() for s in self.results],
            "summary": {},
            "age_groups": {},
        }
        for task, summ in self.summaries.items():
            doc["summary"][task] = {
                "pooled_median_r": summ.pooled,
                "per_fold_median_r": {str(k): v for k, v in summ.per_fold.items()},
                "median_of_fold_medians": summ.median_of_fold_medians,
                "n_scans": summ.n_scans,
                "n_excluded_degenerate": summ.n_excluded,
            }
        for task, groups in self.age_groups.items():
            doc["age_groups"][task] = [
                {
                    "group": g.index,
                    "age_min": g.age_min,
                    "age_max": g.age_max,
                    "n_subjects": g.n_subjects,
                    "n_scans": g.n_scans,
                    "median_r": None if np.isnan(g.median_r) else g.median_r,
                }
                for g in groups
            ]
        return doc

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_scan_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("scan_id,subject_id,age,fold,task,r\n")
            for s in self.results:
                r = "" if np.isnan(s.r) else f"{s.r:.9g}"
                fh.write(f"{s.scan_id},{s.subject_id},{s.age:.6g},{s.fold},{s.task},{r}\n")


def build_report(strategy: str, model_name: str, results: list[ScanResult],
                 prep_hash: str, n_age_groups: int = 3) -> EvalReport:
    report = EvalReport(strategy=strategy, model_name=model_name, prep_hash=prep_hash, results=results)
    for task in sorted({s.task for s in results}):
        task_results = [s for s in results if s.task == task]
        report.summaries[task] = median_summary(task_results)
        n_subjects = len({s.subject_id for s in task_results})
        if n_subjects >= n_age_groups:
            report.age_groups[task] = age_group_summary(task_results, n_age_groups)
    return report


def write_prediction_dump(path, scan, time_indices, measured, predicted) -> None:
    """Per-scan CSV t,measured,predicted for external plotting."""
    with open(path, "w") as fh:
        fh.write("t,measured,predicted\n")
        for i, t_idx in enumerate(time_indices):
            fh.write(f"{t_idx * scan.dt:.6f},{measured[i]:.9g},{predicted[i]:.9g}\n")
