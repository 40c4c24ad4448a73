"""Correlation loss, Adam, LR/early-stop scheduling, and the training strategies.

The loss is 1 minus the Pearson correlation between a scan's assembled
prediction and its measured target, averaged over the scans of a mini-batch
(a batch is a set of scan sequences, not windows). The plateau scheduler
halves the learning rate after the patience is exhausted, early stopping
returns the best-validation-epoch parameters, and the four transfer
strategies reuse one fold plan on the target cohort.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from physio_recon import autodiff as ad
from physio_recon import evaluation
from physio_recon.autodiff import Tape, Tensor, backward
from physio_recon.dataset_io import make_age_balanced_folds, select_validation
from physio_recon.errors import DataError, NumericError
from physio_recon.models import Model, config_from_dict, count_params

# minimum decrease of the validation loss that counts as an improvement
IMPROVEMENT_EPS = 1e-6

CHECKPOINT_MAGIC = b"PRCKPT01"


@dataclass(frozen=True)
class TrainConfig:
    task: str = "RV"  # RV | HR | joint
    batch_size: int = 16
    lr_init: float = 1e-4
    lr_finetune: float = 5e-5
    lr_decay: float = 0.5
    lr_patience: int = 2
    early_stop_patience: int = 5
    max_epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dtype: str = "float32"

    def __post_init__(self):
        if self.task not in ("RV", "HR", "joint"):
            raise DataError(f"TrainConfig: unknown task {self.task!r}")
        if min(self.lr_init, self.lr_finetune, self.lr_decay) <= 0:
            raise DataError("TrainConfig: rates must be positive")
        if min(self.lr_patience, self.early_stop_patience) < 1:
            raise DataError("TrainConfig: patience values must be positive")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "batch_size": self.batch_size,
            "lr_init": self.lr_init,
            "lr_finetune": self.lr_finetune,
            "lr_decay": self.lr_decay,
            "lr_patience": self.lr_patience,
            "early_stop_patience": self.early_stop_patience,
            "max_epochs": self.max_epochs,
            "seed": self.seed,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"TrainConfig: unknown fields {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class StrategySpec:
    kind: str  # pretrain_only | scratch | joint_scratch | finetune
    target_dataset: str
    source_dataset: str | None = None

    def __post_init__(self):
        kinds = ("pretrain_only", "scratch", "joint_scratch", "finetune")
        if self.kind not in kinds:
            raise DataError(f"StrategySpec: kind must be one of {kinds}, got {self.kind!r}")
        if self.kind in ("pretrain_only", "finetune", "joint_scratch") and not self.source_dataset:
            raise DataError(f"StrategySpec: strategy '{self.kind}' requires a source_dataset")


# ---------------------------------------------------------------------------
# loss


def pearson_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """1 - Pearson r between a prediction vector and a fixed target.

    Differentiable w.r.t. pred; statistics are computed in double precision.
    A (near-)constant prediction saturates the loss at 1 with zero gradient
    and records a warning instead of dividing by zero.
    """
    t = np.asarray(target, dtype=np.float64)
    n = t.size
    if pred.size != n:
        raise DataError(f"pearson_loss: length mismatch {pred.shape} vs {t.shape}")
    if n < 3:
        raise DataError(f"pearson_loss: need at least 3 samples, got {n}")
    v = t - t.mean()
    svv = float(v @ v)
    if np.sqrt(svv / n) < 1e-12:
        raise DataError("pearson_loss: target is (near-)constant")
    p = pred.data.astype(np.float64).reshape(-1)
    u = p - p.mean()
    suu = float(u @ u)
    dtype = pred.dtype

    if np.sqrt(suu / n) < 1e-12:
        warnings.warn("pearson_loss: degenerate constant prediction, loss saturated at 1")
        out = Tensor(np.asarray(1.0, dtype=dtype))
        return ad._record(out, (pred,), lambda g: (np.zeros(pred.shape, dtype=dtype),))

    denom = np.sqrt(suu * svv)
    r = float(u @ v) / denom
    out = Tensor(np.asarray(1.0 - r, dtype=dtype))

    def bwd(g):
        gp = -(v / denom - r * u / suu) * float(g)
        return (gp.astype(dtype).reshape(pred.shape),)

    return ad._record(out, (pred,), bwd)


def scan_loss(model: Model, scan, task: str, train: bool, rng) -> Tensor:
    """Per-scan loss: correlation of assembled predictions against the target."""
    roi = scan.roi
    out = model.forward(roi, train=train, rng=rng)
    idx = model.prediction_time_indices(roi.shape[0])
    if task == "joint":
        targets = [(0, scan.rv), (1, scan.hr)]
        if out.shape[1] < 2:
            raise DataError("scan_loss: joint task needs a two-output model")
    else:
        targets = [(0, scan.rv if task == "RV" else scan.hr)]
    losses = []
    for col, target in targets:
        pred = ad.select_index(out, 1, col)
        losses.append(pearson_loss(pred, target[idx]))
    if len(losses) == 1:
        return losses[0]
    stacked = ad.concat([ad.reshape(l, (1,)) for l in losses], axis=0)
    return ad.mean(stacked)


# ---------------------------------------------------------------------------
# optimizer and schedules


@dataclass
class OptimizerState:
    """Adam first/second moments and the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: OptimizerState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> None:
    """Standard bias-corrected Adam update, in place on the parameter tensors."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericError(f"adam_step: non-finite gradient for parameter '{name}'")
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + epsilon)


@dataclass(frozen=True)
class PlateauState:
    """Reduce-on-plateau: decay lr after `patience` is exceeded."""

    lr: float
    factor: float = 0.5
    patience: int = 2
    best: float = float("inf")
    bad_epochs: int = 0


def plateau_step(state: PlateauState, val_loss: float) -> PlateauState:
    if not np.isfinite(val_loss):
        raise NumericError(f"plateau_step: non-finite validation loss {val_loss}")
    if val_loss < state.best - IMPROVEMENT_EPS:
        return replace(state, best=val_loss, bad_epochs=0)
    bad = state.bad_epochs + 1
    if bad > state.patience:
        return replace(state, lr=state.lr * state.factor, bad_epochs=0)
    return replace(state, bad_epochs=bad)


@dataclass(frozen=True)
class EarlyStopState:
    """Stop after `patience` consecutive epochs without improvement."""

    patience: int = 5
    best: float = float("inf")
    best_epoch: int = 0
    bad_epochs: int = 0
    epoch: int = 0
    stop: bool = False


def early_stop_update(state: EarlyStopState, val_loss: float) -> EarlyStopState:
    if not np.isfinite(val_loss):
        raise NumericError(f"early_stop_update: non-finite validation loss {val_loss}")
    epoch = state.epoch + 1
    if val_loss < state.best - IMPROVEMENT_EPS:
        return replace(state, best=val_loss, best_epoch=epoch, bad_epochs=0, epoch=epoch)
    bad = state.bad_epochs + 1
    return replace(state, bad_epochs=bad, epoch=epoch, stop=bad >= state.patience)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Serialized model: configs, float32 parameter blocks, and provenance."""

    arch: str
    model_config: dict
    train_config: dict
    params: dict[str, np.ndarray]  # float32 arrays
    provenance: dict

    def params_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            arr = self.params[name]
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        names = sorted(self.params)
        blocks, offsets, offset = [], {}, 0
        for name in names:
            blob = np.ascontiguousarray(self.params[name], dtype="<f4").tobytes()
            offsets[name] = (offset, len(blob))
            blocks.append(blob)
            offset += len(blob)
        header = {
            "arch": self.arch,
            "model_config": self.model_config,
            "train_config": self.train_config,
            "provenance": self.provenance,
            "params": [
                {
                    "name": name,
                    "shape": list(self.params[name].shape),
                    "dtype": "<f4",
                    "offset": offsets[name][0],
                    "nbytes": offsets[name][1],
                }
                for name in names
            ],
        }
        head = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            for blob in blocks:
                fh.write(blob)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:8] != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        (head_len,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16 : 16 + head_len].decode())
        blob = raw[16 + head_len :]
        params = {}
        for meta in header["params"]:
            start, n = meta["offset"], meta["nbytes"]
            arr = np.frombuffer(blob[start : start + n], dtype="<f4").reshape(meta["shape"])
            expected = int(np.prod(meta["shape"])) * 4
            if n != expected:
                raise DataError(f"{path}: parameter '{meta['name']}' block size mismatch")
            params[meta["name"]] = arr.copy()
        return cls(
            arch=header["arch"],
            model_config=header["model_config"],
            train_config=header["train_config"],
            params=params,
            provenance=header["provenance"],
        )

    def build_model(self, dtype=np.float32) -> Model:
        cfg = config_from_dict(self.model_config)
        model = Model.init(cfg, seed=0, dtype=dtype)
        model.load_param_arrays(self.params)
        return model


def scans_fingerprint(scans) -> str:
    """Content hash identifying a training scan set."""
    h = hashlib.sha256()
    for s in sorted(scans, key=lambda s: s.scan_id):
        h.update(f"{s.scan_id}|{s.subject_id}|{s.age}\n".encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# training loop


def _mean_loss(losses: list[Tensor]) -> Tensor:
    if len(losses) == 1:
        return losses[0]
    return ad.mean(ad.concat([ad.reshape(l, (1,)) for l in losses], axis=0))


def _validation_loss(model: Model, scans, task: str) -> float:
    vals = [float(scan_loss(model, s, task, train=False, rng=None).data) for s in scans]
    return float(np.mean(vals))


def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def train_model(model: Model, train_scans, val_scans, cfg: TrainConfig,
                initial_lr: float | None = None, provenance: dict | None = None,
                log_fn=None) -> tuple[Checkpoint, list[dict]]:
    """Train until early stop or max_epochs; returns the best-epoch checkpoint.

    Every epoch shuffles the training scans into batches of up to batch_size
    sequences, computes the mean per-scan correlation loss, and applies one
    Adam step per batch. Validation loss drives the plateau decay and early
    stopping; the returned checkpoint holds the best-validation parameters.
    """
    if not train_scans or not val_scans:
        raise DataError("train_model: train and validation sets must be non-empty")
    hashes = {s.prep_hash for s in train_scans} | {s.prep_hash for s in val_scans}
    if len(hashes) > 1:
        raise DataError("train_model: mixed preprocessing hashes in training data")

    lr0 = cfg.lr_init if initial_lr is None else initial_lr
    dropout_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    opt = OptimizerState.for_params(model.params)
    plateau = PlateauState(lr=lr0, factor=cfg.lr_decay, patience=cfg.lr_patience)
    early = EarlyStopState(patience=cfg.early_stop_patience)

    best = {"params": model.clone_params(), "val": float("inf"), "epoch": 0}
    history: list[dict] = []
    n = len(train_scans)

    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2, epoch))).permutation(n)
        seen, weighted = 0, 0.0
        for lo in range(0, n, cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            ad.zero_grads(model.params)
            with Tape():
                losses = [
                    scan_loss(model, train_scans[i], cfg.task, True, dropout_rng) for i in batch
                ]
                loss = _mean_loss(losses)
                backward(loss)
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise NumericError(f"train_model: non-finite loss at epoch {epoch}, batch {lo // cfg.batch_size}")
            grads = {k: p.grad for k, p in model.params.items()}
            adam_step(model.params, grads, opt, plateau.lr, cfg.beta1, cfg.beta2, cfg.epsilon)
            weighted += lval * len(batch)
            seen += len(batch)
        train_loss = weighted / seen
        val_loss = _validation_loss(model, val_scans, cfg.task)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": plateau.lr})
        if log_fn is not None:
            log_fn(history[-1])

        if val_loss < best["val"] - IMPROVEMENT_EPS:
            best = {"params": model.clone_params(), "val": val_loss, "epoch": epoch}
        plateau = plateau_step(plateau, val_loss)
        early = early_stop_update(early, val_loss)
        if early.stop:
            break

    model.load_param_arrays(best["params"])
    prov = {
        "seed": cfg.seed,
        "epochs_run": len(history),
        "best_epoch": best["epoch"],
        "best_val_loss": None if not history else best["val"],
        "initial_lr": lr0,
        "train_fingerprint": scans_fingerprint(train_scans),
        "prep_hash": next(iter(hashes)),
        "n_params": count_params(model.params),
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    prov.update(provenance or {})
    ckpt = Checkpoint(
        arch=model.arch,
        model_config=model.cfg.to_dict(),
        train_config=cfg.to_dict(),
        params={k: v.astype("<f4") for k, v in best["params"].items()},
        provenance=prov,
    )
    return ckpt, history


# ---------------------------------------------------------------------------
# strategies


@dataclass
class StrategyResult:
    spec: StrategySpec
    checkpoints: list[Checkpoint]
    pretrain_checkpoint: Checkpoint | None
    report: "evaluation.EvalReport"
    histories: list[list[dict]] = field(default_factory=list)


def _pretrain(model_cfg, datasets, spec, cfg, dtype) -> tuple[Checkpoint, list[dict]]:
    source = datasets[spec.source_dataset]
    tr, va = select_validation(source, 0.15, _derived_seed(cfg.seed, 10))
    model = Model.init(config_from_dict(model_cfg.to_dict()), _derived_seed(cfg.seed, 11), dtype)
    return train_model(
        model, tr, va, cfg,
        provenance={"strategy": "pretrain", "phase": "pretrain", "dataset": spec.source_dataset},
    )


def run_strategy(spec: StrategySpec, datasets: dict[str, list], model_cfg,
                 cfg: TrainConfig, k: int = 5, dtype=np.float32) -> StrategyResult:
    """Run one training strategy over k age-balanced target folds.

    pretrain_only trains on the source once and only evaluates per target
    fold; scratch trains per fold on target data; joint_scratch adds all
    source scans to each fold's training set; finetune continues from the
    pretrain checkpoint at the fine-tuning learning rate.
    """
    if spec.target_dataset not in datasets:
        raise DataError(f"run_strategy: unknown target dataset '{spec.target_dataset}'")
    if spec.source_dataset is not None and spec.source_dataset not in datasets:
        raise DataError(f"run_strategy: unknown source dataset '{spec.source_dataset}'")
    target = datasets[spec.target_dataset]
    subjects = sorted({(s.subject_id, s.age) for s in target})
    plan = make_age_balanced_folds(subjects, k, seed=cfg.seed)

    pretrain_ckpt, pre_hist = (None, None)
    if spec.kind in ("pretrain_only", "finetune"):
        pretrain_ckpt, pre_hist = _pretrain(model_cfg, datasets, spec, cfg, dtype)

    results, checkpoints, histories = [], [], []
    for fold in range(k):
        fold_subjects = set(plan.subjects_in(fold))
        test = [s for s in target if s.subject_id in fold_subjects]
        pool = [s for s in target if s.subject_id not in fold_subjects]

        if spec.kind == "pretrain_only":
            ckpt = pretrain_ckpt
        else:
            tr, va = select_validation(pool, 0.15, _derived_seed(cfg.seed, 20, fold))
            if spec.kind == "joint_scratch":
                tr = tr + list(datasets[spec.source_dataset])
            if spec.kind == "finetune":
                model = pretrain_ckpt.build_model(dtype)
                lr = cfg.lr_finetune
                extra = {
                    "strategy": spec.kind,
                    "fold": fold,
                    "init_params_hash": pretrain_ckpt.params_hash(),
                }
            else:
                model = Model.init(config_from_dict(model_cfg.to_dict()),
                                   _derived_seed(cfg.seed, 21, fold), dtype)
                lr = None
                extra = {"strategy": spec.kind, "fold": fold}
            ckpt, hist = train_model(model, tr, va, cfg, initial_lr=lr, provenance=extra)
            checkpoints.append(ckpt)
            histories.append(hist)

        results.extend(evaluation.evaluate_scans(ckpt, test, cfg.task, fold=fold, dtype=dtype))

    if spec.kind == "pretrain_only":
        checkpoints = []
    report = evaluation.build_report(
        strategy=spec.kind,
        model_name=("seq2one" if hasattr(model_cfg, "window") else "seq2seq"),
        results=results,
        prep_hash=target[0].prep_hash if target else "",
    )
    return StrategyResult(
        spec=spec,
        checkpoints=checkpoints,
        pretrain_checkpoint=pretrain_ckpt,
        report=report,
        histories=histories if pre_hist is None else [pre_hist] + histories,
    )


def write_epoch_log(path, history: list[dict]) -> None:
    """CSV per epoch: epoch,train_loss,val_loss,lr"""
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss,lr\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['train_loss']:.9g},{row['val_loss']:.9g},{row['lr']:.9g}\n")
