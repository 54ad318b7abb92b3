"""Last-layer retraining: multinomial logistic regression on frozen features.

Training is deterministic full-batch gradient descent with Armijo backtracking
on the mean cross-entropy plus ``l2_lambda / 2 * ||W||_F^2`` (the bias is not
penalised).  All arithmetic is float64; heads are stored on disk as float32.
"""

from __future__ import annotations

import json
import os
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

HEAD_MAGIC = b"SPRKHEAD"
HEAD_VERSION = 1

ARMIJO_C1 = 1e-4
BACKTRACK = 0.5
STEP_GROWTH = 2.0
MAX_BACKTRACKS = 60


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    l2_lambda: float = 1e-4
    max_iters: int = 1000
    tolerance: float = 1e-6
    seed: int = 0
    initial_step: float = 1.0

    def __post_init__(self):
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class LinearHead:
    W: np.ndarray
    b: np.ndarray
    class_ids: tuple[int, ...]
    backbone_id: str = ""
    train_info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.W = np.asarray(self.W)
        self.b = np.asarray(self.b)
        self.class_ids = tuple(int(c) for c in self.class_ids)
        C = len(self.class_ids)
        if C < 2:
            raise ValueError("a head needs at least 2 classes")
        if list(self.class_ids) != sorted(set(self.class_ids)):
            raise ValueError("class_ids must be strictly increasing")
        if self.W.ndim != 2 or self.W.shape[0] != C or self.b.shape != (C,):
            raise ValueError(f"W must be {C} x d and b of length {C}")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise ValueError("head parameters must be finite")

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def logits(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.d:
            raise ValueError(f"feature dimension {X.shape[-1]} does not match head d={self.d}")
        return X @ self.W.astype(np.float64).T + self.b.astype(np.float64)


def _softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def _log_softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    return Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))


def objective(W: np.ndarray, b: np.ndarray, X: np.ndarray, y_idx: np.ndarray,
              l2_lambda: float) -> float:
    """Mean softmax cross-entropy plus the Frobenius penalty on W."""
    logp = _log_softmax(X @ W.T + b)
    n = X.shape[0]
    return float(-logp[np.arange(n), y_idx].mean() + 0.5 * l2_lambda * np.sum(W * W))


def objective_and_grad(W: np.ndarray, b: np.ndarray, X: np.ndarray, y_idx: np.ndarray,
                       l2_lambda: float) -> tuple[float, np.ndarray, np.ndarray]:
    n = X.shape[0]
    Z = X @ W.T + b
    logp = _log_softmax(Z)
    f = float(-logp[np.arange(n), y_idx].mean() + 0.5 * l2_lambda * np.sum(W * W))
    R = np.exp(logp)
    R[np.arange(n), y_idx] -= 1.0
    R /= n
    gW = R.T @ X + l2_lambda * W
    gb = R.sum(axis=0)
    return f, gW, gb


def _label_indices(labels: np.ndarray, class_ids: Sequence[int]) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(class_ids)}
    try:
        return np.array([lookup[int(l)] for l in labels], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]} not among class_ids {list(class_ids)}") from None


def train_head(features, config: TrainConfig = TrainConfig(),
               class_ids: Sequence[int] | None = None) -> LinearHead:
    """Fit a linear head from zero initialisation.

    ``features`` is a FeatureMatrix (anything with ``values``, ``labels`` and
    ``backbone_id``).  Stops when the gradient norm drops to ``tolerance`` or
    after ``max_iters`` accepted steps.  ``train_info`` records the objective
    after every accepted step, the final gradient norm and a status string.
    """
    X = np.asarray(features.values, dtype=np.float64)
    labels = np.asarray(features.labels)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training needs a nonempty n x d feature matrix")
    if not np.all(np.isfinite(X)):
        raise ValueError("training features contain non-finite values")
    if class_ids is None:
        class_ids = sorted(set(int(l) for l in labels))
    class_ids = tuple(sorted(int(c) for c in class_ids))
    if len(class_ids) < 2:
        raise ValueError("training needs at least 2 classes")
    y = _label_indices(labels, class_ids)
    counts = np.bincount(y, minlength=len(class_ids))
    empty = [class_ids[i] for i in np.flatnonzero(counts == 0)]
    if empty:
        raise ValueError(f"classes with zero training samples: {empty}")

    lam = float(config.l2_lambda)
    C, d = len(class_ids), X.shape[1]
    W = np.zeros((C, d))
    b = np.zeros(C)
    f, gW, gb = objective_and_grad(W, b, X, y, lam)
    history = [f]
    step = float(config.initial_step)
    status = "max_iters"
    it = 0
    while True:
        gnorm2 = float(np.sum(gW * gW) + np.sum(gb * gb))
        gnorm = gnorm2 ** 0.5
        if gnorm <= config.tolerance:
            status = "converged"
            break
        if it >= config.max_iters:
            break
        for _ in range(MAX_BACKTRACKS):
            W_new = W - step * gW
            b_new = b - step * gb
            f_new = objective(W_new, b_new, X, y, lam)
            if np.isfinite(f_new) and f_new <= f - ARMIJO_C1 * step * gnorm2:
                break
            step *= BACKTRACK
        else:
            status = "line_search_failed"
            warnings.warn(
                f"line search failed at iteration {it} (objective {f:.6g}, "
                f"gradient norm {gnorm:.3g}); returning the last accepted iterate",
                RuntimeWarning, stacklevel=2)
            break
        W, b = W_new, b_new
        f, gW, gb = objective_and_grad(W, b, X, y, lam)
        if not np.isfinite(f):
            raise TrainingError(f"objective diverged to {f} at iteration {it}")
        history.append(f)
        it += 1
        step *= STEP_GROWTH

    info = {
        "objective": f,
        "iterations": it,
        "grad_norm": float(np.sqrt(np.sum(gW * gW) + np.sum(gb * gb))),
        "status": status,
        "history": history,
        "config": asdict(config),
        "threads": os.environ.get("OMP_NUM_THREADS", "default"),
    }
    return LinearHead(W=W, b=b, class_ids=class_ids,
                      backbone_id=getattr(features, "backbone_id", ""), train_info=info)


def predict(head: LinearHead, features) -> tuple[np.ndarray, np.ndarray]:
    """Per-row (argmax class_id, probability vector).  Ties go to the lowest class_id."""
    X = getattr(features, "values", features)
    P = _softmax(head.logits(X))
    idx = np.argmax(P, axis=1)
    return np.asarray(head.class_ids, dtype=np.int64)[idx], P


@dataclass(frozen=True)
class Accuracy:
    accuracy: float
    per_class: dict[int, float]
    n: int
    correct: int


def accuracy_from_predictions(pred: np.ndarray, labels: np.ndarray) -> Accuracy:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise ValueError("accuracy over zero rows is undefined")
    hit = pred == labels
    per_class = {int(c): float(hit[labels == c].mean()) for c in np.unique(labels)}
    return Accuracy(float(hit.sum()) / n, per_class, n, int(hit.sum()))


def evaluate_accuracy(head: LinearHead, features) -> Accuracy:
    pred, _ = predict(head, features)
    return accuracy_from_predictions(pred, features.labels)


# --------------------------------------------------------------------------
# head file: magic, version, header length, JSON header, W (C*d) then b (C), float32 LE

def save_head(head: LinearHead, path: str | os.PathLike) -> None:
    info = {k: v for k, v in head.train_info.items() if k != "history"}
    header = {
        "C": len(head.class_ids),
        "d": head.d,
        "class_ids": list(head.class_ids),
        "backbone_id": head.backbone_id,
        "train": info,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(HEAD_MAGIC)
        fh.write(struct.pack("<II", HEAD_VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(head.W, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(head.b, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_head(path: str | os.PathLike) -> LinearHead:
    with open(path, "rb") as fh:
        if fh.read(8) != HEAD_MAGIC:
            raise ValueError(f"{path}: not a head file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != HEAD_VERSION:
            raise ValueError(f"{path}: unsupported head version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        C, d = header["C"], header["d"]
        W = np.frombuffer(fh.read(4 * C * d), dtype="<f4").reshape(C, d)
        b = np.frombuffer(fh.read(4 * C), dtype="<f4")
        if b.shape != (C,):
            raise ValueError(f"{path}: truncated head payload")
    return LinearHead(W=W.astype(np.float32), b=b.astype(np.float32),
                      class_ids=header["class_ids"], backbone_id=header["backbone_id"],
                      train_info=header.get("train", {}))
