"""Linear probes on frozen embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError

TASKS = ("regression", "classification")
DEFAULT_LR = {"regression": 0.5, "classification": 2.0}


@dataclass(frozen=True)
class ProbeParams:
    weight: np.ndarray  # [d, outputs]
    bias: np.ndarray  # [outputs]
    task: str

    def predict(self, embeddings) -> np.ndarray:
        out = np.asarray(embeddings, dtype=np.float64) @ self.weight + self.bias
        return out[:, 0] if self.task == "regression" else out


def fit_probe(
    embeddings,
    targets,
    task: str,
    lr: float | None = None,
    steps: int = 2000,
    seed: int = 0,
    n_classes: int | None = None,
) -> ProbeParams:
    """Full-batch gradient descent with cosine-decayed step size.

    Regression minimizes mean absolute error, classification cross-entropy.
    The inputs are copied; nothing upstream is touched.
    """
    if task not in TASKS:
        raise InvalidInputError(f"unknown probe task {task!r}")
    X = torch.as_tensor(np.array(embeddings, dtype=np.float64))
    if X.ndim != 2 or len(X) == 0:
        raise InvalidInputError("probe needs a nonempty [n, d] embedding matrix")
    n, d = X.shape
    if task == "classification":
        y = torch.as_tensor(np.asarray(targets, dtype=np.int64))
        k = int(n_classes if n_classes is not None else int(y.max()) + 1)
        if (y < 0).any() or (y >= k).any():
            raise InvalidInputError(f"class labels outside [0, {k})")
    else:
        y = torch.as_tensor(np.asarray(targets, dtype=np.float64))
        k = 1
    if len(y) != n:
        raise InvalidInputError("targets and embeddings differ in length")
    lr = DEFAULT_LR[task] if lr is None else lr

    gen = torch.Generator().manual_seed(seed)
    W = (torch.randn(d, k, generator=gen, dtype=torch.float64) * 0.01).requires_grad_()
    b = torch.zeros(k, dtype=torch.float64, requires_grad=True)
    for step in range(steps):
        out = X @ W + b
        if task == "regression":
            loss = (out[:, 0] - y).abs().mean()
        else:
            loss = F.cross_entropy(out, y)
        gW, gb = torch.autograd.grad(loss, (W, b))
        eta = lr * 0.5 * (1.0 + math.cos(math.pi * step / steps))
        with torch.no_grad():
            W -= eta * gW
            b -= eta * gb
    return ProbeParams(W.detach().numpy().copy(), b.detach().numpy().copy(), task)


def pearson_r(pred, target) -> float | None:
    """Pearson correlation, or ``None`` if either side has zero variance."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    pc, tc = p - p.mean(), t - t.mean()
    denom = math.sqrt(float((pc * pc).sum() * (tc * tc).sum()))
    if denom == 0.0:
        return None
    return float((pc * tc).sum() / denom)


def eval_regression(probe: ProbeParams, embeddings, targets) -> dict:
    pred = probe.predict(embeddings)
    t = np.asarray(targets, dtype=np.float64)
    return {"l1": float(np.abs(pred - t).mean()), "pearson_r": pearson_r(pred, t)}


def average_precision(scores, labels) -> float | None:
    """Step-interpolated AP: precision at each threshold weighted by the positives it adds, over P.

    Tied scores form one threshold.  ``None`` when there are no positives.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    P = int(y.sum())
    if P == 0:
        return None
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of every run of equal scores
    ends = np.r_[np.flatnonzero(s[1:] != s[:-1]), len(s) - 1]
    tp_at = tp[ends]
    precision = tp_at / (ends + 1)
    new_positives = np.diff(np.r_[0, tp_at])
    return float(np.sum(new_positives * precision) / P)


def eval_classification(probe: ProbeParams, embeddings, labels) -> dict:
    logits = probe.predict(embeddings)
    y = np.asarray(labels, dtype=np.int64)
    k = logits.shape[1]
    if (y < 0).any() or (y >= k).any():
        raise InvalidInputError(f"class labels outside [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    ce = float(-log_p[np.arange(len(y)), y].mean())
    per_class = [average_precision(log_p[:, c], y == c) for c in range(k)]
    defined = [v for v in per_class if v is not None]
    return {
        "ce": ce,
        "macro_aupr": float(np.mean(defined)) if defined else None,
        "per_class_aupr": per_class,
        "undefined_classes": [c for c, v in enumerate(per_class) if v is None],
    }
