"""ROC-AUC via the Mann-Whitney statistic and split evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import LoadedSplit
from .errors import ContractError


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability that a random positive outranks a random negative,
    ties counted one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError(f"auc needs paired 1-D arrays, got {scores.shape}, {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ContractError("auc labels must be binary")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError(
            f"auc undefined: need both classes, got {n_pos} positives / {n_neg} negatives"
        )
    ranks = _average_ranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=float)
    ranks[order] = np.arange(1, values.size + 1)
    # average ranks within tied groups
    uniq, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    sums = np.zeros(uniq.size)
    np.add.at(sums, inverse, ranks)
    return sums[inverse] / counts[inverse]


@dataclass
class EvalResult:
    split: str
    per_class: list[float | None]  # None where AUC is undefined (single class)
    mean_auc: float

    def defined(self) -> list[float]:
        return [a for a in self.per_class if a is not None]


def score_split(model, split: LoadedSplit, batch_size: int = 64) -> np.ndarray:
    """Deterministic forward pass over a split; returns (n, k) scores."""
    n = len(split)
    out = np.zeros((n, split.labels.shape[1]))
    tokens = model.prepare_tokens(split.tokens)
    with ad.no_grad():
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            images = Tensor(split.images[start:stop])
            fwd = model.forward(images, tokens[start:stop])
            out[start:stop] = fwd.scores.data
    return out


def evaluate(model, split: LoadedSplit, name: str = "test", batch_size: int = 64) -> EvalResult:
    """Per-class AUC and the mean over classes where it is defined."""
    if len(split) == 0:
        raise ContractError("evaluate needs a non-empty split")
    scores = score_split(model, split, batch_size)
    per_class: list[float | None] = []
    for c in range(split.labels.shape[1]):
        try:
            per_class.append(auc(scores[:, c], split.labels[:, c]))
        except ContractError:
            per_class.append(None)
    defined = [a for a in per_class if a is not None]
    if not defined:
        raise ContractError("evaluate: AUC undefined for every class")
    return EvalResult(name, per_class, float(np.mean(defined)))
