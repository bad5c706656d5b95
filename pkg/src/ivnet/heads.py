"""Causal representation, final classifier, task loss, total objective."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoder import bce_mean
from .errors import ContractError, NumericFault
from .optim import Parameter

LOSS_TERMS = ("L_I", "L_C", "L_IC", "L_IR", "L_IY", "L_Y")


def init_causal_head(
    d: int, d_r: int, rng: np.random.Generator, prefix: str = "causal"
) -> dict[str, Parameter]:
    params: dict[str, Parameter] = {}
    lim1 = 1.0 / math.sqrt(2 * d)
    lim2 = 1.0 / math.sqrt(d_r)
    params[f"{prefix}.mlp1.weight"] = Parameter(
        rng.uniform(-lim1, lim1, size=(2 * d, d_r)), f"{prefix}.mlp1.weight"
    )
    params[f"{prefix}.mlp1.bias"] = Parameter(np.zeros(d_r), f"{prefix}.mlp1.bias")
    params[f"{prefix}.mlp2.weight"] = Parameter(
        rng.uniform(-lim2, lim2, size=(d_r, d_r)), f"{prefix}.mlp2.weight"
    )
    params[f"{prefix}.mlp2.bias"] = Parameter(np.zeros(d_r), f"{prefix}.mlp2.bias")
    return params


def init_classifier(
    d_r: int, d: int, rng: np.random.Generator, prefix: str = "classifier"
) -> dict[str, Parameter]:
    lim = 1.0 / math.sqrt(d_r + d)
    return {
        f"{prefix}.weight": Parameter(
            rng.uniform(-lim, lim, size=(d_r + d, 1)), f"{prefix}.weight"
        ),
        f"{prefix}.bias": Parameter(np.zeros(1), f"{prefix}.bias"),
    }


def causal_rep(
    instrument: Tensor,
    confounder: Tensor,
    params: dict[str, Parameter],
    prefix: str = "causal",
) -> Tensor:
    """Point-wise 2-layer perceptron over per-class [I_row | C_row]."""
    if instrument.shape != confounder.shape:
        raise ContractError(
            f"instrument {instrument.shape} and confounder {confounder.shape} differ"
        )
    x = ad.concat([instrument, confounder])
    h = ad.linear(
        x, params[f"{prefix}.mlp1.weight"].tensor, params[f"{prefix}.mlp1.bias"].tensor
    ).relu()
    return ad.linear(
        h, params[f"{prefix}.mlp2.weight"].tensor, params[f"{prefix}.mlp2.bias"].tensor
    )


def predict(
    causal: Tensor,
    confounder: Tensor,
    params: dict[str, Parameter],
    prefix: str = "classifier",
    stop_grad_confounder: bool = False,
) -> Tensor:
    """Per-class probability sigmoid(affine([R_row | C_row]))."""
    c = confounder.detach() if stop_grad_confounder else confounder
    x = ad.concat([causal, c])
    out = ad.linear(x, params[f"{prefix}.weight"].tensor, params[f"{prefix}.bias"].tensor)
    return out.reshape(*out.shape[:-1]).sigmoid()


def task_loss(scores: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-class binary cross-entropy of the final classifier."""
    return bce_mean(scores, labels)


def total_loss(terms: dict[str, Tensor], weights: dict[str, float]) -> Tensor:
    """Weighted sum of the six objective terms (default weights 1.0)."""
    missing = [t for t in LOSS_TERMS if t not in terms]
    if missing:
        raise ContractError(f"total_loss missing terms: {missing}")
    total: Tensor | None = None
    for name in LOSS_TERMS:
        term = terms[name]
        if not np.isfinite(term.data).all():
            raise NumericFault(f"loss term {name} is non-finite")
        piece = term * float(weights.get(name, 1.0))
        total = piece if total is None else total + piece
    return total
