"""Query-based decoder that splits the feature map into an instrument
part and a confounder part, plus the two auxiliary losses that shape
them.

Each layer computes one attention matrix A over spatial cells; the
instrument branch reads A @ F, the confounder branch (1 - A) @ F, so the
two branches sum exactly to the replicated column-sums of F.  The
instrument head is trained to classify, the confounder head is pushed
toward a uniform class distribution.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericFault
from .optim import Parameter

PROB_FLOOR = 1e-12


def init_decoder(
    d: int, layers: int, rng: np.random.Generator, prefix: str = "decoder"
) -> dict[str, Parameter]:
    """Inter-layer projections start at zero so layer l+1 initially sees
    exactly the instrument output of layer l (pure residual path)."""
    if layers < 1:
        raise ContractError(f"decoder needs at least one layer, got {layers}")
    params: dict[str, Parameter] = {}
    for i in range(layers - 1):
        params[f"{prefix}.proj{i}.weight"] = Parameter(
            np.zeros((d, d)), f"{prefix}.proj{i}.weight"
        )
        params[f"{prefix}.proj{i}.bias"] = Parameter(np.zeros(d), f"{prefix}.proj{i}.bias")
    return params


def init_class_head(
    d: int, rng: np.random.Generator, name: str
) -> dict[str, Parameter]:
    limit = 1.0 / math.sqrt(d)
    return {
        f"{name}.weight": Parameter(rng.uniform(-limit, limit, size=(d, 1)), f"{name}.weight"),
        f"{name}.bias": Parameter(np.zeros(1), f"{name}.bias"),
    }


def decode_layer(queries: Tensor, fmap_flat: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """One decoupling step.

    queries: (k, d) or (B, k, d); fmap_flat: (hw, d) or (B, hw, d).
    Returns (instrument, confounder, attention); instrument + confounder
    equals the column-sums of fmap_flat replicated across the k rows.
    """
    if queries.shape[-1] != fmap_flat.shape[-1]:
        raise ContractError(
            f"query dim {queries.shape} does not match feature dim {fmap_flat.shape}"
        )
    d = queries.shape[-1]
    logits = (queries @ fmap_flat.transpose(*_swap_last(fmap_flat.ndim))) * (1.0 / math.sqrt(d))
    attn = logits.softmax()
    instrument = attn @ fmap_flat
    confounder = (1.0 - attn) @ fmap_flat
    return instrument, confounder, attn


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def run_decoder(
    fmap_flat: Tensor,
    k: int,
    layers: int,
    params: dict[str, Parameter],
    prefix: str = "decoder",
) -> tuple[Tensor, Tensor, Tensor]:
    """Apply the decoder stack from zero-initialized queries.

    Returns (I_prime, C, A_final): the layer-L instrument and confounder
    outputs and the final attention matrix (kept for heatmap export).
    """
    if layers < 1:
        raise ContractError(f"decoder layer count must be >= 1, got {layers}")
    d = fmap_flat.shape[-1]
    queries: Tensor = Tensor(np.zeros((k, d)))
    instrument = confounder = attn = None
    for layer in range(layers):
        instrument, confounder, attn = decode_layer(queries, fmap_flat)
        if layer < layers - 1:
            w = params[f"{prefix}.proj{layer}.weight"].tensor
            b = params[f"{prefix}.proj{layer}.bias"].tensor
            queries = instrument + ad.linear(instrument, w, b)
    return instrument, confounder, attn


def class_scores(rep: Tensor, params: dict[str, Parameter], head: str) -> Tensor:
    """Shared affine map d -> 1 applied to each of the k query rows."""
    w = params[f"{head}.weight"].tensor
    b = params[f"{head}.bias"].tensor
    out = rep @ w + b
    return out.reshape(*out.shape[:-1])


def _check_binary(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ContractError(
            f"labels must be binary, got values {sorted(set(np.unique(labels)) - {0, 1})}"
        )
    return labels.astype(float)


def bce_mean(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with the 1e-12 probability floor."""
    y = Tensor(_check_binary(labels))
    pos = probs.clip(PROB_FLOOR, None).log() * y
    neg = (1.0 - probs).clip(PROB_FLOOR, None).log() * (1.0 - y)
    return -(pos + neg).mean()


def iv_loss(i_prime: Tensor, labels: np.ndarray, params: dict[str, Parameter]) -> Tensor:
    """Per-class sigmoid BCE on the instrument head."""
    probs = class_scores(i_prime, params, "head_i").sigmoid()
    return bce_mean(probs, labels)


def confounder_loss(confounder: Tensor, params: dict[str, Parameter]) -> Tensor:
    """KL(uniform || softmax of confounder-head scores); zero iff uniform."""
    k = confounder.shape[-2]
    if k < 2:
        raise ContractError(f"confounder loss needs k >= 2 classes, got {k}")
    scores = class_scores(confounder, params, "head_c")
    probs = scores.softmax().clip(PROB_FLOOR, None)
    if not (probs.data > 0).all():
        raise NumericFault("confounder head produced a zero/NaN probability")
    log_u = math.log(1.0 / k)
    kl = (log_u - probs.log()).sum(axis=-1) * (1.0 / k)
    return kl.mean()
