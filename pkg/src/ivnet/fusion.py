"""Auxiliary-record tokenization, embedding, and cross-attention fusion.

Records are id sequences over a small vocabulary (id 0 = pad, id 1 =
the classification token).  Fusion lets each instrument row attend over
the non-pad token embeddings; output projections start at zero so the
whole stack is the identity map at initialization.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DataFormatError
from .optim import Parameter

PAD_ID = 0
CLS_ID = 1

_MASK_NEG = -1e9


def tokenize_pad(words: Sequence[int], max_len: int = 256, cls_id: int = CLS_ID) -> np.ndarray:
    """[CLS, w1..wn, 0...] of fixed length; over-long records are
    truncated from the right."""
    ids = np.asarray(list(words), dtype=np.int64)
    if ids.size and ids.min() <= 0:
        raise ContractError(f"token ids must be positive (0 is pad), got {ids.min()}")
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")
    out = np.zeros(max_len, dtype=np.int64)
    out[0] = cls_id
    body = ids[: max_len - 1]
    out[1: 1 + body.size] = body
    return out


def embed_tokens(tokens: np.ndarray, table: Parameter) -> Tensor:
    """Row lookup; pad positions are forced to zero regardless of what
    the table holds at row 0."""
    tokens = np.asarray(tokens, dtype=np.int64)
    emb = ad.gather_rows(table.tensor, tokens)
    mask = (tokens != PAD_ID).astype(table.tensor.data.dtype)[..., None]
    return emb * Tensor(mask)


def init_fusion(
    d: int, d_t: int, layers: int, rng: np.random.Generator, prefix: str = "fusion"
) -> dict[str, Parameter]:
    params: dict[str, Parameter] = {}
    limit = 1.0 / math.sqrt(d_t)
    params[f"{prefix}.text_proj.weight"] = Parameter(
        rng.uniform(-limit, limit, size=(d_t, d)), f"{prefix}.text_proj.weight"
    )
    hidden = 2 * d
    lim_d = 1.0 / math.sqrt(d)
    for i in range(layers):
        # attention output projection and second FFN layer start at zero:
        # residual identity at init.
        params[f"{prefix}.layer{i}.attn_out.weight"] = Parameter(
            np.zeros((d, d)), f"{prefix}.layer{i}.attn_out.weight"
        )
        params[f"{prefix}.layer{i}.ffn1.weight"] = Parameter(
            rng.uniform(-lim_d, lim_d, size=(d, hidden)), f"{prefix}.layer{i}.ffn1.weight"
        )
        params[f"{prefix}.layer{i}.ffn1.bias"] = Parameter(
            np.zeros(hidden), f"{prefix}.layer{i}.ffn1.bias"
        )
        params[f"{prefix}.layer{i}.ffn2.weight"] = Parameter(
            np.zeros((hidden, d)), f"{prefix}.layer{i}.ffn2.weight"
        )
        params[f"{prefix}.layer{i}.ffn2.bias"] = Parameter(
            np.zeros(d), f"{prefix}.layer{i}.ffn2.bias"
        )
    return params


def fuse(
    i_prime: Tensor,
    embeddings: Tensor,
    tokens: np.ndarray,
    params: dict[str, Parameter],
    layers: int,
    include_cls: bool = True,
    prefix: str = "fusion",
) -> Tensor:
    """Cross-attention fusion of instrument rows with token embeddings.

    i_prime: (k, d) or (B, k, d); embeddings: (max_len, d_t) matching
    leading dims.  Zero layers is the empty composition (returns i_prime
    unchanged); a record with no attendable position falls back to the
    identity for that sample instead of producing NaN.
    """
    if layers == 0:
        return i_prime
    tokens = np.asarray(tokens, dtype=np.int64)
    d = i_prime.shape[-1]

    # Trim trailing positions that are pad in every sample of the batch.
    # They carry exactly-zero weight and zero value, but dropping them
    # keeps the matmul shapes (and therefore the bits) independent of
    # how much padding the buffer happened to have.
    nonpad = tokens != PAD_ID
    extent = int(np.max(np.where(nonpad.any(axis=tuple(range(nonpad.ndim - 1))))[0]) + 1) \
        if nonpad.any() else 1
    tokens = tokens[..., :extent]
    embeddings = _take_positions(embeddings, extent)

    valid = tokens != PAD_ID
    if not include_cls:
        valid = valid.copy()
        valid[..., 0] = False

    w_t = params[f"{prefix}.text_proj.weight"].tensor
    values = embeddings @ w_t  # (..., extent, d)
    dtype = i_prime.data.dtype
    mask_add = Tensor(np.where(valid, 0.0, _MASK_NEG).astype(dtype)[..., None, :])
    has_support = valid.any(axis=-1)
    keep = Tensor(
        np.where(has_support, 1.0, 0.0).astype(dtype).reshape(has_support.shape + (1, 1))
        if has_support.ndim
        else np.float64(has_support)
    )

    out = i_prime
    for i in range(layers):
        logits = (out @ values.transpose(*_swap_last(values.ndim))) * (1.0 / math.sqrt(d))
        attn = (logits + mask_add).softmax()
        ctx = attn @ values
        w_o = params[f"{prefix}.layer{i}.attn_out.weight"].tensor
        out = out + ctx @ w_o
        w1 = params[f"{prefix}.layer{i}.ffn1.weight"].tensor
        b1 = params[f"{prefix}.layer{i}.ffn1.bias"].tensor
        w2 = params[f"{prefix}.layer{i}.ffn2.weight"].tensor
        b2 = params[f"{prefix}.layer{i}.ffn2.bias"].tensor
        out = out + ad.linear(ad.linear(out, w1, b1).relu(), w2, b2)

    # identity fallback for samples whose whole record is masked out
    return keep * out + (1.0 - keep) * i_prime


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _take_positions(embeddings: Tensor, extent: int) -> Tensor:
    """Slice the first ``extent`` positions along the second-to-last axis."""
    idx = np.arange(extent)
    if embeddings.ndim == 2:
        return ad.gather_rows(embeddings, idx)
    moved = embeddings.transpose(1, 0, 2)
    return ad.gather_rows(moved, idx).transpose(1, 0, 2)


def load_vocab(path: str | Path) -> list[str]:
    """Vocabulary file: one token per line, line number = id; line 0
    must be "<pad>", line 1 "<cls>"."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 2 or lines[0] != "<pad>" or lines[1] != "<cls>":
        raise DataFormatError(
            f"{path}: vocabulary must start with '<pad>' and '<cls>' lines"
        )
    return lines


def save_vocab(path: str | Path, tokens: Sequence[str]) -> None:
    tokens = list(tokens)
    if len(tokens) < 2 or tokens[0] != "<pad>" or tokens[1] != "<cls>":
        raise ContractError("vocabulary must start with '<pad>' and '<cls>'")
    Path(path).write_text("\n".join(tokens) + "\n", encoding="utf-8")
