"""Learned conditional-density estimators and the pairwise MI losses.

The density is a diagonal Gaussian whose mean and log-variance come
from a 2-hidden-layer perceptron; the MI surrogate is the contrastive
double sum over a mini-batch

    (1/n^2) sum_i sum_j [log f(t_i | c_i) - log f(t_j | c_i)]

which is exactly zero whenever the estimator ignores its conditioning
input.  Estimator fitting and main-model updates are strictly separate:
the loss treats estimator parameters as constants, the fit step sees
detached representations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .optim import Parameter, adam_step

log = logging.getLogger(__name__)

LOGVAR_MIN = -6.0
LOGVAR_MAX = 6.0
_HIDDEN = 64
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class CondDensityEstimator:
    """Diagonal-Gaussian conditional density q(target | cond)."""

    cond_dim: int
    target_dim: int
    role: str
    params: dict[str, Parameter] = field(default_factory=dict)

    @staticmethod
    def create(cond_dim: int, target_dim: int, role: str, rng: np.random.Generator) -> "CondDensityEstimator":
        est = CondDensityEstimator(cond_dim, target_dim, role)
        shapes = {
            "w0": (cond_dim, _HIDDEN),
            "w1": (_HIDDEN, _HIDDEN),
            "w_mu": (_HIDDEN, target_dim),
            "w_lv": (_HIDDEN, target_dim),
        }
        for name, shape in shapes.items():
            limit = 1.0 / math.sqrt(shape[0])
            full = f"est_{role}.{name}"
            est.params[full] = Parameter(rng.uniform(-limit, limit, size=shape), full)
        for name, dim in (("b0", _HIDDEN), ("b1", _HIDDEN), ("b_mu", target_dim), ("b_lv", target_dim)):
            full = f"est_{role}.{name}"
            est.params[full] = Parameter(np.zeros(dim), full)
        return est

    def _p(self, name: str, frozen: bool) -> Tensor:
        t = self.params[f"est_{self.role}.{name}"].tensor
        return t.detach() if frozen else t

    def head(self, cond: Tensor, frozen: bool) -> tuple[Tensor, Tensor]:
        """Mean and clamped log-variance for each conditioning row."""
        h = ad.linear(cond, self._p("w0", frozen), self._p("b0", frozen)).relu()
        h = ad.linear(h, self._p("w1", frozen), self._p("b1", frozen)).relu()
        mu = ad.linear(h, self._p("w_mu", frozen), self._p("b_mu", frozen))
        logvar = ad.linear(h, self._p("w_lv", frozen), self._p("b_lv", frozen)).clip(
            LOGVAR_MIN, LOGVAR_MAX
        )
        return mu, logvar


def _gauss_logp(target: Tensor, mu: Tensor, logvar: Tensor, target_dim: int) -> Tensor:
    """log N(target; mu, diag exp(logvar)), summed over the target axis."""
    diff = target - mu
    inv_var = (-logvar).exp()
    quad = (diff * diff * inv_var).sum(axis=-1)
    return (quad + logvar.sum(axis=-1)) * -0.5 - (0.5 * target_dim * _LOG_2PI)


def cond_log_density(est: CondDensityEstimator, cond, target, frozen: bool = True) -> Tensor:
    """Log-density of ``target`` rows under the estimator conditioned on
    the paired ``cond`` rows.  Accepts (D,) vectors or (n, D) batches."""
    cond_t = cond if isinstance(cond, Tensor) else Tensor(cond)
    target_t = target if isinstance(target, Tensor) else Tensor(target)
    squeeze = cond_t.ndim == 1
    if squeeze:
        cond_t = cond_t.reshape(1, cond_t.shape[0])
        target_t = target_t.reshape(1, target_t.shape[0])
    if cond_t.shape[-1] != est.cond_dim or target_t.shape[-1] != est.target_dim:
        raise ContractError(
            f"estimator {est.role} expects dims ({est.cond_dim}, {est.target_dim}), "
            f"got ({cond_t.shape[-1]}, {target_t.shape[-1]})"
        )
    mu, logvar = est.head(cond_t, frozen)
    logp = _gauss_logp(target_t, mu, logvar, est.target_dim)
    return logp.reshape(()) if squeeze else logp


def mi_pairwise_loss(est: CondDensityEstimator, conds: Tensor, targets: Tensor, sign: int) -> Tensor:
    """Contrastive MI surrogate over one mini-batch.

    sign=+1 penalizes dependence (minimize MI), sign=-1 rewards it
    (maximize MI).  Gradients reach only the representations: estimator
    parameters are treated as constants here.
    """
    if sign not in (1, -1):
        raise ContractError(f"sign must be +1 or -1, got {sign}")
    n = conds.shape[0]
    if n == 0:
        raise ContractError("mi_pairwise_loss needs a non-empty batch")
    mu, logvar = est.head(conds, frozen=True)  # (n, Dt)
    diag = _gauss_logp(targets, mu, logvar, est.target_dim)  # (n,)
    # log f(target_j | cond_i) for all pairs: broadcast (n,1,Dt) vs (1,n,Dt)
    mu_i = mu.reshape(n, 1, est.target_dim)
    lv_i = logvar.reshape(n, 1, est.target_dim)
    t_j = targets.reshape(1, n, est.target_dim)
    full = _gauss_logp(t_j, mu_i, lv_i, est.target_dim)  # (n, n)
    return (diag.mean() - full.mean()) * float(sign)


def estimator_nll(est: CondDensityEstimator, conds, targets, frozen: bool) -> Tensor:
    """Mean negative log-likelihood of paired samples."""
    return -cond_log_density(est, conds, targets, frozen=frozen).mean()


def estimator_fit_step(
    est: CondDensityEstimator,
    conds: np.ndarray,
    targets: np.ndarray,
    lr: float = 1e-3,
    max_retries: int = 3,
) -> float:
    """One maximum-likelihood Adam step on the estimator.

    The step must not increase the mini-batch NLL; otherwise it is
    rolled back and retried at half the rate up to ``max_retries``
    times, after which the last attempt is accepted and logged.
    Representations arrive as plain arrays, so no gradient can reach
    the main model.
    """
    conds = np.asarray(conds)
    targets = np.asarray(targets)
    params = list(est.params.values())
    before = estimator_nll(est, conds, targets, frozen=True).item()
    snapshot = [(p.data.copy(), p.m.copy(), p.v.copy(), p.step) for p in params]

    rate = lr
    for attempt in range(max_retries + 1):
        for p in params:
            p.zero_grad()
        estimator_nll(est, conds, targets, frozen=False).backward()
        adam_step(params, lr=rate, weight_decay=0.0)
        after = estimator_nll(est, conds, targets, frozen=True).item()
        if after <= before or rate == 0.0:
            return after
        if attempt < max_retries:
            for p, (data, m, v, step) in zip(params, snapshot):
                p.tensor.data = data.copy()
                p.m = m.copy()
                p.v = v.copy()
                p.step = step
            rate *= 0.5
    log.warning(
        "estimator %s fit step accepted despite NLL increase (%.6f -> %.6f)",
        est.role, before, after,
    )
    return after
