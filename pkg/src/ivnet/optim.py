"""Adam with decoupled weight decay, plus the finite-difference checker.

The decay term is applied directly to the weights (theta -= lr * wd *
theta), never folded into the adaptive gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ContractError


class Parameter:
    """A trainable tensor with a name and its Adam state."""

    def __init__(self, data, name: str):
        self.tensor = Tensor(data, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)
        self.step = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = np.asarray(value, dtype=self.tensor.data.dtype)

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.tensor.shape}, step={self.step})"


def adam_step(
    params: Sequence[Parameter],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One Adam update with bias correction and decoupled decay.

    Every parameter must carry a gradient; grad slots are cleared after
    the update so accumulation always starts from a backward pass.
    """
    for p in params:
        if p.tensor.grad is None:
            raise ContractError(f"adam_step: parameter '{p.name}' has no gradient")
    for p in params:
        g = p.tensor.grad
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.tensor.data = p.tensor.data - lr * (
            m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.tensor.data
        )
        p.zero_grad()


@dataclass
class Probe:
    param: str
    index: int
    analytic: float
    numeric: float
    rel_err: float
    ok: bool


@dataclass
class FiniteDiffReport:
    probes: list[Probe] = field(default_factory=list)
    rel_tol: float = 0.0

    @property
    def passed(self) -> bool:
        return all(p.ok for p in self.probes)

    @property
    def max_rel_err(self) -> float:
        return max((p.rel_err for p in self.probes), default=0.0)

    def __str__(self) -> str:
        lines = [
            f"{p.param}[{p.index}] analytic={p.analytic:+.6e} "
            f"numeric={p.numeric:+.6e} rel_err={p.rel_err:.3e} "
            f"{'ok' if p.ok else 'FAIL'}"
            for p in self.probes
        ]
        lines.append(f"{'PASS' if self.passed else 'FAIL'} at rel_tol={self.rel_tol}")
        return "\n".join(lines)


def _relative_error(a: float, n: float) -> float:
    scale = max(abs(a), abs(n))
    if scale < 1e-6:
        return abs(a - n)
    return abs(a - n) / scale


def finite_diff_check(
    scalar_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    probe_count: int = 20,
    rel_tol: float = 1e-4,
    seed: int = 0,
) -> FiniteDiffReport:
    """Compare analytic gradients against central finite differences.

    ``scalar_fn`` rebuilds its graph from the given parameters on every
    call and must be deterministic; probes pick random coordinates and
    use step 1e-5 * max(1, |value|).
    """
    f_a = scalar_fn().item()
    f_b = scalar_fn().item()
    if f_a != f_b:
        raise ContractError(
            f"finite_diff_check: scalar_fn is non-deterministic ({f_a!r} != {f_b!r})"
        )

    for p in params:
        p.zero_grad()
    scalar_fn().backward()
    analytic = {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}
    for p in params:
        p.zero_grad()

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    if total == 0:
        raise ContractError("finite_diff_check: no parameter coordinates to probe")
    cuts = np.cumsum(sizes)

    rng = np.random.default_rng(seed)
    report = FiniteDiffReport(rel_tol=rel_tol)
    for flat in rng.integers(0, total, size=probe_count):
        which = int(np.searchsorted(cuts, flat, side="right"))
        p = params[which]
        idx = int(flat - (cuts[which] - sizes[which]))
        view = p.data.reshape(-1)
        orig = view[idx]
        h = 1e-5 * max(1.0, abs(float(orig)))
        view[idx] = orig + h
        f_plus = scalar_fn().item()
        view[idx] = orig - h
        f_minus = scalar_fn().item()
        view[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[p.name].reshape(-1)[idx])
        rel = _relative_error(a, numeric)
        report.probes.append(
            Probe(p.name, idx, a, numeric, rel, rel <= rel_tol)
        )
    return report
