"""Built-in gradient and invariant suites behind the ``check`` command.

Also the home of the per-op finite-difference cases: every op in the
closed set has exactly one entry in ``OP_CASES``, and the suite fails
if an op is missing, which is what keeps the op set closed.
"""

from __future__ import annotations

import itertools
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import decoder
from .autodiff import Tensor
from .metrics import auc
from .mi import CondDensityEstimator, mi_pairwise_loss
from .optim import Parameter, adam_step, finite_diff_check


def _const(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.uniform(-1.0, 1.0, size=shape))


def build_op_case(op: str, seed: int = 0) -> tuple[list[Parameter], Callable[[], Tensor]]:
    """A (parameters, scalar_fn) pair exercising one op's gradient."""
    rng = np.random.default_rng(seed)

    def param(shape, low=-1.0, high=1.0, name="a"):
        return Parameter(rng.uniform(low, high, size=shape), name)

    if op == "add":
        a, b, c = param((3, 4)), param((3, 4), name="b"), _const(rng, (3, 4))
        return [a, b], lambda: ((a.tensor + b.tensor) * c).sum()
    if op == "sub":
        a, b, c = param((3, 4)), param((3, 4), name="b"), _const(rng, (3, 4))
        return [a, b], lambda: ((a.tensor - b.tensor) * c).sum()
    if op == "mul":
        a, b = param((3, 4)), param((4,), name="b")  # broadcast case
        return [a, b], lambda: (a.tensor * b.tensor).sum()
    if op == "scale":
        a, c = param((3, 4)), _const(rng, (3, 4))
        return [a], lambda: (a.tensor.scale(1.7) * c).sum()
    if op == "matmul":
        a, b, c = param((3, 4)), param((4, 2), name="b"), _const(rng, (3, 2))
        return [a, b], lambda: ((a.tensor @ b.tensor) * c).sum()
    if op == "softmax":
        a, c = param((3, 5)), _const(rng, (3, 5))
        return [a], lambda: (a.tensor.softmax() * c).sum()
    if op == "log":
        a, c = param((3, 4), 0.5, 1.5), _const(rng, (3, 4))
        return [a], lambda: (a.tensor.log() * c).sum()
    if op == "exp":
        a, c = param((3, 4)), _const(rng, (3, 4))
        return [a], lambda: (a.tensor.exp() * c).sum()
    if op == "relu":
        a, c = param((3, 4)), _const(rng, (3, 4))
        return [a], lambda: (a.tensor.relu() * c).sum()
    if op == "sigmoid":
        a, c = param((3, 4)), _const(rng, (3, 4))
        return [a], lambda: (a.tensor.sigmoid() * c).sum()
    if op == "mean":
        a, c = param((3, 4)), _const(rng, (1, 4))
        return [a], lambda: (a.tensor.mean(axis=0, keepdims=True) * c).sum() + a.tensor.mean()
    if op == "sum":
        a, c = param((3, 4)), _const(rng, (3,))
        return [a], lambda: (a.tensor.sum(axis=1) * c.reshape(3, 1)).sum()
    if op == "concat":
        a, b, c = param((3, 2)), param((3, 4), name="b"), _const(rng, (3, 6))
        return [a, b], lambda: (ad.concat([a.tensor, b.tensor]) * c).sum()
    if op == "conv2d":
        x, k = param((2, 6, 6, 2), name="x"), param((3, 3, 2, 3), name="k")
        c = _const(rng, (2, 6, 6, 3))
        return [x, k], lambda: (ad.conv2d(x.tensor, k.tensor, padding=1) * c).sum()
    if op == "maxpool2d":
        x, c = param((2, 4, 4, 2), name="x"), _const(rng, (2, 2, 2, 2))
        return [x], lambda: (ad.maxpool2d(x.tensor, 2) * c).sum()
    if op == "layernorm":
        a, c = param((3, 6)), _const(rng, (3, 6))
        return [a], lambda: (ad.layernorm(a.tensor) * c).sum()
    if op == "reshape":
        a, c = param((3, 4)), _const(rng, (6, 2))
        return [a], lambda: (a.tensor.reshape(6, 2) * c).sum()
    if op == "transpose":
        a, c = param((3, 4)), _const(rng, (4, 3))
        return [a], lambda: (a.tensor.transpose(1, 0) * c).sum()
    if op == "gather_rows":
        t = param((5, 3), name="table")
        ids = np.array([0, 2, 1, 2])  # repeated row: checks scatter-add
        c = _const(rng, (4, 3))
        return [t], lambda: (ad.gather_rows(t.tensor, ids) * c).sum()
    if op == "clip":
        a, c = param((3, 4)), _const(rng, (3, 4))
        return [a], lambda: (a.tensor.clip(-0.5, 0.5) * c).sum()
    raise ValueError(f"no gradient case for op '{op}'")


def check_op_gradients(probes: int = 10, instances: int = 2) -> tuple[bool, str]:
    with ad.precision("float64"):
        worst = 0.0
        for op in ad.OP_SET:
            for inst in range(instances):
                params, fn = build_op_case(op, seed=100 * inst + 7)
                report = finite_diff_check(fn, params, probe_count=probes, rel_tol=1e-4, seed=inst)
                worst = max(worst, report.max_rel_err)
                if not report.passed:
                    return False, f"op '{op}' failed gradient check:\n{report}"
    return True, f"all {len(ad.OP_SET)} ops pass at 1e-4 (worst rel err {worst:.2e})"


def check_complementarity(instances: int = 100) -> tuple[bool, str]:
    with ad.precision("float64"):
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(instances):
            k, hw, d = rng.integers(2, 6), rng.integers(1, 9), rng.integers(2, 9)
            q = Tensor(rng.normal(size=(k, d)))
            f = Tensor(rng.normal(size=(hw, d)))
            inst, conf, attn = decoder.decode_layer(q, f)
            colsum = f.data.sum(axis=0)
            dev = np.abs(inst.data + conf.data - colsum[None, :]).max()
            rowdev = np.abs(attn.data.sum(axis=-1) - 1.0).max()
            if attn.data.min() < 0:
                return False, "attention weight below zero"
            worst = max(worst, dev)
            if dev > 1e-10 or rowdev > 1e-8:
                return False, f"complementarity deviation {dev:.2e}, row-sum dev {rowdev:.2e}"
    return True, f"instrument + confounder identity holds (worst dev {worst:.2e})"


def check_adam_textbook(steps: int = 50) -> tuple[bool, str]:
    """adam_step with wd=0 must match a hand-rolled loop on a quadratic."""
    with ad.precision("float64"):
        p = Parameter(np.array([2.0]), "theta")
        theta = 2.0
        m = v = 0.0
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-12
        for t in range(1, steps + 1):
            loss = (p.tensor * p.tensor).sum()
            p.zero_grad()
            loss.backward()
            adam_step([p], lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=0.0)
            g = 2.0 * theta
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        dev = abs(float(p.data[0]) - theta)
        return dev <= 1e-10, f"deviation from reference loop: {dev:.2e}"


def check_auc_oracle(cases: int = 200) -> tuple[bool, str]:
    rng = np.random.default_rng(11)
    for _ in range(cases):
        n = int(rng.integers(2, 9))
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            continue
        scores = np.round(rng.random(n), 2)  # rounding forces occasional ties
        concordant = 0.0
        pairs = 0
        for i, j in itertools.product(range(n), range(n)):
            if labels[i] == 1 and labels[j] == 0:
                pairs += 1
                if scores[i] > scores[j]:
                    concordant += 1.0
                elif scores[i] == scores[j]:
                    concordant += 0.5
        expect = concordant / pairs
        got = auc(scores, labels)
        if abs(got - expect) > 1e-12:
            return False, f"auc {got} != pairwise concordance {expect}"
    return True, f"matches exhaustive concordance on {cases} cases"


def check_mi_null() -> tuple[bool, str]:
    """An estimator that ignores its conditioning input gives loss 0."""
    with ad.precision("float64"):
        rng = np.random.default_rng(5)
        est = CondDensityEstimator.create(3, 2, "IC", rng)
        for p in est.params.values():
            p.tensor.data = np.zeros_like(p.tensor.data)
        conds = Tensor(rng.normal(size=(8, 3)))
        targets = Tensor(rng.normal(size=(8, 2)))
        value = abs(mi_pairwise_loss(est, conds, targets, +1).item())
        return value <= 1e-9, f"|loss| = {value:.2e} for conditioning-blind estimator"


SUITES = (
    ("op gradients", check_op_gradients),
    ("decoupling identity", check_complementarity),
    ("adam reference", check_adam_textbook),
    ("auc oracle", check_auc_oracle),
    ("mi null", check_mi_null),
)


def run_all(verbose: bool = True) -> bool:
    ok = True
    for name, fn in SUITES:
        passed, detail = fn()
        ok &= passed
        if verbose:
            print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    return ok
