"""Training loop with alternating estimator updates, metrics logging,
and binary checkpoints.

Per step: fit the density estimators on the current batch's detached
representations (constraints toggle permitting), then take one Adam
step on the main model through the six-term objective.  Batch indices
derive from (seed, step), so a resumed run replays exactly the batches
a straight run would have seen.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import heads
from .autodiff import Tensor
from .config import TrainConfig, config_digest, config_from_text, config_to_text
from .data import LoadedSplit
from .errors import ContractError, DataFormatError
from .metrics import EvalResult, evaluate
from .mi import estimator_fit_step
from .model import IVModel
from .optim import adam_step
from .rng import stream

log = logging.getLogger(__name__)

_CKPT_MAGIC = b"IVNETCKPT 1\n"


@dataclass
class StepRow:
    step: int
    terms: dict[str, float]  # raw (unweighted) values of the six terms
    total: float  # weighted sum of the six logged values

    @staticmethod
    def make(step: int, terms: dict[str, float], weights: dict[str, float]) -> "StepRow":
        total = 0.0
        for name in heads.LOSS_TERMS:
            total += weights.get(name, 1.0) * terms[name]
        return StepRow(step, terms, total)


@dataclass
class EvalRow:
    step: int
    split: str
    per_class: list[float | None]
    mean_auc: float


@dataclass
class MetricsLog:
    weights: dict[str, float]
    step_rows: list[StepRow] = field(default_factory=list)
    eval_rows: list[EvalRow] = field(default_factory=list)

    def step_csv(self) -> str:
        lines = ["step," + ",".join(heads.LOSS_TERMS) + ",total"]
        for row in self.step_rows:
            vals = ",".join(repr(row.terms[t]) for t in heads.LOSS_TERMS)
            lines.append(f"{row.step},{vals},{repr(row.total)}")
        return "\n".join(lines) + "\n"

    def eval_csv(self) -> str:
        lines = ["step,split,per_class_auc,mean_auc"]
        for row in self.eval_rows:
            per = ";".join("" if a is None else repr(a) for a in row.per_class)
            lines.append(f"{row.step},{row.split},{per},{repr(row.mean_auc)}")
        return "\n".join(lines) + "\n"

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.csv").write_text(self.step_csv(), encoding="utf-8")
        (out_dir / "eval.csv").write_text(self.eval_csv(), encoding="utf-8")


def load_metrics(out_dir: str | Path, weights: dict[str, float]) -> MetricsLog:
    """Reload a metrics log, re-checking the total-column identity."""
    out_dir = Path(out_dir)
    logm = MetricsLog(weights=dict(weights))
    lines = (out_dir / "metrics.csv").read_text(encoding="utf-8").splitlines()
    header = "step," + ",".join(heads.LOSS_TERMS) + ",total"
    if not lines or lines[0] != header:
        raise DataFormatError(f"{out_dir}/metrics.csv: unexpected header")
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(heads.LOSS_TERMS) + 2:
            raise DataFormatError(f"{out_dir}/metrics.csv:{lineno}: wrong column count")
        step = int(parts[0])
        terms = {t: float(parts[1 + i]) for i, t in enumerate(heads.LOSS_TERMS)}
        total = float(parts[-1])
        expect = 0.0
        for name in heads.LOSS_TERMS:
            expect += weights.get(name, 1.0) * terms[name]
        if expect != total:
            raise DataFormatError(
                f"{out_dir}/metrics.csv:{lineno}: total {total!r} does not equal "
                f"the weighted term sum {expect!r}"
            )
        logm.step_rows.append(StepRow(step, terms, total))
    eval_path = out_dir / "eval.csv"
    if eval_path.exists():
        for line in eval_path.read_text(encoding="utf-8").splitlines()[1:]:
            step_s, split, per, mean_s = line.split(",")
            per_class = [None if p == "" else float(p) for p in per.split(";")] if per else []
            logm.eval_rows.append(EvalRow(int(step_s), split, per_class, float(mean_s)))
    return logm


def train(
    cfg: TrainConfig,
    train_split: LoadedSplit,
    test_split: LoadedSplit | None = None,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
) -> tuple[IVModel, MetricsLog]:
    cfg.validate()
    if len(train_split) == 0:
        raise ContractError("train needs a non-empty training split")
    with ad.precision(cfg.train.precision):
        if resume is not None:
            model, start_step = load_checkpoint(resume)
            if config_digest(model.cfg) != config_digest(cfg):
                raise ContractError("resume checkpoint was written under a different config")
        else:
            model = IVModel(cfg, k=train_split.labels.shape[1])
            start_step = 0

        weights = cfg.loss_weights()
        metrics = MetricsLog(weights=weights)
        n = len(train_split)
        tokens_all = model.prepare_tokens(train_split.tokens)
        main_params = model.main_parameters()
        prev_total = None

        for step in range(start_step, cfg.train.max_steps):
            idx = stream(cfg.train.seed, "batch", step).choice(
                n, size=min(cfg.train.batch_size, n), replace=False
            )
            images = Tensor(train_split.images[idx])
            labels = train_split.labels[idx]
            out = model.forward(images, tokens_all[idx])

            if cfg.toggles.valid_iv_constraints:
                fit_batches = model.constraint_batches(out)
                for role, est in model.estimators.items():
                    conds, targets = fit_batches[role]
                    for _ in range(cfg.train.estimator_steps):
                        estimator_fit_step(est, conds, targets, lr=cfg.train.estimator_lr)

            terms = model.loss_terms(out, labels)
            total = heads.total_loss(terms, weights)
            for p in main_params:
                p.zero_grad()
            total.backward()
            adam_step(
                main_params,
                lr=cfg.optimizer.lr,
                beta1=cfg.optimizer.beta1,
                beta2=cfg.optimizer.beta2,
                eps=cfg.optimizer.eps,
                weight_decay=cfg.optimizer.weight_decay,
            )

            row = StepRow.make(
                step, {name: t.item() for name, t in terms.items()}, weights
            )
            metrics.step_rows.append(row)
            if prev_total is not None and row.total > prev_total:
                log.debug("step %d: total loss increased (%.6f -> %.6f)", step, prev_total, row.total)
            prev_total = row.total

            done = step + 1
            if (
                test_split is not None
                and cfg.train.eval_every > 0
                and done % cfg.train.eval_every == 0
            ):
                res = evaluate(model, test_split, "test")
                metrics.eval_rows.append(EvalRow(done, res.split, res.per_class, res.mean_auc))

        if test_split is not None and not any(
            r.step == cfg.train.max_steps for r in metrics.eval_rows
        ):
            res = evaluate(model, test_split, "test")
            metrics.eval_rows.append(
                EvalRow(cfg.train.max_steps, res.split, res.per_class, res.mean_auc)
            )

        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            metrics.save(out_dir)
            save_checkpoint(out_dir / "checkpoint.bin", model, cfg.train.max_steps)
        return model, metrics


# -- checkpointing ---------------------------------------------------------------


def _array_entries(model: IVModel) -> list[tuple[str, np.ndarray]]:
    entries: list[tuple[str, np.ndarray]] = []
    for name in sorted(model.params):
        p = model.params[name]
        entries.append((f"param:{name}:data", p.tensor.data))
        entries.append((f"param:{name}:m", p.m))
        entries.append((f"param:{name}:v", p.v))
    for role in sorted(model.estimators):
        est = model.estimators[role]
        for name in sorted(est.params):
            p = est.params[name]
            entries.append((f"est:{role}:{name}:data", p.tensor.data))
            entries.append((f"est:{role}:{name}:m", p.m))
            entries.append((f"est:{role}:{name}:v", p.v))
    return entries


def save_checkpoint(path: str | Path, model: IVModel, step: int) -> None:
    """Binary container; save -> load -> save is byte-identical."""
    entries = _array_entries(model)
    steps = {p.name: p.step for p in model.main_parameters() + model.estimator_parameters()}
    config_text = config_to_text(model.cfg)
    header = {
        "arrays": [
            {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str}
            for name, arr in entries
        ],
        "config_digest": hashlib.sha256(config_text.encode("utf-8")).hexdigest(),
        "config_text": config_text,
        "k": model.k,
        "param_steps": steps,
        "step": int(step),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path: str | Path) -> tuple[IVModel, int]:
    raw = Path(path).read_bytes()
    if not raw.startswith(_CKPT_MAGIC):
        raise DataFormatError(f"{path}: magic mismatch at offset 0")
    off = len(_CKPT_MAGIC)
    blob_len = int.from_bytes(raw[off: off + 8], "little")
    off += 8
    try:
        header = json.loads(raw[off: off + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: corrupt header: {exc}") from exc
    off += blob_len

    config_text = header["config_text"]
    digest = hashlib.sha256(config_text.encode("utf-8")).hexdigest()
    if digest != header["config_digest"]:
        raise DataFormatError(f"{path}: config digest mismatch")
    cfg = config_from_text(config_text)

    with ad.precision(cfg.train.precision):
        model = IVModel(cfg, k=int(header["k"]))
    arrays: dict[str, np.ndarray] = {}
    for meta in header["arrays"]:
        dtype = np.dtype(meta["dtype"])
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        nbytes = count * dtype.itemsize
        if off + nbytes > len(raw):
            raise DataFormatError(f"{path}: truncated payload at offset {off}")
        arrays[meta["name"]] = (
            np.frombuffer(raw[off: off + nbytes], dtype=dtype).reshape(meta["shape"]).copy()
        )
        off += nbytes
    if off != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - off} trailing bytes")

    def restore(prefix: str, p) -> None:
        p.tensor.data = arrays[f"{prefix}:data"]
        p.m = arrays[f"{prefix}:m"]
        p.v = arrays[f"{prefix}:v"]
        p.step = int(header["param_steps"][p.name])

    for name, p in model.params.items():
        restore(f"param:{name}", p)
    for role, est in model.estimators.items():
        for name, p in est.params.items():
            restore(f"est:{role}:{name}", p)
    return model, int(header["step"])
