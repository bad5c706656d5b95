"""Training configuration: nested dataclasses plus the plain-text
``section.key=value`` file format (unknown keys are errors)."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ContractError
from .scm import SCMConfig


@dataclass
class ModelSection:
    in_channels: int = 1
    feature_dim: int = 64
    downsample: int = 4
    decoder_layers: int = 2
    fusion_layers: int = 2
    text_dim: int = 32
    causal_dim: int = 64
    vocab_size: int = 64
    max_len: int = 256
    include_cls: bool = True


@dataclass
class OptimizerSection:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class LossSection:
    l_i: float = 1.0
    l_c: float = 1.0
    l_ic: float = 1.0
    l_ir: float = 1.0
    l_iy: float = 1.0
    l_y: float = 1.0


@dataclass
class TrainSection:
    batch_size: int = 32
    max_steps: int = 2000
    estimator_steps: int = 3
    estimator_lr: float = 1e-3
    eval_every: int = 100
    seed: int = 0
    precision: str = "float32"
    stop_grad_confounder: bool = False


@dataclass
class TogglesSection:
    iv_learning: bool = True
    semantic_fusion: bool = True
    valid_iv_constraints: bool = True


@dataclass
class DataSection:
    dir: str = ""
    test_dir: str = ""
    policy: str = "u-ones"
    resize_to: int = 0
    crop_to: int = 0


@dataclass
class AblateSection:
    seeds: int = 5
    workers: int = 0  # 0 = one per CPU


@dataclass
class TrainConfig:
    model: ModelSection = field(default_factory=ModelSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    toggles: TogglesSection = field(default_factory=TogglesSection)
    data: DataSection = field(default_factory=DataSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    def validate(self) -> None:
        if self.optimizer.lr <= 0:
            raise ContractError("optimizer.lr must be positive")
        if self.train.batch_size < 1 or self.train.max_steps < 0:
            raise ContractError("train.batch_size/max_steps out of range")
        if self.train.precision not in ("float32", "float64"):
            raise ContractError(f"unknown precision '{self.train.precision}'")
        if self.data.policy not in ("u-ones", "u-zeros"):
            raise ContractError(f"unknown policy '{self.data.policy}'")

    def loss_weights(self) -> dict[str, float]:
        w = {
            "L_I": self.loss.l_i,
            "L_C": self.loss.l_c,
            "L_IC": self.loss.l_ic,
            "L_IR": self.loss.l_ir,
            "L_IY": self.loss.l_iy,
            "L_Y": self.loss.l_y,
        }
        if not self.toggles.valid_iv_constraints:
            w["L_IC"] = w["L_IR"] = w["L_IY"] = 0.0
        return w


def _convert(raw: str, target_type: type):
    if target_type is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ContractError(f"cannot parse boolean from '{raw}'")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    return raw.strip()


def _apply_kv(obj, dotted: str, raw: str) -> None:
    head, _, rest = dotted.partition(".")
    if not dataclasses.is_dataclass(obj):
        raise ContractError(f"unknown config key '{dotted}'")
    names = {f.name: f for f in fields(obj)}
    if head not in names:
        raise ContractError(f"unknown config key '{dotted}'")
    if rest:
        _apply_kv(getattr(obj, head), rest, raw)
        return
    ftype = names[head].type
    typemap = {"int": int, "float": float, "bool": bool, "str": str}
    target = typemap.get(ftype, str) if isinstance(ftype, str) else ftype
    setattr(obj, head, _convert(raw, target))


def parse_kv_text(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ContractError(f"{source}:{lineno}: expected key=value, got '{stripped}'")
        key, _, value = stripped.partition("=")
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_train_config(path: str | Path) -> TrainConfig:
    cfg = TrainConfig()
    text = Path(path).read_text(encoding="utf-8")
    for key, value in parse_kv_text(text, str(path)):
        _apply_kv(cfg, key, value)
    cfg.validate()
    return cfg


def load_scm_config(path: str | Path) -> SCMConfig:
    cfg = SCMConfig()
    text = Path(path).read_text(encoding="utf-8")
    for key, value in parse_kv_text(text, str(path)):
        section, _, name = key.partition(".")
        if section != "scm" or not name:
            raise ContractError(f"unknown config key '{key}' (expected scm.<field>)")
        names = {f.name: f for f in fields(SCMConfig)}
        if name not in names:
            raise ContractError(f"unknown config key '{key}'")
        ftype = names[name].type
        typemap = {"int": int, "float": float, "bool": bool, "str": str}
        target = typemap.get(ftype, str) if isinstance(ftype, str) else ftype
        setattr(cfg, name, _convert(value, target))
    cfg.validate()
    return cfg


def config_to_text(cfg) -> str:
    """Canonical flat serialization (used for digests and checkpoints)."""
    lines: list[str] = []

    def walk(obj, prefix: str) -> None:
        for f in fields(obj):
            value = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if dataclasses.is_dataclass(value):
                walk(value, key + ".")
            else:
                lines.append(f"{key}={value!r}" if isinstance(value, str) else f"{key}={value}")

    walk(cfg, "")
    return "\n".join(sorted(lines)) + "\n"


def config_from_text(text: str) -> TrainConfig:
    cfg = TrainConfig()
    for key, value in parse_kv_text(text):
        if value.startswith("'") and value.endswith("'"):
            value = value[1:-1]
        _apply_kv(cfg, key, value)
    return cfg


def config_digest(cfg) -> str:
    return hashlib.sha256(config_to_text(cfg).encode("utf-8")).hexdigest()
