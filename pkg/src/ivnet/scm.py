"""Synthetic confounded benchmark generator.

Each class owns a home location on a grid; a positive label renders a
jittered disc (the true cause).  A high-contrast corner marker is the
spurious cue: its state agrees with the class-0 label with probability
rho, which differs between the train and test splits.  Token records
describe the causal parents only (per-positive-class attribute ids plus
uniform noise ids), so they are independent of the marker given the
labels.

All randomness flows through per-purpose, per-sample streams derived
from one root seed, so splits never perturb each other and rendering is
order-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import RasterImage
from .data import Manifest, ManifestRecord, save_raster, write_manifest
from .errors import ContractError
from .fusion import save_vocab
from .rng import stream

ATTR_ID_BASE = 2  # class c's attribute token is id 2 + c


@dataclass
class SCMConfig:
    image_size: int = 32
    k: int = 4
    n_train: int = 2000
    n_test: int = 500
    prevalence: float = 0.3
    rho_train: float = 0.9
    rho_test: float = 0.1
    blob_radius: float = 3.0
    blob_intensity: float = 0.7
    blob_jitter: int = 2
    marker_size: int = 4
    marker_intensity: float = 1.0
    noise_sigma: float = 0.08
    vocab_size: int = 64
    tokens_per_sample: int = 8
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 <= self.rho_train <= 1.0 and 0.0 <= self.rho_test <= 1.0):
            raise ContractError("rho values must lie in [0, 1]")
        if not 1 <= self.k <= 16:
            raise ContractError(f"k must be in [1, 16], got {self.k}")
        if not 0.0 < self.prevalence < 1.0:
            raise ContractError(f"prevalence must be in (0, 1), got {self.prevalence}")
        if self.vocab_size < ATTR_ID_BASE + self.k:
            raise ContractError(
                f"vocab_size {self.vocab_size} too small for {self.k} attribute ids"
            )
        reach = self.blob_jitter + self.blob_radius
        for cy, cx in self.class_centers():
            if cy - reach < 0 or cx - reach < 0 or cy + reach > self.image_size - 1 \
                    or cx + reach > self.image_size - 1:
                raise ContractError(
                    f"blob for center ({cy},{cx}) can leave the {self.image_size}px image"
                )
            # marker square occupies [0, marker_size) x [0, marker_size);
            # require every reachable blob pixel to clear it.
            gap_y = max(0.0, (cy - self.blob_jitter) - (self.marker_size - 1))
            gap_x = max(0.0, (cx - self.blob_jitter) - (self.marker_size - 1))
            if math.hypot(gap_y, gap_x) <= self.blob_radius:
                raise ContractError(
                    f"blob for center ({cy},{cx}) can overlap the corner marker"
                )

    def class_centers(self) -> list[tuple[int, int]]:
        g = math.ceil(math.sqrt(self.k))
        cells = [
            (
                round((2 * i + 1) * self.image_size / (2 * g)),
                round((2 * j + 1) * self.image_size / (2 * g)),
            )
            for i in range(g)
            for j in range(g)
        ]
        return cells[: self.k]


@dataclass
class SyntheticSample:
    image: RasterImage
    labels: np.ndarray  # (k,) ints 0/1
    tokens: list[int]
    ground_truth_mask: np.ndarray  # (H, W) bool, blob pixels only
    marker_flag: bool


@dataclass
class SampleStreams:
    jitter: np.random.Generator
    noise: np.random.Generator
    tokens: np.random.Generator


def sample_streams(seed: int, split: str, index: int) -> SampleStreams:
    return SampleStreams(
        jitter=stream(seed, f"{split}/jitter", index),
        noise=stream(seed, f"{split}/noise", index),
        tokens=stream(seed, f"{split}/tokens", index),
    )


def render_sample(
    cfg: SCMConfig,
    labels: np.ndarray,
    marker: bool,
    streams: SampleStreams,
) -> SyntheticSample:
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (cfg.k,) or not np.isin(labels, (0, 1)).all():
        raise ContractError(f"labels must be a binary vector of length {cfg.k}")
    cfg.validate()

    size = cfg.image_size
    img = np.zeros((size, size))
    mask = np.zeros((size, size), dtype=bool)
    yy, xx = np.mgrid[0:size, 0:size]
    centers = cfg.class_centers()

    for c in range(cfg.k):
        jy, jx = streams.jitter.integers(-cfg.blob_jitter, cfg.blob_jitter + 1, size=2)
        if not labels[c]:
            continue
        cy, cx = centers[c][0] + jy, centers[c][1] + jx
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= cfg.blob_radius ** 2
        img[disc] = np.maximum(img[disc], cfg.blob_intensity)
        mask |= disc

    if marker:
        m = cfg.marker_size
        if mask[:m, :m].any():
            raise ContractError("marker region overlaps a blob; geometry invalid")
        img[:m, :m] = cfg.marker_intensity

    if cfg.noise_sigma > 0:
        img = img + streams.noise.normal(0.0, cfg.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)

    tokens = [ATTR_ID_BASE + c for c in range(cfg.k) if labels[c]]
    n_noise = max(0, cfg.tokens_per_sample - len(tokens))
    if n_noise:
        tokens += list(
            streams.tokens.integers(ATTR_ID_BASE, cfg.vocab_size, size=n_noise)
        )
    return SyntheticSample(
        image=RasterImage.from_array(img),
        labels=labels,
        tokens=[int(t) for t in tokens],
        ground_truth_mask=mask,
        marker_flag=bool(marker),
    )


def draw_assignments(
    cfg: SCMConfig, split: str, n: int, rho: float
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample labels (n, k) and marker flags (n,)."""
    labels = np.zeros((n, cfg.k), dtype=int)
    markers = np.zeros(n, dtype=bool)
    for i in range(n):
        labels[i] = stream(cfg.seed, f"{split}/labels", i).random(cfg.k) < cfg.prevalence
        agree = stream(cfg.seed, f"{split}/marker", i).random() < rho
        markers[i] = bool(labels[i, 0]) if agree else not labels[i, 0]
    return labels, markers


def build_split(cfg: SCMConfig, split: str) -> list[SyntheticSample]:
    n = cfg.n_train if split == "train" else cfg.n_test
    rho = cfg.rho_train if split == "train" else cfg.rho_test
    labels, markers = draw_assignments(cfg, split, n, rho)
    return [
        render_sample(cfg, labels[i], markers[i], sample_streams(cfg.seed, split, i))
        for i in range(n)
    ]


def default_vocab(cfg: SCMConfig) -> list[str]:
    words = ["<pad>", "<cls>"]
    words += [f"attr{c}" for c in range(cfg.k)]
    words += [f"tok{i}" for i in range(ATTR_ID_BASE + cfg.k, cfg.vocab_size)]
    return words


def generate_dataset(cfg: SCMConfig, out_dir: str | Path) -> dict[str, float]:
    """Render both splits to disk; returns the summary statistics.

    Layout: <out>/<split>/manifest.txt, images/, masks/, truth.tsv plus
    <out>/summary.txt and <out>/vocab.txt.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    summary: dict[str, float] = {}
    save_vocab_path = out_dir / "vocab.txt"
    out_dir.mkdir(parents=True, exist_ok=True)
    save_vocab(save_vocab_path, default_vocab(cfg))

    for split in ("train", "test"):
        split_dir = out_dir / split
        (split_dir / "images").mkdir(parents=True, exist_ok=True)
        (split_dir / "masks").mkdir(parents=True, exist_ok=True)
        samples = build_split(cfg, split)

        records = []
        truth_lines = []
        for i, s in enumerate(samples):
            img_rel = f"images/img_{i:05d}.ivr"
            mask_rel = f"masks/mask_{i:05d}.ivr"
            save_raster(split_dir / img_rel, s.image.pixels)
            save_raster(split_dir / mask_rel, s.ground_truth_mask.astype(np.float32))
            records.append(ManifestRecord(img_rel, s.labels, s.tokens))
            truth_lines.append(f"{img_rel}\t{mask_rel}\t{int(s.marker_flag)}")
        class_names = [f"class{c}" for c in range(cfg.k)]
        write_manifest(split_dir / "manifest.txt", Manifest(class_names, records, split_dir))
        (split_dir / "truth.tsv").write_text("\n".join(truth_lines) + "\n", encoding="utf-8")

        label0 = np.array([s.labels[0] for s in samples], dtype=bool)
        flags = np.array([s.marker_flag for s in samples], dtype=bool)
        summary[f"{split}.n"] = len(samples)
        summary[f"{split}.marker_label_agreement"] = float((label0 == flags).mean())
        for c in range(cfg.k):
            summary[f"{split}.positives.class{c}"] = int(
                sum(s.labels[c] for s in samples)
            )

    lines = [f"{key}={summary[key]}" for key in sorted(summary)]
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return summary
