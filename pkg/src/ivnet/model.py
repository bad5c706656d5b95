"""Full-model assembly: wires backbone, decoder, fusion, and heads
according to the three ablation toggles.

Toggle substitutions:
  - iv_learning off: two independent backbones produce the instrument
    and confounder rows directly (spatially pooled, tiled over classes);
    no decoder parameters exist.
  - semantic_fusion off: the mean non-pad token embedding is
    concatenated to each instrument row through a linear map (the map
    starts as identity-on-instrument so training begins at the plain
    instrument).
  - valid_iv_constraints off: no density estimators are created and the
    three MI terms are zero-weighted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import decoder as dec
from . import fusion as fus
from . import heads
from .autodiff import Tensor
from .config import TrainConfig
from .errors import ContractError
from .mi import CondDensityEstimator
from .optim import Parameter
from .rng import stream


def _standardize(v: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Numpy twin of ad.layernorm over the last axis."""
    mu = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    return (v - mu) / np.sqrt(var + eps)


@dataclass
class ForwardOut:
    i_prime: Tensor  # (B, k, d) decoder/backbone instrument rows
    confounder: Tensor  # (B, k, d)
    instrument: Tensor  # (B, k, d) semantic instrument (post-fusion)
    causal: Tensor  # (B, k, d_R)
    scores: Tensor  # (B, k) probabilities
    attention: Tensor | None  # (B, k, h*w) final decoder attention
    fmap_hw: tuple[int, int] | None  # spatial grid behind the attention


class IVModel:
    def __init__(self, cfg: TrainConfig, k: int):
        cfg.validate()
        self.cfg = cfg
        self.k = k
        self.params: dict[str, Parameter] = {}
        self.estimators: dict[str, CondDensityEstimator] = {}
        self._bb_cfg = bb.BackboneConfig(
            in_channels=cfg.model.in_channels,
            feature_dim=cfg.model.feature_dim,
            downsample=cfg.model.downsample,
        )
        self._init_params()

    # -- construction -------------------------------------------------------

    def _init_params(self) -> None:
        cfg = self.cfg
        d = cfg.model.feature_dim
        d_t = cfg.model.text_dim
        d_r = cfg.model.causal_dim
        seed = cfg.train.seed

        def rng(name: str) -> np.random.Generator:
            return stream(seed, f"init/{name}")

        if cfg.toggles.iv_learning:
            self.params.update(bb.init_backbone(self._bb_cfg, rng("backbone"), "backbone"))
            self.params.update(
                dec.init_decoder(d, cfg.model.decoder_layers, rng("decoder"), "decoder")
            )
        else:
            self.params.update(bb.init_backbone(self._bb_cfg, rng("backbone_i"), "backbone_i"))
            self.params.update(bb.init_backbone(self._bb_cfg, rng("backbone_c"), "backbone_c"))
        self.params.update(dec.init_class_head(d, rng("head_i"), "head_i"))
        self.params.update(dec.init_class_head(d, rng("head_c"), "head_c"))

        limit = 1.0 / math.sqrt(d_t)
        table = rng("embed").uniform(-limit, limit, size=(cfg.model.vocab_size, d_t))
        self.params["embed.table"] = Parameter(table, "embed.table")
        if cfg.toggles.semantic_fusion:
            self.params.update(
                fus.init_fusion(d, d_t, cfg.model.fusion_layers, rng("fusion"), "fusion")
            )
        else:
            # concat projection: starts as identity on the instrument block
            w = np.zeros((d + d_t, d))
            w[:d, :] = np.eye(d)
            self.params["concat_proj.weight"] = Parameter(w, "concat_proj.weight")
            self.params["concat_proj.bias"] = Parameter(np.zeros(d), "concat_proj.bias")

        self.params.update(heads.init_causal_head(d, d_r, rng("causal"), "causal"))
        self.params.update(heads.init_classifier(d_r, d, rng("classifier"), "classifier"))

        if cfg.toggles.valid_iv_constraints:
            self.estimators = {
                "IC": CondDensityEstimator.create(d, d, "IC", rng("est_ic")),
                "IR": CondDensityEstimator.create(d, d_r, "IR", rng("est_ir")),
                "IY": CondDensityEstimator.create(d, self.k, "IY", rng("est_iy")),
            }

    def main_parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def estimator_parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for est in self.estimators.values():
            out.extend(est.params.values())
        return out

    # -- forward -------------------------------------------------------------

    def prepare_tokens(self, token_lists: list[list[int]]) -> np.ndarray:
        return np.stack(
            [fus.tokenize_pad(t, self.cfg.model.max_len) for t in token_lists]
        )

    def forward(self, images: Tensor, tokens: np.ndarray) -> ForwardOut:
        """images: (B, H, W, C) in [0,1]; tokens: (B, max_len) padded ids."""
        cfg = self.cfg
        k = self.k
        d = cfg.model.feature_dim

        fmap_hw = None
        if cfg.toggles.iv_learning:
            fmap = bb.forward(images, self.params, self._bb_cfg, "backbone")
            b, h, w, _ = fmap.shape
            fmap_hw = (h, w)
            flat = fmap.reshape(b, h * w, d)
            i_prime, confounder, attn = dec.run_decoder(
                flat, k, cfg.model.decoder_layers, self.params, "decoder"
            )
        else:
            ones_k = Tensor(np.ones((k, 1)))
            fi = bb.forward(images, self.params, self._bb_cfg, "backbone_i")
            fc = bb.forward(images, self.params, self._bb_cfg, "backbone_c")
            b = fi.shape[0]
            i_prime = fi.mean(axis=(1, 2)).reshape(b, 1, d) * ones_k
            confounder = fc.mean(axis=(1, 2)).reshape(b, 1, d) * ones_k
            attn = None

        emb = fus.embed_tokens(tokens, self.params["embed.table"])
        if cfg.toggles.semantic_fusion:
            instrument = fus.fuse(
                i_prime, emb, tokens, self.params,
                cfg.model.fusion_layers, cfg.model.include_cls, "fusion",
            )
        else:
            counts = np.maximum((tokens != fus.PAD_ID).sum(axis=-1, keepdims=True), 1)
            scale = Tensor(1.0 / counts.astype(emb.data.dtype))
            tbar = emb.sum(axis=-2) * scale  # (B, d_t) mean over non-pad rows
            b = i_prime.shape[0]
            tbar_rows = tbar.reshape(b, 1, tbar.shape[-1]) * Tensor(np.ones((k, 1)))
            instrument = ad.linear(
                ad.concat([i_prime, tbar_rows]),
                self.params["concat_proj.weight"].tensor,
                self.params["concat_proj.bias"].tensor,
            )

        causal = heads.causal_rep(instrument, confounder, self.params, "causal")
        scores = heads.predict(
            causal, confounder, self.params, "classifier",
            stop_grad_confounder=cfg.train.stop_grad_confounder,
        )
        return ForwardOut(i_prime, confounder, instrument, causal, scores, attn, fmap_hw)

    # -- loss terms ------------------------------------------------------------

    def loss_terms(self, out: ForwardOut, labels: np.ndarray) -> dict[str, Tensor]:
        terms = {
            "L_I": dec.iv_loss(out.i_prime, labels, self.params),
            "L_C": dec.confounder_loss(out.confounder, self.params),
            "L_Y": heads.task_loss(out.scores, labels),
        }
        if self.cfg.toggles.valid_iv_constraints:
            from .mi import mi_pairwise_loss

            # Standardized per-sample row-means: without the
            # normalization the contrastive terms are unbounded in the
            # representation scale and training runs away.
            i_vec = ad.layernorm(out.instrument.mean(axis=-2))
            c_vec = ad.layernorm(out.confounder.mean(axis=-2))
            r_vec = ad.layernorm(out.causal.mean(axis=-2))
            terms["L_IC"] = mi_pairwise_loss(self.estimators["IC"], i_vec, c_vec, +1)
            terms["L_IR"] = mi_pairwise_loss(self.estimators["IR"], i_vec, r_vec, -1)
            terms["L_IY"] = mi_pairwise_loss(self.estimators["IY"], i_vec, out.scores, +1)
        else:
            zero = Tensor(0.0)
            terms["L_IC"] = terms["L_IR"] = terms["L_IY"] = zero
        return terms

    def constraint_batches(self, out: ForwardOut) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Detached (cond, target) pairs for estimator fitting; must see
        exactly the quantities the MI losses condition on."""
        i_vec = _standardize(out.instrument.data.mean(axis=-2))
        return {
            "IC": (i_vec, _standardize(out.confounder.data.mean(axis=-2))),
            "IR": (i_vec, _standardize(out.causal.data.mean(axis=-2))),
            "IY": (i_vec, out.scores.data),
        }

    def attention_map(self, out: ForwardOut, class_index: int) -> np.ndarray:
        """Final-layer attention row for one class, reshaped to (h, w)."""
        if out.attention is None or out.fmap_hw is None:
            raise ContractError("model has no decoder attention (iv_learning is off)")
        if not 0 <= class_index < self.k:
            raise ContractError(f"class_index {class_index} out of range [0, {self.k})")
        row = out.attention.data[..., class_index, :]
        if row.ndim == 2:
            if row.shape[0] != 1:
                raise ContractError("attention_map expects a single-sample forward")
            row = row[0]
        h, w = out.fmap_hw
        return row.reshape(h, w)
