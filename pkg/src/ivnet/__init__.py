"""Instrumental-variable representation learning for deconfounded
multi-label image classification, with a from-scratch differentiable
substrate and a synthetic confounded benchmark."""

from .autodiff import OP_SET, Tensor, concat, conv2d, gather_rows, layernorm, maxpool2d, no_grad, precision
from .backbone import BackboneConfig, RasterImage, SpatialFeatureMap, extract_features, init_backbone
from .config import SCMConfig, TrainConfig, config_digest, load_scm_config, load_train_config
from .data import (
    LoadedSplit,
    Manifest,
    ManifestRecord,
    apply_uncertain_policy,
    load_raster,
    load_split,
    parse_manifest,
    resize_center_crop,
    save_raster,
    write_manifest,
)
from .decoder import confounder_loss, decode_layer, iv_loss, run_decoder
from .errors import ContractError, DataFormatError, NumericFault
from .fusion import embed_tokens, fuse, load_vocab, save_vocab, tokenize_pad
from .heads import causal_rep, predict, task_loss, total_loss
from .heatmap import attention_heatmap, export_attention, mask_mass_fraction
from .metrics import auc, evaluate
from .mi import CondDensityEstimator, cond_log_density, estimator_fit_step, mi_pairwise_loss
from .model import IVModel
from .optim import Parameter, adam_step, finite_diff_check
from .rng import stream
from .scm import SyntheticSample, generate_dataset, render_sample, sample_streams
from .training import MetricsLog, load_checkpoint, load_metrics, save_checkpoint, train
from .ablation import TOGGLE_GRID, ablate

__version__ = "0.1.0"
