"""Lossless cross-sequential re-parameterization of multi-branch TDNNs."""

from .container import load, save
from .graph import (
    Branch,
    ModelGraph,
    ModuleNode,
    SequentialLayerSpec,
    count_flops,
    count_params,
    forward,
    forward_frames,
    validate,
)
from .reptdnn import RepTdnnConfig, build_rep_tdnn, paper_match_config, random_init
from .runtime import BatchNormParams, SeParams, TdnnLayer
from .transform import (
    RewriteReport,
    TransformOptions,
    cross_sequential_shift,
    csrep_transform,
    fuse_bn_first,
    fuse_conv_first,
    identity_to_conv,
    merge_branches,
    pad_context,
)

__version__ = "0.1.0"
