"""Networks as ordered sequential layers of typed modules.

A :class:`ModelGraph` is a frame-level trunk (a tuple of
:class:`SequentialLayerSpec`) followed by a segment-level head (statistics
pooling and fully connected layers). Multi-branch layers hold a
``branch_group`` node whose branches are summed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from . import runtime as rt
from .runtime import Activation, BatchNormParams, Linear, SeParams, ShapeError, TdnnLayer

KINDS = ("conv", "batchnorm", "activation", "se", "stats_pool", "fc", "branch_group")
ORDERS = ("conv_activation_bn", "bn_conv_activation", "conv_bn_activation", "plain")
DTYPES = ("float32", "float64")


@dataclass(frozen=True, eq=False)
class Branch:
    """One path of a branch group: optional leading batch norm, then a conv.

    ``conv=None`` is the identity shortcut.
    """

    conv: TdnnLayer | None = None
    pre_bn: BatchNormParams | None = None

    @property
    def is_identity(self) -> bool:
        return self.conv is None


@dataclass(frozen=True, eq=False)
class ModuleNode:
    kind: str
    payload: Any = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown node kind {self.kind!r}")
        if self.kind == "branch_group":
            object.__setattr__(self, "payload", tuple(self.payload))


def conv_node(layer: TdnnLayer) -> ModuleNode:
    return ModuleNode("conv", layer)


def bn_node(bn: BatchNormParams) -> ModuleNode:
    return ModuleNode("batchnorm", bn)


def act_node(kind: str = "relu", slope: float = rt.DEFAULT_LEAKY_SLOPE) -> ModuleNode:
    return ModuleNode("activation", Activation(kind, slope))


def se_node(se: SeParams) -> ModuleNode:
    return ModuleNode("se", se)


def pool_node() -> ModuleNode:
    return ModuleNode("stats_pool")


def fc_node(weight, bias) -> ModuleNode:
    return ModuleNode("fc", Linear(weight, bias))


def group_node(branches: Sequence[Branch]) -> ModuleNode:
    return ModuleNode("branch_group", tuple(branches))


@dataclass(frozen=True, eq=False)
class SequentialLayerSpec:
    nodes: tuple[ModuleNode, ...]
    order: str = "plain"

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if self.order not in ORDERS:
            raise ValueError(f"unknown order tag {self.order!r}")


@dataclass(frozen=True, eq=False)
class ModelGraph:
    layers: tuple[SequentialLayerSpec, ...]
    head: tuple[ModuleNode, ...] = ()
    name: str = "model"
    dtype: str = "float32"
    seed: int | None = None
    training: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "head", tuple(self.head))
        if self.dtype not in DTYPES:
            raise ValueError(f"unsupported element type {self.dtype!r}")

    @property
    def input_channels(self) -> int | None:
        for layer in self.layers:
            for node in layer.nodes:
                n = _node_in_channels(node)
                if n is not None:
                    return n
        return None

    @property
    def embedding_dim(self) -> int | None:
        for node in reversed(self.head):
            if node.kind == "fc":
                return node.payload.out_features
        return None

    def with_layers(self, layers) -> ModelGraph:
        return replace(self, layers=tuple(layers))


def _node_in_channels(node: ModuleNode) -> int | None:
    p = node.payload
    if node.kind == "conv":
        return p.in_channels
    if node.kind == "batchnorm":
        return p.channels
    if node.kind == "se":
        return p.channels
    if node.kind == "branch_group":
        for br in p:
            if br.pre_bn is not None:
                return br.pre_bn.channels
            if br.conv is not None:
                return br.conv.in_channels
    return None


def run_branch(x: np.ndarray, branch: Branch) -> np.ndarray:
    if branch.pre_bn is not None:
        x = rt.batchnorm_infer(x, branch.pre_bn)
    if branch.conv is None:
        return x
    return rt.conv1d(x, branch.conv)


def run_node(x: np.ndarray, node: ModuleNode) -> np.ndarray:
    kind, p = node.kind, node.payload
    if kind == "conv":
        return rt.conv1d(x, p)
    if kind == "batchnorm":
        return rt.batchnorm_infer(x, p)
    if kind == "activation":
        return rt.activation(x, p.kind, p.slope)
    if kind == "se":
        return rt.se_block(x, p)
    if kind == "stats_pool":
        return rt.stats_pool(x)
    if kind == "fc":
        return rt.fc(x, p.weight, p.bias)
    if kind == "branch_group":
        out = run_branch(x, p[0])
        if len(p) > 1 and out is x:
            out = out.copy()
        for br in p[1:]:
            out += run_branch(x, br)
        return out
    raise ValueError(f"unknown node kind {kind!r}")


def forward_frames(model: ModelGraph, x) -> np.ndarray:
    """Run the frame-level trunk and return its last ``[B, N, T]`` tensor."""
    x = rt._as_tensor3(x)
    for li, layer in enumerate(model.layers):
        for ni, node in enumerate(layer.nodes):
            try:
                x = run_node(x, node)
            except ShapeError as exc:
                raise ShapeError(f"layer {li} node {ni} ({node.kind}): {exc}") from exc
    return x


def forward(model: ModelGraph, x) -> np.ndarray:
    """Full forward pass to ``[B, embedding_dim]``."""
    h = forward_frames(model, x)
    for ni, node in enumerate(model.head):
        try:
            h = run_node(h, node)
        except ShapeError as exc:
            raise ShapeError(f"head node {ni} ({node.kind}): {exc}") from exc
    return h


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Diagnostic:
    layer: int | None  # None for head nodes
    node: int | None
    message: str

    def __str__(self):
        where = "head" if self.layer is None else f"layer {self.layer}"
        if self.node is not None:
            where += f" node {self.node}"
        return f"{where}: {self.message}"


def _is_conv_like(node: ModuleNode, pre_bn: bool | None = None) -> bool:
    if node.kind == "conv":
        return not pre_bn
    if node.kind == "branch_group":
        flags = [br.pre_bn is not None for br in node.payload]
        if pre_bn is None:
            return True
        return all(flags) if pre_bn else not any(flags)
    return False


def order_matches(layer: SequentialLayerSpec) -> bool:
    """Check a layer's order tag against its node sequence."""
    nodes, kinds = layer.nodes, [n.kind for n in layer.nodes]
    if layer.order == "conv_activation_bn":
        return (len(nodes) == 3 and _is_conv_like(nodes[0], False)
                and kinds[1:] == ["activation", "batchnorm"])
    if layer.order == "conv_bn_activation":
        return (len(nodes) == 3 and _is_conv_like(nodes[0], False)
                and kinds[1:] == ["batchnorm", "activation"])
    if layer.order == "bn_conv_activation":
        if nodes and nodes[0].kind == "batchnorm":
            rest = nodes[1:]
            ok_head = bool(rest) and _is_conv_like(rest[0], False)
        else:
            rest = nodes
            ok_head = bool(rest) and rest[0].kind == "branch_group" and _is_conv_like(rest[0], True)
        tail = [n.kind for n in rest[1:]]
        return ok_head and tail in (["activation"], ["activation", "batchnorm"])
    # plain: no batch norm anywhere in the layer
    return all(k != "batchnorm" for k in kinds) and not any(
        n.kind == "branch_group" and any(br.pre_bn is not None for br in n.payload) for n in nodes)


def validate(model: ModelGraph) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    channels = model.input_channels
    if channels is None:
        diags.append(Diagnostic(None, None, "model has no channel-bearing node"))
        return diags

    def need(li, ni, got, what):
        if got != channels:
            diags.append(Diagnostic(li, ni, f"{what} expects {got} channels, incoming {channels}"))

    for li, layer in enumerate(model.layers):
        if not order_matches(layer):
            diags.append(Diagnostic(li, None, f"order tag {layer.order!r} inconsistent with nodes "
                                              f"{[n.kind for n in layer.nodes]}"))
        for ni, node in enumerate(layer.nodes):
            p = node.payload
            if node.kind == "conv":
                need(li, ni, p.in_channels, "conv")
                channels = p.out_channels
            elif node.kind == "batchnorm":
                need(li, ni, p.channels, "batchnorm")
            elif node.kind == "se":
                need(li, ni, p.channels, "se")
            elif node.kind == "activation":
                pass
            elif node.kind == "branch_group":
                channels = _check_group(li, ni, p, channels, diags)
            else:
                diags.append(Diagnostic(li, ni, f"{node.kind} not allowed in the frame-level trunk"))
    width = None  # None while still frame level
    for ni, node in enumerate(model.head):
        p = node.payload
        if node.kind == "stats_pool":
            if width is not None:
                diags.append(Diagnostic(None, ni, "stats_pool must come first in the head"))
            width = 2 * channels
        elif width is None:
            diags.append(Diagnostic(None, ni, f"{node.kind} before stats_pool in the head"))
        elif node.kind == "fc":
            if p.in_features != width:
                diags.append(Diagnostic(None, ni, f"fc expects {p.in_features} features, incoming {width}"))
            width = p.out_features
        elif node.kind == "batchnorm":
            if p.channels != width:
                diags.append(Diagnostic(None, ni, f"batchnorm expects {p.channels} features, incoming {width}"))
        elif node.kind != "activation":
            diags.append(Diagnostic(None, ni, f"{node.kind} not allowed in the head"))
    return diags


def _check_group(li, ni, branches, channels, diags) -> int:
    if not branches:
        diags.append(Diagnostic(li, ni, "branch group is empty"))
        return channels
    convs = [br.conv for br in branches if br.conv is not None]
    n_identity = sum(br.is_identity for br in branches)
    problems = []
    if n_identity > 1:
        problems.append(f"{n_identity} identity branches (at most one allowed)")
    for br in branches:
        if br.pre_bn is not None and br.pre_bn.channels != channels:
            problems.append(f"branch batch norm over {br.pre_bn.channels} channels, incoming {channels}")
    out = channels
    if convs:
        ref = convs[0]
        out = ref.out_channels
        if ref.in_channels != channels:
            problems.append(f"conv branch expects {ref.in_channels} channels, incoming {channels}")
        for c in convs[1:]:
            for attr in ("in_channels", "out_channels", "dilation", "groups"):
                if getattr(c, attr) != getattr(ref, attr):
                    problems.append(f"conv branches disagree on {attr}: {getattr(ref, attr)} vs {getattr(c, attr)}")
    if n_identity and out != channels:
        problems.append(f"identity branch needs equal in/out channels, got {channels} -> {out}")
    diags.extend(Diagnostic(li, ni, m) for m in problems)
    return out


# --------------------------------------------------------------------------
# accounting


def _conv_params(c: TdnnLayer) -> int:
    return c.weight.size + c.bias.size


def param_breakdown(model: ModelGraph) -> dict[str, int]:
    """Parameter counts per node kind.

    ``batchnorm`` counts mean, std, scale and shift (4 per channel);
    ``batchnorm_affine`` counts only scale and shift. ``pad_buffers`` are the
    per-channel padding constants of fused convs; they are derived values and
    are not part of any total.
    """
    out = dict(conv=0, batchnorm=0, batchnorm_affine=0, se=0, fc=0, pad_buffers=0)

    def conv(c):
        out["conv"] += _conv_params(c)
        if c.pad_value is not None:
            out["pad_buffers"] += c.pad_value.size

    def bn(b):
        out["batchnorm"] += 4 * b.channels
        out["batchnorm_affine"] += 2 * b.channels

    for node in _all_nodes(model):
        p = node.payload
        if node.kind == "conv":
            conv(p)
        elif node.kind == "batchnorm":
            bn(p)
        elif node.kind == "se":
            out["se"] += p.w_reduce.size + p.b_reduce.size + p.w_expand.size + p.b_expand.size
        elif node.kind == "fc":
            out["fc"] += p.weight.size + p.bias.size
        elif node.kind == "branch_group":
            for br in p:
                if br.conv is not None:
                    conv(br.conv)
                if br.pre_bn is not None:
                    bn(br.pre_bn)
    return out


def count_params(model: ModelGraph, bn_stats: bool = True) -> int:
    """Total parameters; ``bn_stats=False`` counts batch norm as 2 per channel."""
    b = param_breakdown(model)
    return b["conv"] + b["se"] + b["fc"] + (b["batchnorm"] if bn_stats else b["batchnorm_affine"])


def _all_nodes(model: ModelGraph):
    for layer in model.layers:
        yield from layer.nodes
    yield from model.head


def flop_breakdown(model: ModelGraph, frames: int) -> dict[str, int]:
    """Itemized FLOPs for one utterance of ``frames`` frames (batch 1).

    A multiply-accumulate is 2 FLOPs. Bias adds, batch norm (scale and
    shift: 2 per element), activations (1 per element), branch sums and the
    SE/pooling reductions are itemized separately so either convention can
    be recovered.
    """
    T = int(frames)
    out = dict(conv_mac=0, conv_bias=0, branch_add=0, batchnorm=0, activation=0,
               se=0, stats_pool=0, fc_mac=0, fc_bias=0)
    channels = model.input_channels or 0

    def conv(c):
        out["conv_mac"] += 2 * c.out_channels * (c.in_channels // c.groups) * c.context * T
        out["conv_bias"] += c.out_channels * T

    for layer in model.layers:
        for node in layer.nodes:
            p = node.payload
            if node.kind == "conv":
                conv(p)
                channels = p.out_channels
            elif node.kind == "batchnorm":
                out["batchnorm"] += 2 * channels * T
            elif node.kind == "activation":
                out["activation"] += channels * T
            elif node.kind == "se":
                n, nb = p.channels, p.bottleneck
                # temporal mean, two dense layers with bias, gate, channel rescale
                out["se"] += n * T + 2 * nb * n + nb + 2 * n * nb + n + 4 * n + n * T
            elif node.kind == "branch_group":
                outc = channels
                for br in p:
                    if br.pre_bn is not None:
                        out["batchnorm"] += 2 * channels * T
                    if br.conv is not None:
                        conv(br.conv)
                        outc = br.conv.out_channels
                out["branch_add"] += (len(p) - 1) * outc * T
                channels = outc
    for node in model.head:
        p = node.payload
        if node.kind == "stats_pool":
            # mean, centred square, mean of squares, sqrt
            out["stats_pool"] += channels * T + 3 * channels * T + channels
            channels *= 2
        elif node.kind == "fc":
            out["fc_mac"] += 2 * p.in_features * p.out_features
            out["fc_bias"] += p.out_features
            channels = p.out_features
        elif node.kind == "batchnorm":
            out["batchnorm"] += 2 * channels
        elif node.kind == "activation":
            out["activation"] += channels
    return out


def count_flops(model: ModelGraph, frames: int) -> int:
    return sum(flop_breakdown(model, frames).values())


def count_macs(model: ModelGraph, frames: int) -> int:
    """Multiply-accumulates of the conv and FC layers only."""
    b = flop_breakdown(model, frames)
    return (b["conv_mac"] + b["fc_mac"]) // 2


def conv_nodes(model: ModelGraph) -> list[TdnnLayer]:
    """Every conv in the trunk, branch convs included, in execution order."""
    found = []
    for layer in model.layers:
        for node in layer.nodes:
            if node.kind == "conv":
                found.append(node.payload)
            elif node.kind == "branch_group":
                found.extend(br.conv for br in node.payload if br.conv is not None)
    return found


def trunk_conv_count(model: ModelGraph) -> int:
    """Number of conv nodes directly in the trunk (merged groups count once)."""
    return sum(node.kind == "conv" for layer in model.layers for node in layer.nodes)


def branch_group_count(model: ModelGraph) -> int:
    return sum(node.kind == "branch_group" for layer in model.layers for node in layer.nodes)


def random_input(model: ModelGraph, batch: int, frames: int, rng) -> np.ndarray:
    return rng.standard_normal((batch, model.input_channels, frames)).astype(model.dtype)
