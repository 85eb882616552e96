"""Cross-sequential re-parameterization of multi-branch TDNN graphs.

The rewrite turns ``conv-activation-bn`` multi-branch layers into single
TDNN layers in four steps:

1. move each trailing batch norm to the head of every branch of the next
   layer (``bn-conv-activation`` order; a pure regrouping),
2. fold each batch norm into its adjacent conv (bn-first or conv-first),
   materializing identity shortcuts as context-1 convs,
3. zero-pad every branch kernel to the group's widest context,
4. sum the branches into one conv.

Folding a batch norm that *precedes* a same-padded conv changes what the
padded frames see: the original conv pads the normalized signal with zeros,
the fused conv pads the raw signal. The fused layer therefore records a
per-input-channel ``pad_value`` equal to the raw value that the batch norm
maps to zero, which keeps boundary frames exact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .graph import (
    Branch,
    ModelGraph,
    ModuleNode,
    SequentialLayerSpec,
    branch_group_count,
    conv_node,
    forward_frames,
    group_node,
    order_matches,
)
from .runtime import BatchNormParams, ShapeError, TdnnLayer

log = logging.getLogger(__name__)

STEP_NAMES = {
    1: "cross_sequential_shift",
    2: "fuse_batchnorm",
    3: "pad_context",
    4: "merge_branches",
}


class TransformError(ValueError):
    pass


class TrainingModeError(TransformError):
    pass


# --------------------------------------------------------------------------
# per-layer parameter algebra


def _check_bn(bn: BatchNormParams, channels: int, what: str):
    if bn.channels != channels:
        raise ShapeError(f"batch norm over {bn.channels} channels cannot fold into a conv with "
                         f"{channels} {what} channels")
    if not np.all(bn.std > 0):
        raise ValueError("batch norm std must be strictly positive")


def fuse_bn_first(bn: BatchNormParams, conv: TdnnLayer) -> TdnnLayer:
    """Fold a batch norm that feeds ``conv`` into the conv's weights and bias.

    The scale ``scale/std`` multiplies the weight along its input-channel axis
    and the shift ``shift - scale*mean/std`` is convolved with the kernel into
    the bias. The result satisfies ``conv1d(x, fused) == conv1d(bn(x), conv)``
    on every frame, boundary frames included.

    A channel with zero ``scale`` has no raw value that normalizes to the
    conv's padding, so such a batch norm is rejected.
    """
    _check_bn(bn, conv.in_channels, "input")
    if np.any(bn.scale == 0):
        raise ValueError("cannot fold a batch norm with zero scale ahead of a padded conv")
    dt = conv.weight.dtype
    g = conv.groups
    o, i, c = conv.weight.shape
    factor = (bn.scale / bn.std).astype(dt)
    offset = (bn.shift - bn.scale * bn.mean / bn.std).astype(dt)

    # input channel of weight[o, k, :] is (o // (o_total/g)) * i + k
    grp = np.arange(o) // (o // g)
    idx = grp[:, None] * i + np.arange(i)[None, :]  # [o, i]
    weight = conv.weight * factor[idx][:, :, None]
    bias = conv.bias + np.einsum("oic,oi->o", conv.weight, offset[idx])

    # raw input value whose normalized image is the conv's old padding value
    old_pad = np.zeros(conv.in_channels) if conv.pad_value is None else conv.pad_value
    pad = (old_pad - bn.shift) * bn.std / bn.scale + bn.mean
    return TdnnLayer(weight.astype(dt), bias.astype(dt), conv.dilation, g, pad.astype(dt))


def fuse_conv_first(conv: TdnnLayer, bn: BatchNormParams) -> TdnnLayer:
    """Fold a batch norm that follows ``conv``: scale output rows, shift the bias."""
    _check_bn(bn, conv.out_channels, "output")
    dt = conv.weight.dtype
    factor = (bn.scale / bn.std).astype(dt)
    weight = conv.weight * factor[:, None, None]
    bias = (conv.bias - bn.mean) * factor + bn.shift
    return TdnnLayer(weight.astype(dt), bias.astype(dt), conv.dilation, conv.groups, conv.pad_value)


def identity_to_conv(channels: int, groups: int = 1, dtype="float64", dilation: int = 1) -> TdnnLayer:
    """Context-1 conv that reproduces its input. With ``groups>1`` the kernel is
    stored in grouped form (each output channel sees only its own group)."""
    if channels < 1:
        raise ValueError("channels must be >= 1")
    if channels % groups:
        raise ValueError(f"{channels} channels not divisible by groups={groups}")
    per = channels // groups
    w = np.zeros((channels, per, 1), dtype=dtype)
    w[np.arange(channels), np.arange(channels) % per, 0] = 1
    return TdnnLayer(w, np.zeros(channels, dtype=dtype), dilation, groups)


def ungroup(conv: TdnnLayer) -> TdnnLayer:
    """Expand a grouped conv into the equivalent ``groups=1`` block-diagonal conv."""
    g = conv.groups
    if g == 1:
        return conv
    o, i, c = conv.weight.shape
    per_out = o // g
    w = np.zeros((o, i * g, c), dtype=conv.weight.dtype)
    for k in range(g):
        w[k * per_out:(k + 1) * per_out, k * i:(k + 1) * i] = conv.weight[k * per_out:(k + 1) * per_out]
    return TdnnLayer(w, conv.bias, conv.dilation, 1, conv.pad_value)


def pad_context(conv: TdnnLayer, target_context: int) -> TdnnLayer:
    """Zero-pad the kernel symmetrically to ``target_context`` taps."""
    if target_context % 2 != 1:
        raise ValueError(f"target context must be odd, got {target_context}")
    if target_context < conv.context:
        raise ValueError(f"cannot shrink context {conv.context} to {target_context}")
    if target_context == conv.context:
        return conv
    k = (target_context - conv.context) // 2
    w = np.pad(conv.weight, ((0, 0), (0, 0), (k, k)))
    return TdnnLayer(w, conv.bias, conv.dilation, conv.groups, conv.pad_value)


def _has_edge_taps(conv: TdnnLayer) -> bool:
    c = conv.context // 2
    return bool(np.any(conv.weight[:, :, :c]) or np.any(conv.weight[:, :, c + 1:]))


def _same_pad(a, b) -> bool:
    if a is None and b is None:
        return True
    a = np.zeros_like(b) if a is None else a
    b = np.zeros_like(a) if b is None else b
    return bool(np.allclose(a, b, rtol=1e-6, atol=1e-12))


def merge_branches(branches: Sequence[TdnnLayer]) -> TdnnLayer:
    """Sum branch kernels and biases into one conv.

    Padding values only matter for branches with nonzero off-centre taps;
    those must agree.
    """
    if not branches:
        raise ValueError("nothing to merge")
    ref = branches[0]
    for b in branches:
        if (b.weight.shape != ref.weight.shape or b.dilation != ref.dilation
                or b.groups != ref.groups):
            raise ShapeError(f"cannot merge conv {b.weight.shape} (d={b.dilation}, g={b.groups}) "
                             f"with {ref.weight.shape} (d={ref.dilation}, g={ref.groups})")
    edged = [b for b in branches if _has_edge_taps(b)]
    for b in edged[1:]:
        if not _same_pad(edged[0].pad_value, b.pad_value):
            raise ShapeError("branches disagree on their padding value")
    if edged:
        pad = edged[0].pad_value
    else:
        pad = next((b.pad_value for b in branches if b.pad_value is not None), None)
    weight = ref.weight.copy()
    bias = ref.bias.copy()
    for b in branches[1:]:
        weight += b.weight
        bias += b.bias
    return TdnnLayer(weight, bias, ref.dilation, ref.groups, pad)


# --------------------------------------------------------------------------
# graph rewrite


@dataclass
class RewriteReport:
    steps: list[str] = field(default_factory=list)
    layer_counts: list[dict] = field(default_factory=list)
    shifted_bns: int = 0
    fused_bns: int = 0
    merged_groups: int = 0
    rewritten_chains: int = 0
    max_deviation: float | None = None
    untransformed: list[tuple[int, str]] = field(default_factory=list)
    retained_bns: list[tuple[int, str]] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "steps": list(self.steps),
            "layer_counts": list(self.layer_counts),
            "shifted_bns": self.shifted_bns,
            "fused_bns": self.fused_bns,
            "merged_groups": self.merged_groups,
            "rewritten_chains": self.rewritten_chains,
            "max_deviation": self.max_deviation,
            "untransformed": [list(u) for u in self.untransformed],
            "retained_bns": [list(u) for u in self.retained_bns],
        }


@dataclass(frozen=True)
class TransformOptions:
    stop_after: int = 4  # last step to apply, 1..4
    self_check: bool = False
    check_trials: int = 4
    check_batch: int = 2
    check_frames: int = 64
    check_seed: int = 0


def _node_counts(model: ModelGraph) -> dict:
    counts: dict[str, int] = {}
    for layer in model.layers:
        for node in layer.nodes:
            counts[node.kind] = counts.get(node.kind, 0) + 1
            if node.kind == "branch_group":
                counts["branches"] = counts.get("branches", 0) + len(node.payload)
    counts["layers"] = len(model.layers)
    return counts


def _retag(nodes: list[ModuleNode], fallback: str) -> SequentialLayerSpec:
    for order in (fallback, "plain", "conv_activation_bn", "bn_conv_activation", "conv_bn_activation"):
        spec = SequentialLayerSpec(nodes, order)
        if order_matches(spec):
            return spec
    return SequentialLayerSpec(nodes, fallback)


def _takes_bn(layer: SequentialLayerSpec) -> str | None:
    """Reason a layer cannot receive a migrated batch norm, or None if it can."""
    if not layer.nodes:
        return "empty layer"
    first = layer.nodes[0]
    if first.kind not in ("conv", "branch_group"):
        return f"successor starts with {first.kind}"
    if layer.order not in ("conv_activation_bn", "plain"):
        return f"successor has order {layer.order}"
    if first.kind == "branch_group" and any(br.pre_bn is not None for br in first.payload):
        return "successor branches already carry a batch norm"
    return None


def cross_sequential_shift(model: ModelGraph, report: RewriteReport | None = None) -> ModelGraph:
    """Step 1: move each layer's trailing batch norm onto the next layer's branches."""
    report = report if report is not None else RewriteReport()
    layers = list(model.layers)
    for j in range(len(layers)):
        prev = layers[j]
        if not prev.nodes or prev.nodes[-1].kind != "batchnorm":
            continue
        bn = prev.nodes[-1].payload
        reason = "last layer of the trunk" if j + 1 == len(layers) else _takes_bn(layers[j + 1])
        if reason is not None:
            report.retained_bns.append((j, reason))
            continue
        nxt = layers[j + 1]
        first = nxt.nodes[0]
        if first.kind == "branch_group":
            head = [group_node([replace(br, pre_bn=bn) for br in first.payload])]
        else:
            head = [ModuleNode("batchnorm", bn), first]
        layers[j] = _retag(list(prev.nodes[:-1]), "plain")
        layers[j + 1] = _retag(head + list(nxt.nodes[1:]), "bn_conv_activation")
        report.shifted_bns += 1
    return model.with_layers(layers)


def _materialize(branch: Branch, like: TdnnLayer | None, channels: int, dtype) -> TdnnLayer:
    if branch.conv is not None:
        return branch.conv
    groups = like.groups if like is not None else 1
    dilation = like.dilation if like is not None else 1
    return identity_to_conv(channels, groups, dtype, dilation)


def _group_channels(branches) -> int:
    for br in branches:
        if br.pre_bn is not None:
            return br.pre_bn.channels
        if br.conv is not None:
            return br.conv.in_channels
    raise ValueError("cannot infer channel count of an identity-only group")


def _fuse_layer(layer: SequentialLayerSpec, dtype, report: RewriteReport, li: int) -> SequentialLayerSpec:
    nodes = list(layer.nodes)
    if layer.order == "bn_conv_activation":
        if nodes[0].kind == "batchnorm":
            bn, conv = nodes[0].payload, nodes[1].payload
            if nodes[1].kind == "branch_group":
                nodes[1:2] = [group_node([replace(br, pre_bn=bn) for br in nodes[1].payload])]
                nodes = nodes[1:]
            else:
                nodes[0:2] = [conv_node(fuse_bn_first(bn, conv))]
                report.fused_bns += 1
                return _retag(nodes, "plain")
        branches = nodes[0].payload
        like = next((br.conv for br in branches if br.conv is not None), None)
        channels = _group_channels(branches)
        fused = []
        for br in branches:
            conv = _materialize(br, like, channels, dtype)
            fused.append(Branch(fuse_bn_first(br.pre_bn, conv)))
        report.fused_bns += 1
        nodes[0] = group_node(fused)
        return _retag(nodes, "plain")
    if layer.order == "conv_bn_activation":
        first, bn = nodes[0], nodes[1].payload
        if first.kind == "conv":
            fused_node = conv_node(fuse_conv_first(first.payload, bn))
        else:
            branches = first.payload
            like = next((br.conv for br in branches if br.conv is not None), None)
            channels = _group_channels(branches)
            # the first branch absorbs the batch norm's offset, the rest are only rescaled
            rescale = replace(bn, mean=np.zeros_like(bn.mean), shift=np.zeros_like(bn.shift))
            fused = [Branch(fuse_conv_first(_materialize(br, like, channels, dtype), bn if k == 0 else rescale))
                     for k, br in enumerate(branches)]
            fused_node = group_node(fused)
        report.fused_bns += 1
        return _retag([fused_node] + nodes[2:], "plain")
    return layer


def _fuse_layer_safe(layer, dtype, report, li):
    try:
        return _fuse_layer(layer, dtype, report, li)
    except (ValueError, ShapeError) as exc:
        report.untransformed.append((li, f"batch norm fold failed: {exc}"))
        log.warning("layer %d left unfused: %s", li, exc)
        return layer


def _group_layers(model: ModelGraph, fn, report: RewriteReport) -> ModelGraph:
    layers = []
    for li, layer in enumerate(model.layers):
        nodes = list(layer.nodes)
        for ni, node in enumerate(nodes):
            if node.kind != "branch_group":
                continue
            if any(br.pre_bn is not None for br in node.payload):
                report.untransformed.append((li, "branch group still carries an unfused batch norm"))
                continue
            try:
                nodes[ni] = fn(node.payload)
            except (ValueError, ShapeError) as exc:
                report.untransformed.append((li, str(exc)))
        layers.append(_retag(nodes, layer.order))
    return model.with_layers(layers)


def _pad_group(branches, dtype) -> ModuleNode:
    like = next((br.conv for br in branches if br.conv is not None), None)
    channels = _group_channels(branches)
    convs = [_materialize(br, like, channels, dtype) for br in branches]
    groups = {c.groups for c in convs}
    if len(groups) > 1:
        convs = [ungroup(c) for c in convs]
    target = max(c.context for c in convs)
    return group_node([Branch(pad_context(c, target)) for c in convs])


def _merge_group(branches) -> ModuleNode:
    if any(br.conv is None for br in branches):
        raise ValueError("identity branch must be materialized before merging")
    return conv_node(merge_branches([br.conv for br in branches]))


def _check_inference(model: ModelGraph):
    if model.training:
        raise TrainingModeError("model is flagged as training mode; CS-Rep needs inference-mode statistics")


def max_frame_deviation(a: ModelGraph, b: ModelGraph, trials=4, batch=2, frames=64, seed=0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal((batch, a.input_channels, frames)).astype(a.dtype)
        worst = max(worst, float(np.max(np.abs(forward_frames(a, x) - forward_frames(b, x)))))
    return worst


def csrep_transform(model: ModelGraph, options: TransformOptions | None = None):
    """Apply steps 1..``options.stop_after`` and return ``(model, report)``.

    The input model is not modified. Layers that cannot be rewritten are left
    intact and listed in ``report.untransformed``.
    """
    options = options or TransformOptions()
    if not 1 <= options.stop_after <= 4:
        raise ValueError(f"stop_after must be 1..4, got {options.stop_after}")
    _check_inference(model)
    report = RewriteReport()
    report.layer_counts.append({"stage": "input", **_node_counts(model)})
    groups_before = branch_group_count(model)
    out = model
    for step in range(1, options.stop_after + 1):
        if step == 1:
            out = cross_sequential_shift(out, report)
        elif step == 2:
            out = out.with_layers(_fuse_layer_safe(layer, out.dtype, report, li)
                                  for li, layer in enumerate(out.layers))
        elif step == 3:
            out = _group_layers(out, lambda br: _pad_group(br, out.dtype), report)
        else:
            out = _group_layers(out, _merge_group, report)
            report.merged_groups = groups_before - branch_group_count(out)
        report.steps.append(STEP_NAMES[step])
        report.layer_counts.append({"stage": STEP_NAMES[step], **_node_counts(out)})
    report.rewritten_chains = report.shifted_bns + report.fused_bns + report.merged_groups
    if report.rewritten_chains == 0:
        out = model
    if options.self_check:
        report.max_deviation = max_frame_deviation(model, out, options.check_trials, options.check_batch,
                                                   options.check_frames, options.check_seed)
    return out, report
