"""Rep-TDNN: four blocks of a head TDNN plus multi-branch sequential layers.

Training topology per block::

    head conv (C_head) -> activation -> bn
    layers_per_block x [ {conv C=3, conv C=1, identity} -> activation -> bn ]
    SE

then statistics pooling and two FC layers.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .graph import (
    Branch,
    ModelGraph,
    SequentialLayerSpec,
    act_node,
    bn_node,
    conv_node,
    fc_node,
    group_node,
    pool_node,
    se_node,
)
from .runtime import ACTIVATIONS, BatchNormParams, SeParams, TdnnLayer


class ConfigError(ValueError):
    """Invalid configuration. ``field`` names the offending key when known."""

    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.field = field
        self.line = line


@dataclass(frozen=True)
class RepTdnnConfig:
    input_channels: int = 161
    channels: int = 512
    head_contexts: tuple[int, ...] = (5, 1, 1, 5)
    layers_per_block: int = 4
    branch_contexts: tuple[int, ...] = (3, 1)
    identity_branch: bool = True
    head_groups: int = 1  # blocks after the first; the first head always sees raw features
    branch_groups: int = 1
    dilation: int = 1
    se_bottleneck: int = 128
    fc_dim: int = 512
    embedding_dim: int = 512
    activation: str = "leaky_relu"
    slope: float = 0.01
    bn_eps: float = 1e-5
    dtype: str = "float32"
    seed: int = 0

    @property
    def blocks(self) -> int:
        return len(self.head_contexts)

    def problems(self) -> list[tuple[str, str]]:
        """``(field, message)`` for every invalid field."""
        out = []
        for name in ("input_channels", "channels", "layers_per_block", "head_groups", "branch_groups",
                     "dilation", "se_bottleneck", "fc_dim", "embedding_dim"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                out.append((name, f"must be a positive integer, got {v!r}"))
        if not self.head_contexts:
            out.append(("head_contexts", "need at least one block"))
        for c in self.head_contexts:
            if not isinstance(c, int) or c < 1 or c % 2 == 0:
                out.append(("head_contexts", f"contexts must be odd positive integers, got {c!r}"))
        if not self.branch_contexts and not self.identity_branch:
            out.append(("branch_contexts", "a sequential layer needs at least one branch"))
        for c in self.branch_contexts:
            if not isinstance(c, int) or c < 1 or c % 2 == 0:
                out.append(("branch_contexts", f"contexts must be odd positive integers, got {c!r}"))
        for name in ("head_groups", "branch_groups"):
            g = getattr(self, name)
            if isinstance(g, int) and g >= 1 and isinstance(self.channels, int) and self.channels % g:
                out.append((name, f"{g} does not divide channels={self.channels}"))
        if self.activation not in ACTIVATIONS:
            out.append(("activation", f"must be one of {ACTIVATIONS}, got {self.activation!r}"))
        if not isinstance(self.slope, (int, float)) or not 0 <= self.slope < 1:
            out.append(("slope", f"must be in [0, 1), got {self.slope!r}"))
        if not isinstance(self.bn_eps, (int, float)) or not self.bn_eps > 0:
            out.append(("bn_eps", f"must be positive, got {self.bn_eps!r}"))
        if self.dtype not in ("float32", "float64"):
            out.append(("dtype", f"must be float32 or float64, got {self.dtype!r}"))
        if not isinstance(self.seed, int):
            out.append(("seed", f"must be an integer, got {self.seed!r}"))
        return out

    def check(self):
        probs = self.problems()
        if probs:
            raise ConfigError("; ".join(f"{f}: {m}" for f, m in probs), field=probs[0][0])
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("head_contexts", "branch_contexts"):
            d[k] = list(d[k])
        return d


_FIELDS = {f.name for f in dataclasses.fields(RepTdnnConfig)}


def config_from_dict(d: dict) -> RepTdnnConfig:
    if not isinstance(d, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(d) - _FIELDS)
    if unknown:
        raise ConfigError(f"unknown field {unknown[0]!r}", field=unknown[0])
    d = dict(d)
    for k in ("head_contexts", "branch_contexts"):
        if k in d:
            if not isinstance(d[k], list):
                raise ConfigError(f"{k}: must be a list of integers", field=k)
            d[k] = tuple(d[k])
    return RepTdnnConfig(**d).check()


def load_config(path) -> RepTdnnConfig:
    """Read a JSON configuration file; unknown fields are rejected."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno} column {exc.colno}: {exc.msg}", line=exc.lineno) from exc
    return config_from_dict(doc)


def save_config(config: RepTdnnConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# construction


def build_rep_tdnn(config: RepTdnnConfig | None = None) -> ModelGraph:
    """Multi-branch (training-topology) Rep-TDNN with deterministic random weights."""
    config = (config or RepTdnnConfig()).check()
    dt = config.dtype
    n = config.channels

    def conv(cin, cout, ctx, groups):
        return TdnnLayer(np.zeros((cout, cin // groups, ctx), dt), np.zeros(cout, dt), config.dilation, groups)

    def bn(ch):
        one = np.ones(ch, dt)
        return BatchNormParams(np.zeros(ch, dt), one, one, np.zeros(ch, dt), config.bn_eps)

    def act():
        return act_node(config.activation, config.slope)

    layers = []
    for k, ctx in enumerate(config.head_contexts):
        cin = config.input_channels if k == 0 else n
        g = 1 if k == 0 else config.head_groups
        layers.append(SequentialLayerSpec([conv_node(conv(cin, n, ctx, g)), act(), bn_node(bn(n))],
                                          "conv_activation_bn"))
        for _ in range(config.layers_per_block):
            branches = [Branch(conv(n, n, c, config.branch_groups)) for c in config.branch_contexts]
            if config.identity_branch:
                branches.append(Branch(None))
            layers.append(SequentialLayerSpec([group_node(branches), act(), bn_node(bn(n))],
                                              "conv_activation_bn"))
        nb = config.se_bottleneck
        se = SeParams(np.zeros((nb, n), dt), np.zeros(nb, dt), np.zeros((n, nb), dt), np.zeros(n, dt))
        layers.append(SequentialLayerSpec([se_node(se)], "plain"))
    head = [
        pool_node(),
        fc_node(np.zeros((config.fc_dim, 2 * n), dt), np.zeros(config.fc_dim, dt)),
        fc_node(np.zeros((config.embedding_dim, config.fc_dim), dt), np.zeros(config.embedding_dim, dt)),
    ]
    model = ModelGraph(layers, head, name="rep_tdnn", dtype=dt, seed=config.seed,
                       meta={"config": config.to_dict()})
    return random_init(model, config.seed)


# Conv weights are drawn N(0, (gain/sqrt(fan_in))^2) with this gain. A small
# branch gain keeps the residual stack from growing without bound when batch
# norm statistics are random rather than estimated from data.
CONV_GAIN = 1.0
BRANCH_GAIN = 0.5


def random_init(model: ModelGraph, seed: int) -> ModelGraph:
    """Fresh parameters for every node of ``model``, drawn in node order.

    * conv/FC weights: normal, std ``gain / sqrt(fan_in)``; biases U(-0.1, 0.1)
    * batch norm: mean N(0, 0.1), std U(0.5, 2.0), scale U(0.5, 1.5), shift N(0, 0.1)
    * SE: normal weights with std ``1 / sqrt(fan_in)``, zero biases

    Same seed, same model structure -> bitwise-identical parameters.
    """
    rng = np.random.default_rng(seed)
    dt = model.dtype

    def conv(c: TdnnLayer, gain):
        fan_in = c.weight.shape[1] * c.context
        w = rng.normal(0.0, gain / np.sqrt(fan_in), c.weight.shape).astype(dt)
        b = rng.uniform(-0.1, 0.1, c.out_channels).astype(dt)
        return TdnnLayer(w, b, c.dilation, c.groups, c.pad_value)

    def bn(b: BatchNormParams):
        ch = b.channels
        return BatchNormParams(
            rng.normal(0.0, 0.1, ch).astype(dt),
            rng.uniform(0.5, 2.0, ch).astype(dt),
            rng.uniform(0.5, 1.5, ch).astype(dt),
            rng.normal(0.0, 0.1, ch).astype(dt),
            b.eps,
        )

    def node(nd):
        p = nd.payload
        if nd.kind == "conv":
            return conv_node(conv(p, CONV_GAIN))
        if nd.kind == "batchnorm":
            return bn_node(bn(p))
        if nd.kind == "se":
            nb, n = p.bottleneck, p.channels
            return se_node(SeParams(rng.normal(0, 1 / np.sqrt(n), (nb, n)).astype(dt), np.zeros(nb, dt),
                                    rng.normal(0, 1 / np.sqrt(nb), (n, nb)).astype(dt), np.zeros(n, dt)))
        if nd.kind == "fc":
            w = rng.normal(0, 1 / np.sqrt(p.in_features), p.weight.shape).astype(dt)
            return fc_node(w, rng.uniform(-0.1, 0.1, p.out_features).astype(dt))
        if nd.kind == "branch_group":
            return group_node([Branch(None if br.conv is None else conv(br.conv, BRANCH_GAIN),
                                      None if br.pre_bn is None else bn(br.pre_bn)) for br in p])
        return nd

    layers = [SequentialLayerSpec([node(nd) for nd in layer.nodes], layer.order) for layer in model.layers]
    head = [node(nd) for nd in model.head]
    return dataclasses.replace(model, layers=tuple(layers), head=tuple(head), seed=seed)


# Chosen by the search in demos/param_budget.py over branch/head groups
# and FC sizes, minimizing the gap of the plain model's parameter count
# (batch norm counted as scale+shift) to 6.9e6.
PAPER_MATCH = dict(branch_groups=4, head_groups=2, fc_dim=1536, embedding_dim=192)


def paper_match_config(**overrides) -> RepTdnnConfig:
    return dataclasses.replace(RepTdnnConfig(**PAPER_MATCH), **overrides).check()


PAPER_PARAMS = 6.9e6
PAPER_FLOPS = 1.4e9


def paper_match_search(target: float = PAPER_PARAMS, bn_stats: bool = False):
    """Rank candidate configs by the plain model's parameter gap to ``target``.

    Counts are closed-form (no model is built). Returns a list of
    ``(gap, params, overrides)`` sorted by gap.
    """
    rows = []
    for bg in (1, 2, 4, 8, 16):
        for hg in (1, 2, 4, 8):
            for fc_dim in (256, 512, 1024, 1536):
                for emb in (192, 256, 512):
                    cfg = RepTdnnConfig(branch_groups=bg, head_groups=hg, fc_dim=fc_dim, embedding_dim=emb)
                    p = plain_param_formula(cfg, bn_stats=bn_stats)
                    rows.append((abs(p - target), p, dict(branch_groups=bg, head_groups=hg, fc_dim=fc_dim,
                                                          embedding_dim=emb)))
    rows.sort(key=lambda r: (r[0], -r[2]["embedding_dim"], r[2]["branch_groups"]))
    return rows


def plain_param_formula(cfg: RepTdnnConfig, bn_stats: bool = True) -> int:
    """Parameter count of the re-parameterized (plain) Rep-TDNN in closed form."""
    n, per_bn = cfg.channels, (4 if bn_stats else 2)
    total = 0
    kmax = max(cfg.branch_contexts) if cfg.branch_contexts else 1
    for k, ctx in enumerate(cfg.head_contexts):
        cin, g = (cfg.input_channels, 1) if k == 0 else (n, cfg.head_groups)
        total += n * (cin // g) * ctx + n
        total += cfg.layers_per_block * (n * (n // cfg.branch_groups) * kmax + n)
        total += per_bn * n  # block-final bn kept in front of SE
        total += 2 * n * cfg.se_bottleneck + cfg.se_bottleneck + n
    total += cfg.fc_dim * 2 * n + cfg.fc_dim + cfg.embedding_dim * cfg.fc_dim + cfg.embedding_dim
    return total
