"""MFA-NAT and PCF-NAT speaker embedding extractors."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError
from .layers import (GA, NA, BatchNorm1d, BlockLayer, Downsample, GroupConv1d, Linear,
                     Module)
from .na_kernel import CLAMPED, PADDED, TileShape
from .tensor import Tensor

MFA = "mfa"
PCF = "pcf"

# PCF drop-path coefficient by layers per block; MFA always uses 1.0
PCF_DROP_PATH = {3: 1.0, 4: 1.1, 5: 1.2, 6: 1.3}


@dataclass
class ModelConfig:
    variant: str = MFA
    layers_per_block: int = 3
    channels: int = 256
    n_mels: int = 80
    na_heads: int = 16
    ga_heads: int = 4
    window: int = 27
    mfa_channels: int = 1536
    embedding_dim: int = 192
    asp_bottleneck: int = 128
    ffn_mult: int = 4
    group_schedule: tuple | None = None
    drop_path_coefficient: float | None = None
    tile: str = "16x8x16"
    # ablation switches
    na_padding: bool = True
    use_ga: bool = True
    four_gas: bool = False
    layernorm: bool = False
    use_mfa: bool = True
    use_asp: bool = True
    use_drop_path: bool = True
    mfa_norm_act: bool = True

    def __post_init__(self):
        if self.variant not in (MFA, PCF):
            raise ConfigError(f"variant must be 'mfa' or 'pcf', got {self.variant!r}")
        if self.group_schedule is None:
            self.group_schedule = (8, 4, 2, 1) if self.variant == PCF else (1, 1, 1, 1)
        self.group_schedule = tuple(int(g) for g in self.group_schedule)
        if self.drop_path_coefficient is None:
            self.drop_path_coefficient = (
                PCF_DROP_PATH.get(self.layers_per_block, 1.0) if self.variant == PCF else 1.0)
        self.validate()

    def validate(self):
        if self.layers_per_block < 1:
            raise ConfigError("layers_per_block must be >= 1")
        if len(self.group_schedule) != 4:
            raise ConfigError(f"group_schedule needs 4 entries, got {self.group_schedule}")
        hidden = self.ffn_mult * self.channels
        for g in self.group_schedule:
            if g < 1 or self.channels % g or self.n_mels % g or hidden % g:
                raise ConfigError(f"group count {g} does not divide channels/mels/ffn width")
        for heads in (self.na_heads, self.ga_heads):
            if self.channels % heads:
                raise ConfigError(f"channels {self.channels} not divisible by {heads} heads")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"window must be a positive odd integer, got {self.window}")
        if not 0 <= self.drop_path_coefficient < 10:
            raise ConfigError("drop_path_coefficient must be in [0, 10)")
        TileShape.parse(self.tile)

    @property
    def mfa_input_channels(self) -> int:
        return 4 * self.channels if self.use_mfa else self.channels

    @property
    def norm(self) -> str:
        return "layer" if self.layernorm else "batch"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["group_schedule"] = list(self.group_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**d)


def attention_schedule(cfg: ModelConfig) -> list[list[str]]:
    """Per block, per layer: 'NA' or 'GA'.  GA only ever replaces a block's
    last layer."""
    if not cfg.use_ga:
        ga_blocks = ()
    elif cfg.four_gas:
        ga_blocks = (0, 1, 2, 3)
    elif cfg.variant == MFA:
        ga_blocks = (1, 3)
    else:
        ga_blocks = (0, 2)
    L = cfg.layers_per_block
    return [[GA if (b in ga_blocks and i == L - 1) else NA for i in range(L)] for b in range(4)]


def drop_path_schedule(cfg: ModelConfig) -> list[float]:
    """Linear stochastic-depth schedule over all attention layers in depth
    order, peaking at ``coefficient / 10`` on the last layer."""
    total = 4 * cfg.layers_per_block
    if not cfg.use_drop_path:
        return [0.0] * total
    peak = cfg.drop_path_coefficient / 10.0
    return [peak * (i + 1) / total for i in range(total)]


class Block(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class AttentiveStatsPooling(Module):
    """Channel-dependent attentive statistics pooling with global context.

    Each frame is augmented with the utterance mean and std, squeezed through
    a tanh bottleneck and mapped to per-channel logits; a softmax over time
    yields weights for a mean and standard deviation per channel.
    """

    def __init__(self, channels, bottleneck=128, rng=None):
        self.channels = channels
        self.attn_in = GroupConv1d(3 * channels, bottleneck, 1, rng=rng)
        self.attn_out = GroupConv1d(bottleneck, channels, 1, rng=rng)

    def weights(self, x):
        """Per-channel attention over time, ``[B, D, T]``."""
        fill = Tensor(np.zeros((1, 1, x.shape[-1]), x.dtype))
        mu = tn.mean(x, 2, keepdims=True)
        sd = tn.sqrt(tn.clamp_min(tn.variance_along(x, 2, keepdims=True), 1e-9))
        context = tn.concat([x, mu + fill, sd + fill], axis=1)
        return tn.softmax(self.attn_out(tn.tanh(self.attn_in(context))), axis=2)

    def forward(self, x):
        if x.shape[-1] < 1:
            raise ContractError("pooling needs at least one frame")
        w = self.weights(x)
        mean = tn.sum_(w * x, 2)
        # centred form: same value as E_w[x^2] - mu^2 without the cancellation
        dev = x - tn.reshape(mean, mean.shape + (1,))
        var = tn.sum_(w * dev * dev, 2)
        std = tn.sqrt(tn.clamp_min(var, 1e-9))
        return tn.concat([mean, std], axis=1)


class StatsPooling(Module):
    """Plain temporal mean and standard deviation."""

    def forward(self, x):
        if x.shape[-1] < 1:
            raise ContractError("pooling needs at least one frame")
        mean = tn.mean(x, 2)
        std = tn.sqrt(tn.clamp_min(tn.variance_along(x, 2), 1e-9))
        return tn.concat([mean, std], axis=1)


def asp_forward(features: Tensor, pool: Module) -> Tensor:
    return pool(features)


class SpeakerModel(Module):
    """Stems -> four attention blocks -> MFA -> pooling -> embedding.

    Input is log-Mel features ``[B, n_mels, T]`` (or ``[n_mels, T]``).
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        rng = self.rng
        C, norm = cfg.channels, cfg.norm
        tile = TileShape.parse(cfg.tile)
        if cfg.variant == PCF:
            self.stems = [Downsample(cfg.n_mels, C, groups=g, norm=norm, rng=rng)
                          for g in cfg.group_schedule]
        else:
            self.stems = [Downsample(cfg.n_mels, C, groups=1, norm=norm, rng=rng)]

        kinds = attention_schedule(cfg)
        probs = iter(drop_path_schedule(cfg))
        padding = PADDED if cfg.na_padding else CLAMPED
        blocks = []
        for b in range(4):
            layers = []
            for kind in kinds[b]:
                layers.append(BlockLayer(
                    C, kind=kind, heads=cfg.na_heads if kind == NA else cfg.ga_heads,
                    groups=cfg.group_schedule[b], window=cfg.window, padding_mode=padding,
                    ffn_hidden=cfg.ffn_mult * C, drop_prob=next(probs), norm=norm,
                    tile=tile, rng=rng))
            blocks.append(Block(layers))
        self.blocks = blocks

        D = cfg.mfa_channels
        self.mfa = GroupConv1d(cfg.mfa_input_channels, D, 1, rng=rng)
        self.mfa_norm = BatchNorm1d(D) if cfg.mfa_norm_act else None
        self.pool = (AttentiveStatsPooling(D, cfg.asp_bottleneck, rng=rng) if cfg.use_asp
                     else StatsPooling())
        self.pool_norm = BatchNorm1d(2 * D)
        self.fc = Linear(2 * D, cfg.embedding_dim, rng=rng)
        self.emb_norm = BatchNorm1d(cfg.embedding_dim)

    # -- pieces
    @staticmethod
    def _batched(x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return tn.reshape(x, (1,) + x.shape) if x.ndim == 2 else x

    def stem_forward(self, fbank):
        x = self._batched(fbank)
        if x.shape[-1] < 2:
            raise ContractError(f"need at least 2 frames, got {x.shape[-1]}")
        return [stem(x) for stem in self.stems]

    def backbone_forward(self, fbank):
        stems = self.stem_forward(fbank)
        outs = []
        for i, block in enumerate(self.blocks):
            if i == 0:
                inp = stems[0]
            elif self.cfg.variant == PCF:
                inp = stems[i] + outs[-1]
            else:
                inp = outs[-1]
            outs.append(block(inp))
        return outs

    def mfa_forward(self, block_outputs):
        x = tn.concat(block_outputs, axis=1) if self.cfg.use_mfa else block_outputs[-1]
        x = self.mfa(x)
        if self.mfa_norm is not None:
            x = tn.relu(self.mfa_norm(x))
        return x

    def embed(self, pooled):
        return self.emb_norm(self.fc(self.pool_norm(pooled)))

    def forward(self, fbank):
        return self.embed(self.pool(self.mfa_forward(self.backbone_forward(fbank))))

    def layer_kinds(self):
        return [[layer.kind for layer in block.layers] for block in self.blocks]

    def extract(self, fbank) -> np.ndarray:
        """Eval-mode embeddings as a numpy array (one row per input)."""
        was = self.training
        self.eval()
        try:
            return self.forward(fbank).data.copy()
        finally:
            self.train(was)


# ------------------------------------------------------------------ objective

class AamSubcenterHead(Module):
    """Class weights ``[S, k, E]`` for the AAM + K-subcenter softmax."""

    def __init__(self, embedding_dim, n_classes, k=3, margin=0.2, scale=32.0, rng=None):
        rng = rng or np.random.default_rng(0)
        self.n_classes, self.k, self.margin, self.scale = n_classes, k, margin, scale
        std = math.sqrt(2.0 / (embedding_dim + n_classes * k))
        self.weight = tn.parameter(
            rng.normal(0.0, std, size=(n_classes, k, embedding_dim)).astype(tn.default_dtype()))

    def cosines(self, embeddings: Tensor) -> Tensor:
        """Max-over-subcenter cosine similarity ``[B, S]``."""
        S, k, E = self.weight.shape
        e = embeddings / tn.sqrt(tn.sum_(embeddings * embeddings, 1, keepdims=True))
        w = self.weight / tn.sqrt(tn.sum_(self.weight * self.weight, 2, keepdims=True))
        cos = tn.matmul(e, tn.transpose(tn.reshape(w, (S * k, E))))
        return tn.max_along(tn.reshape(cos, (e.shape[0], S, k)), 2)


def aam_subcenter_loss(embeddings: Tensor, labels, head: AamSubcenterHead) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    B = embeddings.shape[0]
    if labels.shape != (B,):
        raise ContractError(f"need one label per embedding, got {labels.shape} for batch {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= head.n_classes):
        raise ContractError(f"labels must lie in [0, {head.n_classes})")
    m, s = head.margin, head.scale
    cos = head.cosines(embeddings)
    sin = tn.sqrt(tn.clamp_min(1.0 - cos * cos, 1e-12))
    phi = cos * math.cos(m) - sin * math.sin(m)
    # past theta = pi - m, cos(theta + m) stops decreasing; use cos - m sin m
    phi = tn.where(cos.data > math.cos(math.pi - m), phi, cos - m * math.sin(m))
    onehot = np.zeros(cos.shape, dtype=cos.dtype)
    onehot[np.arange(B), labels] = 1
    logits = tn.scale(tn.where(onehot.astype(bool), phi, cos), s)
    logp = tn.log_softmax(logits, axis=1)
    return -tn.sum_(logp * Tensor(onehot)) / B


# ------------------------------------------------------------------ counting

def parameter_breakdown(cfg: ModelConfig) -> list[tuple[str, int]]:
    """Trainable parameters of the embedding extractor, by component
    (classification head excluded)."""
    C, D, E = cfg.channels, cfg.mfa_channels, cfg.embedding_dim
    hidden = cfg.ffn_mult * C
    norm = 2 * C
    rows = []
    stem_groups = cfg.group_schedule if cfg.variant == PCF else (1,)
    for i, g in enumerate(stem_groups):
        rows.append((f"stem{i + 1} (g={g})", GroupConv1d.count(cfg.n_mels, C, 2, g) + norm))
    kinds = attention_schedule(cfg)
    for b, g in enumerate(cfg.group_schedule):
        per_layer = (2 * norm
                     + GroupConv1d.count(C, 3 * C, 1, g) + GroupConv1d.count(C, C, 1, g)
                     + GroupConv1d.count(C, hidden, 1, g) + GroupConv1d.count(hidden, C, 1, g))
        label = "".join("G" if k == GA else "N" for k in kinds[b])
        rows.append((f"block{b + 1} (g={g}, {label})", per_layer * cfg.layers_per_block))
    rows.append(("mfa", GroupConv1d.count(cfg.mfa_input_channels, D) + (2 * D if cfg.mfa_norm_act else 0)))
    pool = GroupConv1d.count(3 * D, cfg.asp_bottleneck) + GroupConv1d.count(cfg.asp_bottleneck, D)
    rows.append(("pooling" + ("" if cfg.use_asp else " (stats)"), pool if cfg.use_asp else 0))
    rows.append(("embedding", 2 * 2 * D + (2 * D * E + E) + 2 * E))
    return rows


def count_parameters(cfg: ModelConfig) -> int:
    return sum(n for _, n in parameter_breakdown(cfg))


def format_breakdown(rows) -> str:
    width = max(len(name) for name, _ in rows + [("total", 0)])
    total = sum(n for _, n in rows)
    lines = [f"{name:<{width}}  {n:>12,}" for name, n in rows]
    lines.append("-" * (width + 14))
    lines.append(f"{'total':<{width}}  {total:>12,}  ({total / 1e6:.2f}M)")
    return "\n".join(lines)
