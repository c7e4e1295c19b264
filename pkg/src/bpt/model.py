"""Point cloud transformer with a binarizable transformer module.

Layout: full-precision neighbour embedding -> transformer module (input
linear block, four offset-attention blocks, concat, output linear block) ->
full-precision classifier head or max-pool descriptor head.  In the binary
twin every weight and activation inside the transformer module is 1-bit.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .binarize import median_threshold, nonneg_binarize, sign_binarize
from .bitops import bgemm, pack_binary01, pack_signs
from .nn import LBR, BinaryLinear, Linear, Module, make_linear, sample_scales
from .pointops import EmbedConfig, NeighborEmbedding, PointCloud, StageConfig, plan_sampling, stack_plans

BINARY = "binary"
FULL_PRECISION = "fp"
CLASSIFIER = "classifier"
DESCRIPTOR = "descriptor"
N_BLOCKS = 4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    twin: str = BINARY
    d_model: int = 256
    n_blocks: int = N_BLOCKS
    head: str = CLASSIFIER
    num_classes: int = 40
    descriptor_dim: int = 256
    out_dim: int = 1024
    head_hidden: tuple[int, ...] = (512, 256)
    qk_ratio: int = 4
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    attention_threshold: float | str = 0.5
    activation_threshold: float = 0.5
    alpha_granularity: str = "row"
    lane_width: int = 64
    seed_index: int = 0

    def __post_init__(self):
        if self.twin not in (BINARY, FULL_PRECISION):
            raise ConfigError(f"twin must be {BINARY!r} or {FULL_PRECISION!r}, got {self.twin!r}")
        if self.n_blocks != N_BLOCKS:
            raise ConfigError(f"the transformer module has exactly {N_BLOCKS} blocks")
        if self.head not in (CLASSIFIER, DESCRIPTOR):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.head == DESCRIPTOR and self.out_dim != self.descriptor_dim:
            raise ConfigError("descriptor head needs out_dim == descriptor_dim")
        if self.d_model % self.qk_ratio:
            raise ConfigError("d_model must be divisible by qk_ratio")
        if not (self.attention_threshold == "median" or isinstance(self.attention_threshold, (int, float))):
            raise ConfigError("attention_threshold must be a number or 'median'")
        if self.lane_width not in (32, 64):
            raise ConfigError("lane_width must be 32 or 64")

    @property
    def binary(self) -> bool:
        return self.twin == BINARY

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["embed"] = self.embed.to_dict()
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        if "embed" in d:
            d["embed"] = EmbedConfig.from_dict(d["embed"])
        if "head_hidden" in d:
            d["head_hidden"] = tuple(d["head_hidden"])
        return cls(**d)


def paper_config(head: str = CLASSIFIER, twin: str = BINARY, num_classes: int = 40) -> ModelConfig:
    """Full-size layout: 1024-point input, 256-wide blocks, 1024-wide fusion."""
    out_dim = 256 if head == DESCRIPTOR else 1024
    return ModelConfig(twin=twin, head=head, num_classes=num_classes, out_dim=out_dim)


def desk_config(head: str = CLASSIFIER, twin: str = BINARY, num_classes: int = 4, **changes) -> ModelConfig:
    """Small layout for 256-point clouds on one CPU.

    Thresholds the attention map at its median along the L1-normalised axis:
    entries there average 1/M, so a fixed 0.5 zeroes the whole map.
    """
    embed = EmbedConfig(
        point_widths=(32, 32),
        stages=(StageConfig(0.5, 16, 64), StageConfig(0.25, 16, 64)),
    )
    cfg = ModelConfig(
        twin=twin,
        d_model=64,
        head=head,
        num_classes=num_classes,
        descriptor_dim=256,
        out_dim=256 if head == DESCRIPTOR else 128,
        head_hidden=(64,),
        embed=embed,
        attention_threshold="median",
    )
    return cfg.replace(**changes) if changes else cfg


# -- attention products -------------------------------------------------------


def _sample_beta(x: Tensor) -> Tensor:
    return ad.mean(ad.abs_(x), axis=tuple(range(1, x.ndim)), keepdims=True)


def _binary_bmm(left: Tensor, right_t: Tensor, left_signed: bool, threshold=0.5) -> Tensor:
    """Training-path twin of ``_packed_bmm``: exact product of the binarized
    operands, then the per-sample scales in the same order."""
    lb = ad.ste_binarize(left, signed=left_signed, threshold=threshold)
    rb = ad.ste_binarize(right_t, signed=True)
    prod = ad.matmul(lb, ad.transpose(rb))
    return ad.mul(ad.mul(prod, _sample_beta(left)), _sample_beta(right_t))


def _packed_bmm(left: np.ndarray, right_t: np.ndarray, left_signed: bool, threshold, lane_width) -> np.ndarray:
    """Per-sample bgemm of binarized ``left`` (B, M, K) with ``right_t`` (B, N, K).

    ``right_t`` is always sign-binarized; ``left`` uses sign or the {1,0}
    threshold.  Scales are applied per sample.
    """
    B = left.shape[0]
    out = np.empty((B, left.shape[1], right_t.shape[1]))
    thr = np.broadcast_to(threshold, left.shape) if np.ndim(threshold) else threshold
    for b in range(B):
        if left_signed:
            lb = pack_signs(sign_binarize(left[b]), lane_width)
        else:
            t = thr[b] if np.ndim(thr) else thr
            lb = pack_binary01(nonneg_binarize(left[b], t), lane_width)
        rb = pack_signs(sign_binarize(right_t[b]), lane_width)
        out[b] = bgemm(lb, rb)
    return out * sample_scales(left) * sample_scales(right_t)


class OffsetAttention(Module):
    """Self-attention whose output is subtracted from the input; the offset
    goes through linear+BN+ReLU and is added back."""

    def __init__(self, d: int, rng, binary: bool, qk_ratio: int = 4, attention_threshold=0.5,
                 activation_threshold: float = 0.5, **opts):
        self.binary = binary
        self.attention_threshold = attention_threshold
        self.lane_width = opts.get("lane_width", 64)
        self.use_packed = False
        dq = d // qk_ratio
        self.q = make_linear(d, dq, rng, binary, signed_act=False, threshold=activation_threshold, **opts) if binary else Linear(d, dq, rng)
        self.k = make_linear(d, dq, rng, binary, signed_act=False, threshold=activation_threshold, **opts) if binary else Linear(d, dq, rng)
        self.v = make_linear(d, d, rng, binary, signed_act=False, threshold=activation_threshold, **opts) if binary else Linear(d, d, rng)
        self.trans = LBR(d, d, rng, binary=binary, signed_act=True, **opts)

    def _threshold(self, att: np.ndarray):
        if self.attention_threshold == "median":
            return median_threshold(att, axis=1)
        return self.attention_threshold

    def attention(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """(attention map (B, M, M), values (B, M, d)) for input x."""
        q, k, v = self.q(x), self.k(x), self.v(x)
        packed = self.binary and self.use_packed and not self.training
        if not self.binary:
            energy = ad.matmul(q, ad.transpose(k))
        elif packed:
            energy = Tensor(_packed_bmm(q.data, k.data, True, None, self.lane_width))
        else:
            energy = _binary_bmm(q, k, True)
        att = ad.l1_normalize(ad.softmax(energy, axis=-1), axis=1)
        return att, v

    def __call__(self, x: Tensor) -> Tensor:
        att, v = self.attention(x)
        if not self.binary:
            x_r = ad.matmul(ad.transpose(att), v)
        elif self.use_packed and not self.training:
            att_t = np.swapaxes(att.data, 1, 2)
            thr = self._threshold(att.data)
            thr = np.swapaxes(thr, 1, 2) if np.ndim(thr) else thr
            x_r = Tensor(_packed_bmm(att_t, np.swapaxes(v.data, 1, 2), False, thr, self.lane_width))
        else:
            thr = self._threshold(att.data)
            thr = np.swapaxes(thr, 1, 2) if np.ndim(thr) else thr
            x_r = _binary_bmm(ad.transpose(att), ad.transpose(v), False, thr)
        return ad.add(x, self.trans(ad.sub(x, x_r)))


class TransformerModule(Module):
    def __init__(self, d_in: int, cfg: ModelConfig, rng):
        binary = cfg.binary
        opts = {"granularity": cfg.alpha_granularity, "lane_width": cfg.lane_width} if binary else {}
        act = {"threshold": cfg.activation_threshold} if binary else {}
        d = cfg.d_model
        self.input_block = [
            LBR(d_in, d, rng, binary=binary, signed_act=False, **act, **opts),
            LBR(d, d, rng, binary=binary, signed_act=False, **act, **opts),
        ]
        self.blocks = [
            OffsetAttention(d, rng, binary, cfg.qk_ratio, cfg.attention_threshold, cfg.activation_threshold, **opts)
            for _ in range(cfg.n_blocks)
        ]
        self.output_block = LBR(cfg.n_blocks * d, cfg.out_dim, rng, binary=binary, signed_act=False, **act, **opts)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.input_block:
            x = layer(x)
        outs = []
        for block in self.blocks:
            x = block(x)
            outs.append(x)
        return self.output_block(ad.concat(outs, axis=-1))


class ClassifierHead(Module):
    def __init__(self, in_dim: int, hidden: tuple[int, ...], num_classes: int, rng):
        dims = (2 * in_dim,) + tuple(hidden)
        self.hidden = [LBR(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.out = Linear(dims[-1], num_classes, rng, bias=True)

    def __call__(self, feats: Tensor) -> Tensor:
        x = ad.concat([ad.maxpool(feats, axis=1), ad.mean(feats, axis=1)], axis=-1)
        for layer in self.hidden:
            x = layer(x)
        return self.out(x)


class DescriptorHead(Module):
    def __call__(self, feats: Tensor) -> Tensor:
        return ad.l2_normalize(ad.maxpool(feats, axis=1), axis=-1)


class PointTransformer(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        # separate streams keep the full-precision parts identical across twins
        self.embed = NeighborEmbedding(cfg.embed, np.random.default_rng([seed, 0]))
        self.transformer = TransformerModule(cfg.embed.out_dim, cfg, np.random.default_rng([seed, 1]))
        if cfg.head == CLASSIFIER:
            self.head = ClassifierHead(cfg.out_dim, cfg.head_hidden, cfg.num_classes, np.random.default_rng([seed, 2]))
        else:
            self.head = DescriptorHead()

    # -- sampling -----------------------------------------------------------

    def plan(self, points) -> list[tuple[np.ndarray, np.ndarray]]:
        """FPS/kNN index plans for a batch of clouds (B, N, 3)."""
        return stack_plans([plan_sampling(p, self.cfg.embed, self.cfg.seed_index) for p in points])

    # -- forward --------------------------------------------------------------

    def features(self, points, plans=None) -> Tensor:
        points = np.asarray(points, dtype=np.float64)
        if plans is None:
            plans = self.plan(points)
        return self.transformer(self.embed(points, plans))

    def __call__(self, points, plans=None) -> Tensor:
        return self.head(self.features(points, plans))

    def _single(self, pc) -> np.ndarray:
        pts = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
        with ad.no_grad():
            return self(pts[None]).data[0].copy()

    def classify_forward(self, pc) -> np.ndarray:
        if self.cfg.head != CLASSIFIER:
            raise ConfigError("model has no classifier head")
        return self._single(pc)

    def describe_forward(self, pc) -> np.ndarray:
        if self.cfg.head != DESCRIPTOR:
            raise ConfigError("model has no descriptor head")
        return self._single(pc)

    # -- binarization -------------------------------------------------------

    def binary_layers(self) -> list[tuple[str, BinaryLinear]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, BinaryLinear)]

    def set_packed(self, flag: bool):
        """Switch binary products between bit-packed and dense-expansion paths."""
        for _, m in self.named_modules():
            if isinstance(m, BinaryLinear):
                if flag and m.packed is None:
                    m.freeze()
                m.use_packed = flag
            elif isinstance(m, OffsetAttention):
                m.use_packed = flag
        return self

    def freeze(self):
        """Pack every binary layer from its shadow weights and switch to eval."""
        for _, m in self.binary_layers():
            if m.weight is not None:
                m.freeze()
        self.set_packed(True)
        return self.eval()
